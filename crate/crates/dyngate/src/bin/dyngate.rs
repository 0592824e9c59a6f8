//! Experiment runner: benchmark grids, correlation analysis, pretraining,
//! and the concurrent serving stress harness.

use clap::{Parser, Subcommand};
use dyngate::adapt::AdaptationMode;
use dyngate::cli::{cmd_correlate, cmd_grid, cmd_pretrain, cmd_replay, cmd_stress, StressOptions};
use dyngate::config::ExperimentConfig;
use dyngate::driftlab::RunStatus;
use dyngate::gatenet::GateKind;
use dyngate::metrics::FlipColumn;
use dyngate::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dyngate", version, about = "Gated-MLP drift adaptation benchmark and snapshot serving harness")]
struct Cli {
    /// Experiment config file (JSON). Defaults to the built-in desk-scale
    /// benchmark when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Replace the config's seed list with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Config override of the form key=value (dotted JSON paths), e.g.
    /// --set drift.severity=1.2; repeatable.
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full (models x modes) benchmark grid and write results.csv
    /// plus per-cell loss traces.
    Grid,
    /// Correlate a flip column against adaptation accuracy over a results
    /// CSV; prints the Pearson r.
    Correlate {
        /// Results CSV produced by `grid`.
        #[arg(long)]
        results: PathBuf,
        /// Which flip column to use: pred or routing.
        #[arg(long, default_value = "pred")]
        flip_column: String,
    },
    /// Concurrent serve/train stress run with full audit replay.
    Stress {
        #[arg(long, default_value_t = 8)]
        serve_threads: usize,
        #[arg(long, default_value_t = 5000)]
        train_steps: usize,
        #[arg(long, default_value_t = 50)]
        publish_every: usize,
        #[arg(long, default_value_t = 1500)]
        requests_per_thread: usize,
        /// Adaptation mode for the training loop.
        #[arg(long, default_value = "D_theta_and_w_inactive")]
        mode: String,
    },
    /// Pretrain one model on the config's clean data and write a checkpoint.
    Pretrain {
        /// Model kind, e.g. dg_soft.
        #[arg(long)]
        model: String,
    },
    /// Re-verify a persisted stress run directory.
    Replay {
        /// Directory written by `stress --out`.
        #[arg(long)]
        dir: PathBuf,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::InvalidInput(_)
        | Error::Unsupported(_)
        | Error::ModeSkip(_)
        | Error::DimensionMismatch { .. } => 1,
        Error::AuditGap(_) | Error::AuditMismatch { .. } | Error::NoSnapshot => 2,
        Error::Parse { .. } | Error::Io(_) | Error::InsufficientData(_) => 3,
    }
}

fn load_config(cli: &Cli) -> dyngate::Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::from_file_with_overrides(path, &cli.overrides)?,
        None => {
            let mut value = serde_json::to_value(ExperimentConfig::default())
                .expect("default config serializes");
            for entry in &cli.overrides {
                apply_value_override(&mut value, entry)?;
            }
            serde_json::from_value(value).map_err(|e| Error::Config(format!("bad override: {e}")))?
        }
    };
    if let Some(seed) = cli.seed {
        config.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

// Same override semantics as config files, for the built-in defaults.
fn apply_value_override(value: &mut serde_json::Value, entry: &str) -> dyngate::Result<()> {
    let tmp = serde_json::to_string(value).expect("serializes");
    let dir = std::env::temp_dir().join(format!("dyngate-defaults-{}.json", std::process::id()));
    std::fs::write(&dir, tmp)?;
    let result = ExperimentConfig::from_file_with_overrides(&dir, &[entry.to_string()]);
    std::fs::remove_file(&dir).ok();
    *value = serde_json::to_value(result?).expect("serializes");
    Ok(())
}

fn run(cli: &Cli) -> dyngate::Result<u8> {
    match &cli.command {
        Command::Grid => {
            let config = load_config(cli)?;
            let outputs = cmd_grid(&config)?;
            for out in &outputs {
                let skipped = out
                    .records
                    .iter()
                    .filter(|r| matches!(r.status, RunStatus::Skip(_)))
                    .count();
                println!(
                    "seed {}: {} records ({} OK, {} skipped) -> {}",
                    out.seed,
                    out.records.len(),
                    out.records.len() - skipped,
                    skipped,
                    out.results_csv.display()
                );
            }
            Ok(0)
        }
        Command::Correlate {
            results,
            flip_column,
        } => {
            let column = match flip_column.as_str() {
                "pred" => FlipColumn::Pred,
                "routing" => FlipColumn::Routing,
                other => {
                    return Err(Error::Config(format!(
                        "flip column must be `pred` or `routing`, got `{other}`"
                    )))
                }
            };
            let out_csv = cli
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("out"))
                .join("correlation.csv");
            let (r, points) = cmd_correlate(results, column, Some(&out_csv))?;
            println!("pearson r = {r:.6} over {} points -> {}", points.len(), out_csv.display());
            Ok(0)
        }
        Command::Stress {
            serve_threads,
            train_steps,
            publish_every,
            requests_per_thread,
            mode,
        } => {
            let opts = StressOptions {
                serve_threads: *serve_threads,
                requests_per_thread: *requests_per_thread,
                train_steps: *train_steps,
                publish_every: *publish_every,
                seed: cli.seed.unwrap_or(0),
                mode: AdaptationMode::parse(mode)?,
                out_dir: cli.out.clone(),
            };
            let report = cmd_stress(&opts)?;
            println!(
                "replay pass: {}/{} ({} publications)",
                report.replay_passed, report.total_requests, report.publications
            );
            if report.replay_failures.is_empty() {
                Ok(0)
            } else {
                eprintln!("failing request ids: {:?}", report.replay_failures);
                Ok(2)
            }
        }
        Command::Pretrain { model } => {
            let config = load_config(cli)?;
            let kind = GateKind::parse(model)?;
            let out_dir = cli
                .out
                .clone()
                .unwrap_or_else(|| config.output_dir.clone());
            let (path, accuracy) = cmd_pretrain(&config, kind, &out_dir)?;
            println!("{}: clean accuracy {:.2}% -> {}", kind, accuracy, path.display());
            Ok(0)
        }
        Command::Replay { dir } => {
            let report = cmd_replay(dir)?;
            println!("replay pass: {}/{}", report.passed, report.total);
            if report.failures.is_empty() {
                Ok(0)
            } else {
                eprintln!("failing request ids: {:?}", report.failures);
                Ok(2)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
