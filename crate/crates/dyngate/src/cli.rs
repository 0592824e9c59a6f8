//! Implementations behind the `dyngate` binary's subcommands, kept as
//! library functions so integration tests can drive them directly.

use crate::adapt::{AdaptConfig, AdaptationMode};
use crate::config::ExperimentConfig;
use crate::driftlab::{
    evaluate, pretrain, read_results_csv, run_protocol, split_dataset, write_loss_trace,
    write_results_csv, MetricsRecord,
};
use crate::gatenet::{Arch, GateKind, GateSpec, ModelParams};
use crate::mathcore::RngStream;
use crate::metrics::{correlate_flip_adaptacc, CorrelationPoint, FlipColumn};
use crate::snapserve::{
    audit_replay, read_audit_log, write_audit_log, AuditRecord, ServeEngine, SnapshotArchive,
};
use crate::{adapt, Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Paths written by one grid run.
#[derive(Debug, Clone)]
pub struct GridRunOutput {
    pub seed: u64,
    pub results_csv: PathBuf,
    pub loss_traces: Vec<PathBuf>,
    pub records: Vec<MetricsRecord>,
}

/// Run the full benchmark grid for every configured seed.
///
/// A single-seed config writes `results.csv` and `loss_<model>_<mode>.csv`
/// under the output directory; with several seeds each run goes to a
/// `seed_<s>/` subdirectory.
pub fn cmd_grid(config: &ExperimentConfig) -> Result<Vec<GridRunOutput>> {
    config.validate()?;
    let multi = config.seeds.len() > 1;
    let mut outputs = Vec::new();
    for &seed in &config.seeds {
        let dir = if multi {
            config.output_dir.join(format!("seed_{seed}"))
        } else {
            config.output_dir.clone()
        };
        std::fs::create_dir_all(&dir)?;

        let clean = config.build_dataset(seed)?;
        let probe = config.build_probe(seed);
        let drift = config.build_drift(seed);
        let proto = config.protocol_config(seed);
        let out = run_protocol(
            &config.models,
            &config.modes,
            &clean,
            &drift,
            probe.as_ref(),
            &proto,
        )?;

        let results_csv = dir.join("results.csv");
        let mut buf = Vec::new();
        write_results_csv(&out.records, &mut buf)?;
        std::fs::write(&results_csv, buf)?;

        let mut loss_traces = Vec::new();
        for trace in &out.traces {
            let path = dir.join(format!("loss_{}_{}.csv", trace.model, trace.mode));
            let mut buf = Vec::new();
            write_loss_trace(&trace.steps, &mut buf)?;
            std::fs::write(&path, buf)?;
            loss_traces.push(path);
        }
        outputs.push(GridRunOutput {
            seed,
            results_csv,
            loss_traces,
            records: out.records,
        });
    }
    Ok(outputs)
}

pub const CORRELATION_CSV_HEADER: &str = "model,mode,flip,adapt_acc";

/// Correlate a flip column against adaptation accuracy over the OK rows of
/// a results CSV. Writes the scatter points and returns the Pearson r.
pub fn cmd_correlate(
    results_csv: &Path,
    column: FlipColumn,
    out_csv: Option<&Path>,
) -> Result<(f64, Vec<CorrelationPoint>)> {
    let file = std::fs::File::open(results_csv)?;
    let records = read_results_csv(std::io::BufReader::new(file))?;
    let (r, points) = correlate_flip_adaptacc(&records, column)?;
    if let Some(path) = out_csv {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut buf = Vec::new();
        writeln!(buf, "{CORRELATION_CSV_HEADER}")?;
        for p in &points {
            writeln!(buf, "{},{},{:.6},{:.4}", p.model, p.mode, p.flip, p.adapt_acc)?;
        }
        std::fs::write(path, buf)?;
    }
    Ok((r, points))
}

/// Pretrain one model from the config's data and write its checkpoint.
pub fn cmd_pretrain(
    config: &ExperimentConfig,
    kind: GateKind,
    out_dir: &Path,
) -> Result<(PathBuf, f64)> {
    config.validate()?;
    let seed = config.seeds[0];
    let clean = config.build_dataset(seed)?;
    let proto = config.protocol_config(seed);
    let spec = crate::driftlab::default_gate_spec(kind, &proto)?;
    let arch = if kind.is_moe() {
        Arch::moe(clean.dim(), proto.d_hidden, clean.n_classes, proto.expert_count)
    } else {
        Arch::mlp(clean.dim(), proto.d_hidden, clean.n_classes)
    };
    let init_seed = RngStream::new(seed).fork(0x12e7).seed();
    let init = ModelParams::init(arch, &spec, init_seed)?;
    let parts = split_dataset(&clean, seed);
    let train_ds = clean.select(&parts.pretrain, "pretrain");
    let eval_ds = clean.select(&parts.clean_eval, "clean-eval");
    let trained = pretrain(
        &init,
        &spec,
        &train_ds,
        proto.pretrain_epochs,
        proto.pretrain_eta,
        proto.pretrain_lambda,
        init_seed ^ 0xbeef,
    )?;
    let spec0 = adapt::spec_at_step(&spec, 0)?;
    let accuracy = evaluate(&trained, &spec0, &eval_ds)?.accuracy;
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join(format!("{}.ckpt", kind.name()));
    trained.save_to_path(&path)?;
    Ok((path, accuracy))
}

// ---------------------------------------------------------------------------
// Stress harness
// ---------------------------------------------------------------------------

/// Stress-run shape: N serve threads against one training loop that
/// publishes every K steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StressOptions {
    pub serve_threads: usize,
    pub requests_per_thread: usize,
    pub train_steps: usize,
    pub publish_every: usize,
    pub seed: u64,
    pub mode: AdaptationMode,
    pub out_dir: Option<PathBuf>,
}

impl Default for StressOptions {
    fn default() -> Self {
        Self {
            serve_threads: 8,
            requests_per_thread: 1500,
            train_steps: 5000,
            publish_every: 50,
            seed: 0,
            mode: AdaptationMode::DThetaAndWInactive,
            out_dir: None,
        }
    }
}

/// Fixed stress model: the default gated architecture.
const STRESS_N_IN: usize = 784;
const STRESS_D_HIDDEN: usize = 256;
const STRESS_N_CLASSES: usize = 10;

/// Written alongside the audit log so a separate process can rebuild the
/// model template and regenerate every request input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StressManifest {
    pub seed: u64,
    pub serve_threads: usize,
    pub requests_per_thread: usize,
    pub train_steps: usize,
    pub publish_every: usize,
    pub mode: AdaptationMode,
    pub spec: GateSpec,
    pub arch: Arch,
}

#[derive(Debug, Clone)]
pub struct StressReport {
    pub total_requests: usize,
    pub replay_passed: usize,
    pub replay_failures: Vec<u64>,
    pub publications: usize,
    pub out_dir: Option<PathBuf>,
}

fn stress_input(rng: &mut RngStream, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.next_f64()).collect()
}

/// Request input for `(seed, thread, iteration)`; replay regenerates the
/// exact same vector.
fn request_input(seed: u64, thread: u64, iteration: u64, dim: usize) -> Vec<f64> {
    let mut rng = RngStream::new(seed).fork(0x7ead ^ thread).fork(iteration);
    stress_input(&mut rng, dim)
}

fn training_sample(seed: u64, step: u64, dim: usize, n_classes: usize) -> (Vec<f64>, usize) {
    let mut rng = RngStream::new(seed).fork(0x77a1).fork(step);
    let x = stress_input(&mut rng, dim);
    let y = rng.below(n_classes);
    (x, y)
}

/// Run concurrent serving against a publishing training loop, then replay
/// every audit record in-process. With an output directory the audit log,
/// the request map, the snapshot archive, and a manifest are persisted for
/// the offline `replay` command.
pub fn cmd_stress(opts: &StressOptions) -> Result<StressReport> {
    if opts.serve_threads == 0 || opts.requests_per_thread == 0 {
        return Err(Error::Config("stress needs at least one serve thread and request".into()));
    }
    if opts.publish_every == 0 {
        return Err(Error::Config("publish_every must be positive".into()));
    }
    let spec = GateSpec::dg_hard(0.0);
    let arch = Arch::mlp(STRESS_N_IN, STRESS_D_HIDDEN, STRESS_N_CLASSES);
    let params = ModelParams::init(arch, &spec, opts.seed)?;
    let engine = Arc::new(ServeEngine::new(params, spec));
    engine.publish_snapshot();

    // Serve threads record which (thread, iteration) produced each request
    // id so inputs can be regenerated later.
    let mut handles = Vec::new();
    for t in 0..opts.serve_threads as u64 {
        let engine = engine.clone();
        let seed = opts.seed;
        let n = opts.requests_per_thread as u64;
        handles.push(std::thread::spawn(move || -> Result<Vec<(u64, u64, u64)>> {
            let mut map = Vec::with_capacity(n as usize);
            for i in 0..n {
                let x = request_input(seed, t, i, STRESS_N_IN);
                let (_, _, record) = engine.serve(&x)?;
                map.push((record.request_id, t, i));
            }
            Ok(map)
        }));
    }

    let trainer = {
        let engine = engine.clone();
        let seed = opts.seed;
        let steps = opts.train_steps;
        let every = opts.publish_every;
        let mode = opts.mode;
        std::thread::spawn(move || -> Result<usize> {
            let cfg = AdaptConfig::default();
            let mut publications = 0usize;
            for step in 0..steps {
                let batch = vec![training_sample(seed, step as u64, STRESS_N_IN, STRESS_N_CLASSES)];
                engine.train_step(&batch, mode, &cfg)?;
                if (step + 1) % every == 0 {
                    engine.publish_snapshot();
                    publications += 1;
                }
            }
            Ok(publications)
        })
    };

    let mut request_map: Vec<(u64, u64, u64)> = Vec::new();
    for handle in handles {
        let map = handle.join().expect("serve thread panicked")?;
        request_map.extend(map);
    }
    let publications = trainer.join().expect("training thread panicked")?;
    request_map.sort_unstable_by_key(|&(id, _, _)| id);

    // In-process replay of every record.
    let records = engine.audit_records();
    let mut failures = Vec::new();
    for record in &records {
        let &(_, t, i) = &request_map[record.request_id as usize];
        let x = request_input(opts.seed, t, i, STRESS_N_IN);
        if audit_replay(record, engine.archive(), &x, engine.spec()).is_err() {
            failures.push(record.request_id);
        }
    }

    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
        let mut audit_buf = Vec::new();
        write_audit_log(&records, &mut audit_buf)?;
        std::fs::write(dir.join("audit.log"), audit_buf)?;

        let mut req_buf = Vec::new();
        for (id, t, i) in &request_map {
            writeln!(req_buf, "{id},{t},{i}")?;
        }
        std::fs::write(dir.join("requests.csv"), req_buf)?;

        engine.archive().spill_to_dir(dir.join("snapshots"))?;
        let manifest = StressManifest {
            seed: opts.seed,
            serve_threads: opts.serve_threads,
            requests_per_thread: opts.requests_per_thread,
            train_steps: opts.train_steps,
            publish_every: opts.publish_every,
            mode: opts.mode,
            spec: *engine.spec(),
            arch,
        };
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
        )?;
    }

    Ok(StressReport {
        total_requests: records.len(),
        replay_passed: records.len() - failures.len(),
        replay_failures: failures,
        publications,
        out_dir: opts.out_dir.clone(),
    })
}

#[derive(Debug, Clone)]
pub struct ReplayReport {
    pub total: usize,
    pub passed: usize,
    pub failures: Vec<u64>,
}

/// Offline verification of a persisted stress run: reload the snapshot
/// archive, regenerate every request input from the manifest seed, and
/// replay each audit record.
pub fn cmd_replay(dir: &Path) -> Result<ReplayReport> {
    let manifest: StressManifest = serde_json::from_str(
        &std::fs::read_to_string(dir.join("manifest.json"))?,
    )
    .map_err(|e| Error::Parse {
        offset: 0,
        message: format!("bad manifest: {e}"),
    })?;
    let template = ModelParams::init(manifest.arch, &manifest.spec, manifest.seed)?;
    let archive = SnapshotArchive::load_from_dir(dir.join("snapshots"), &template)?;
    let audit_file = std::fs::File::open(dir.join("audit.log"))?;
    let records = read_audit_log(std::io::BufReader::new(audit_file))?;

    let mut request_map = Vec::new();
    let req_file = std::fs::File::open(dir.join("requests.csv"))?;
    for (lineno, line) in std::io::BufReader::new(req_file).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Parse {
                offset: lineno as u64,
                message: "request map rows are request_id,thread,iteration".into(),
            });
        }
        let parse = |s: &str| -> Result<u64> {
            s.parse().map_err(|_| Error::Parse {
                offset: lineno as u64,
                message: format!("bad integer `{s}`"),
            })
        };
        request_map.push((parse(parts[0])?, parse(parts[1])?, parse(parts[2])?));
    }
    request_map.sort_unstable_by_key(|&(id, _, _)| id);

    let mut failures = Vec::new();
    for record in &records {
        let found = request_map
            .binary_search_by_key(&record.request_id, |&(id, _, _)| id)
            .ok()
            .map(|idx| request_map[idx]);
        let Some((_, t, i)) = found else {
            failures.push(record.request_id);
            continue;
        };
        let x = request_input(manifest.seed, t, i, manifest.arch.n_in);
        if audit_replay(record, &archive, &x, &manifest.spec).is_err() {
            failures.push(record.request_id);
        }
    }
    Ok(ReplayReport {
        total: records.len(),
        passed: records.len() - failures.len(),
        failures,
    })
}

/// Verify one audit record against an engine archive; used by tests that
/// inject tampered lines.
pub fn replay_single(
    record: &AuditRecord,
    archive: &SnapshotArchive,
    x: &[f64],
    spec: &GateSpec,
) -> Result<()> {
    audit_replay(record, archive, x, spec)
}
