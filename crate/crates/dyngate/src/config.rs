//! Experiment configuration: a JSON manifest plus dotted-path overrides.

use crate::adapt::{AdaptConfig, AdaptationMode};
use crate::driftlab::{gen_synthetic, load_idx, Dataset, DriftSpec, ProtocolConfig};
use crate::gatenet::GateKind;
use crate::mathcore::RngStream;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Where the benchmark data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataConfig {
    Synthetic {
        n_classes: usize,
        dim: usize,
        per_class: usize,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            n_classes: 10,
            dim: 784,
            per_class: 200,
        }
    }
}

/// Protocol knobs that are not per-step adaptation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolSettings {
    pub d_hidden: usize,
    pub expert_count: usize,
    pub pretrain_epochs: usize,
    pub pretrain_eta: f64,
    pub pretrain_lambda: f64,
    pub probe_size: usize,
    pub parallel: bool,
}

impl Default for ProtocolSettings {
    fn default() -> Self {
        let d = ProtocolConfig::default();
        Self {
            d_hidden: d.d_hidden,
            expert_count: d.expert_count,
            pretrain_epochs: d.pretrain_epochs,
            pretrain_eta: d.pretrain_eta,
            pretrain_lambda: d.pretrain_lambda,
            probe_size: d.probe_size,
            parallel: d.parallel,
        }
    }
}

/// One experiment manifest. All randomness flows from `seeds` and the drift
/// seed; nothing reads the clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub models: Vec<GateKind>,
    pub modes: Vec<AdaptationMode>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub drift: DriftSpec,
    #[serde(default)]
    pub adapt: AdaptConfig,
    #[serde(default)]
    pub protocol: ProtocolSettings,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            models: GateKind::ALL.to_vec(),
            modes: AdaptationMode::GRID.to_vec(),
            data: DataConfig::default(),
            drift: DriftSpec::default(),
            adapt: AdaptConfig::default(),
            protocol: ProtocolSettings::default(),
            seeds: vec![0],
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(json).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file<P: AsRef<Path>>(path: P) -> Result<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| {
            Error::Config(format!("cannot read {}: {e}", path.as_ref().display()))
        })?;
        Self::from_json(&text)
    }

    /// Parse a config file applying `key=value` overrides before
    /// deserialization. Keys are dotted JSON paths (`drift.severity=1.2`);
    /// values parse as JSON when possible and fall back to strings.
    pub fn from_file_with_overrides<P: AsRef<Path>>(path: P, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| {
            Error::Config(format!("cannot read {}: {e}", path.as_ref().display()))
        })?;
        let mut value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad config: {e}")))?;
        for entry in overrides {
            apply_override(&mut value, entry)?;
        }
        let cfg: ExperimentConfig = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("bad config after overrides: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::Config("empty model list".into()));
        }
        if self.modes.is_empty() {
            return Err(Error::Config("empty mode list".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("empty seed list".into()));
        }
        if self.drift.severity < 0.0 {
            return Err(Error::Config("drift severity must be >= 0".into()));
        }
        self.adapt.validate()?;
        match &self.data {
            DataConfig::Synthetic {
                n_classes,
                dim,
                per_class,
            } => {
                if *n_classes < 2 || *dim == 0 || *per_class == 0 {
                    return Err(Error::Config("synthetic data needs n_classes >= 2 and nonzero dim/per_class".into()));
                }
            }
            DataConfig::Idx { .. } => {}
        }
        Ok(())
    }

    /// Clean dataset for one run seed.
    pub fn build_dataset(&self, run_seed: u64) -> Result<Dataset> {
        match &self.data {
            DataConfig::Synthetic {
                n_classes,
                dim,
                per_class,
            } => {
                let seed = RngStream::new(run_seed).fork(0xda7a).seed();
                Ok(gen_synthetic(*n_classes, *dim, *per_class, seed))
            }
            DataConfig::Idx { images, labels } => load_idx(images, labels),
        }
    }

    /// Flip probe for one run seed. Synthetic data gets a freshly generated
    /// held-out probe of `probe_size` samples; file-backed data returns
    /// `None` and the protocol slices its drifted eval split instead.
    pub fn build_probe(&self, run_seed: u64) -> Option<Dataset> {
        match &self.data {
            DataConfig::Synthetic { n_classes, dim, .. } => {
                let seed = RngStream::new(run_seed).fork(0x9b0e).seed();
                let per_class = self.protocol.probe_size.div_ceil(*n_classes).max(1);
                let mut probe = gen_synthetic(*n_classes, *dim, per_class, seed);
                probe.inputs.truncate(self.protocol.probe_size);
                probe.labels.truncate(self.protocol.probe_size);
                Some(probe)
            }
            DataConfig::Idx { .. } => None,
        }
    }

    /// Drift transform for one run seed: the configured spec with its seed
    /// mixed against the run seed.
    pub fn build_drift(&self, run_seed: u64) -> DriftSpec {
        DriftSpec {
            seed: RngStream::new(run_seed).fork(self.drift.seed ^ 0xd12f).seed(),
            ..self.drift
        }
    }

    /// Full protocol bundle for one run seed.
    pub fn protocol_config(&self, run_seed: u64) -> ProtocolConfig {
        ProtocolConfig {
            seed: run_seed,
            adapt: self.adapt,
            d_hidden: self.protocol.d_hidden,
            expert_count: self.protocol.expert_count,
            pretrain_epochs: self.protocol.pretrain_epochs,
            pretrain_eta: self.protocol.pretrain_eta,
            pretrain_lambda: self.protocol.pretrain_lambda,
            probe_size: self.protocol.probe_size,
            parallel: self.protocol.parallel,
        }
    }
}

fn apply_override(value: &mut serde_json::Value, entry: &str) -> Result<()> {
    let (path, raw) = entry.split_once('=').ok_or_else(|| {
        Error::Config(format!("override `{entry}` is not of the form key=value"))
    })?;
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = value;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::Config(format!("override path `{path}` does not address an object"))
        })?;
        if last {
            obj.insert((*seg).to_string(), parsed);
            return Ok(());
        }
        node = obj
            .entry((*seg).to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let cfg = ExperimentConfig::default();
        let json = cfg.to_json_pretty();
        let back = ExperimentConfig::from_json(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn rejects_unknown_model_name() {
        let json = r#"{
            "models": ["dense", "dg_mystery"],
            "modes": ["A_none"],
            "seeds": [0],
            "output_dir": "out"
        }"#;
        assert!(matches!(
            ExperimentConfig::from_json(json),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rejects_empty_mode_list() {
        let json = r#"{
            "models": ["dense"],
            "modes": [],
            "seeds": [0],
            "output_dir": "out"
        }"#;
        assert!(matches!(
            ExperimentConfig::from_json(json),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn overrides_rewrite_nested_keys() {
        let dir = std::env::temp_dir().join(format!("dyngate-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("config.json");
        std::fs::write(&path, ExperimentConfig::default().to_json_pretty()).unwrap();
        let cfg = ExperimentConfig::from_file_with_overrides(
            &path,
            &[
                "drift.severity=1.25".to_string(),
                "adapt.steps=77".to_string(),
                r#"models=["dg_soft"]"#.to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.drift.severity, 1.25);
        assert_eq!(cfg.adapt.steps, 77);
        assert_eq!(cfg.models, vec![GateKind::DgSoft]);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn synthetic_probe_has_requested_size() {
        let cfg = ExperimentConfig::default();
        let probe = cfg.build_probe(3).unwrap();
        assert_eq!(probe.len(), cfg.protocol.probe_size);
        // Held out: same seed gives the same probe, different from the data.
        let again = cfg.build_probe(3).unwrap();
        assert_eq!(probe, again);
    }

    #[test]
    fn dataset_build_is_seed_deterministic() {
        let cfg = ExperimentConfig {
            data: DataConfig::Synthetic {
                n_classes: 3,
                dim: 6,
                per_class: 5,
            },
            ..ExperimentConfig::default()
        };
        assert_eq!(cfg.build_dataset(1).unwrap(), cfg.build_dataset(1).unwrap());
        assert_ne!(cfg.build_dataset(1).unwrap(), cfg.build_dataset(2).unwrap());
    }
}
