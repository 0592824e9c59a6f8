//! Concurrent serving and training over one model: training mutates a
//! private parameter copy, serving reads immutable published snapshots.
//!
//! Publication atomically replaces the current-snapshot reference; a request
//! pins the snapshot it starts with for its whole duration, so no request
//! ever sees a mixture of two parameter states. Every served output is
//! appended to an audit log holding enough digests to re-derive it from the
//! snapshot archive, which is what `audit_replay` does.
//!
//! Contract: one writer (the training loop), many concurrent readers.

use crate::adapt::{infer_then_update, AdaptConfig, AdaptationMode};
use crate::gatenet::{masked_forward, GateSpec, ModelParams};
use crate::mathcore::fnv1a64_f64;
use crate::{Error, Result};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

/// Immutable, versioned parameter copy published to serving.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub params: ModelParams,
    /// Publication sequence number; strictly increasing.
    pub version: u64,
    /// Nanoseconds since the engine started; 0 for archives loaded from disk.
    pub published_at_nanos: u64,
    /// Content digest of the tensors at publication time.
    pub checksum: u64,
}

/// One served request, with digests sufficient for bit-exact replay.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditRecord {
    pub request_id: u64,
    pub input_digest: u64,
    pub snapshot_version: u64,
    pub prediction: usize,
    pub logits_digest: u64,
}

impl AuditRecord {
    /// `request_id,version,input_digest_hex,prediction,logits_digest_hex`
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{:016x},{},{:016x}",
            self.request_id,
            self.snapshot_version,
            self.input_digest,
            self.prediction,
            self.logits_digest
        )
    }

    pub fn from_line(line: &str, lineno: u64) -> Result<Self> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                offset: lineno,
                message: format!("expected 5 audit fields, got {}", fields.len()),
            });
        }
        let parse_u64 = |s: &str| -> Result<u64> {
            s.parse().map_err(|_| Error::Parse {
                offset: lineno,
                message: format!("bad integer `{s}`"),
            })
        };
        let parse_hex = |s: &str| -> Result<u64> {
            u64::from_str_radix(s, 16).map_err(|_| Error::Parse {
                offset: lineno,
                message: format!("bad hex digest `{s}`"),
            })
        };
        Ok(Self {
            request_id: parse_u64(fields[0])?,
            snapshot_version: parse_u64(fields[1])?,
            input_digest: parse_hex(fields[2])?,
            prediction: parse_u64(fields[3])? as usize,
            logits_digest: parse_hex(fields[4])?,
        })
    }
}

pub fn write_audit_log<W: Write>(records: &[AuditRecord], mut w: W) -> Result<()> {
    for rec in records {
        writeln!(w, "{}", rec.to_line())?;
    }
    Ok(())
}

pub fn read_audit_log<R: BufRead>(r: R) -> Result<Vec<AuditRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        out.push(AuditRecord::from_line(&line, i as u64)?);
    }
    Ok(out)
}

/// All snapshots ever published, keyed by version.
#[derive(Debug, Default)]
pub struct SnapshotArchive {
    inner: Mutex<BTreeMap<u64, Arc<Snapshot>>>,
}

impl SnapshotArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, snapshot: Arc<Snapshot>) {
        self.inner
            .lock()
            .expect("archive lock")
            .insert(snapshot.version, snapshot);
    }

    pub fn get(&self, version: u64) -> Option<Arc<Snapshot>> {
        self.inner.lock().expect("archive lock").get(&version).cloned()
    }

    pub fn versions(&self) -> Vec<u64> {
        self.inner.lock().expect("archive lock").keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("archive lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Spill every snapshot to `snapshot_<version>.ckpt` files in `dir`.
    /// Timestamps are not persisted.
    pub fn spill_to_dir<P: AsRef<Path>>(&self, dir: P) -> Result<()> {
        std::fs::create_dir_all(&dir)?;
        for (version, snapshot) in self.inner.lock().expect("archive lock").iter() {
            let path = dir.as_ref().join(format!("snapshot_{version}.ckpt"));
            snapshot.params.save_to_path(path)?;
        }
        Ok(())
    }

    /// Load an archive spilled by [`spill_to_dir`](Self::spill_to_dir).
    pub fn load_from_dir<P: AsRef<Path>>(dir: P, template: &ModelParams) -> Result<Self> {
        let archive = Self::new();
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            let Some(version_str) = name
                .strip_prefix("snapshot_")
                .and_then(|r| r.strip_suffix(".ckpt"))
            else {
                continue;
            };
            let version: u64 = version_str.parse().map_err(|_| Error::Parse {
                offset: 0,
                message: format!("bad snapshot file name `{name}`"),
            })?;
            let params = ModelParams::load_from_path(&path, template)?;
            let checksum = params.content_digest();
            archive.insert(Arc::new(Snapshot {
                params,
                version,
                published_at_nanos: 0,
                checksum,
            }));
        }
        Ok(archive)
    }
}

/// Serving/training engine for one model.
pub struct ServeEngine {
    spec: GateSpec,
    /// Latest published snapshot; readers clone the Arc and keep computing
    /// on it even if a publish lands mid-request.
    current: RwLock<Option<Arc<Snapshot>>>,
    archive: Arc<SnapshotArchive>,
    training: Mutex<ModelParams>,
    /// Append-only; request ids are assigned under the same lock, so log
    /// order and id order coincide.
    audit: Mutex<Vec<AuditRecord>>,
    next_publication: Mutex<u64>,
    started: Instant,
}

impl ServeEngine {
    /// The training copy starts from `params`; nothing is published yet.
    pub fn new(params: ModelParams, spec: GateSpec) -> Self {
        Self {
            spec,
            current: RwLock::new(None),
            archive: Arc::new(SnapshotArchive::new()),
            training: Mutex::new(params),
            audit: Mutex::new(Vec::new()),
            next_publication: Mutex::new(0),
            started: Instant::now(),
        }
    }

    pub fn spec(&self) -> &GateSpec {
        &self.spec
    }

    pub fn archive(&self) -> &SnapshotArchive {
        &self.archive
    }

    /// Deep-copy the training parameters into a new immutable snapshot and
    /// atomically make it the serving state. Old snapshots stay archived.
    pub fn publish_snapshot(&self) -> Arc<Snapshot> {
        // Copy under the training lock, assign the publication number under
        // its own lock so versions are strictly increasing in publish order.
        let params = self.training.lock().expect("training lock").clone();
        let mut next = self.next_publication.lock().expect("publication lock");
        let version = *next;
        *next += 1;
        let snapshot = Arc::new(Snapshot {
            checksum: params.content_digest(),
            params,
            version,
            published_at_nanos: self.started.elapsed().as_nanos() as u64,
        });
        self.archive.insert(snapshot.clone());
        *self.current.write().expect("current lock") = Some(snapshot.clone());
        drop(next);
        snapshot
    }

    /// Latest published snapshot, pinned for as long as the caller holds it.
    pub fn current_snapshot(&self) -> Result<Arc<Snapshot>> {
        self.current
            .read()
            .expect("current lock")
            .clone()
            .ok_or(Error::NoSnapshot)
    }

    /// Forward `x` against exactly one snapshot and append an audit record.
    pub fn serve(&self, x: &[f64]) -> Result<(usize, Vec<f64>, AuditRecord)> {
        let snapshot = self.current_snapshot()?;
        let fwd = masked_forward(x, &snapshot.params, &self.spec)?;
        let prediction = fwd.prediction();
        let record = {
            let mut audit = self.audit.lock().expect("audit lock");
            let record = AuditRecord {
                request_id: audit.len() as u64,
                input_digest: fnv1a64_f64(x),
                snapshot_version: snapshot.version,
                prediction,
                logits_digest: fnv1a64_f64(&fwd.logits),
            };
            audit.push(record.clone());
            record
        };
        Ok((prediction, fwd.logits, record))
    }

    /// Run mode-scoped updates on the private training copy. Serving is
    /// unaffected until the next publish. Returns the training version.
    pub fn train_step(
        &self,
        batch: &[(Vec<f64>, usize)],
        mode: AdaptationMode,
        cfg: &AdaptConfig,
    ) -> Result<u64> {
        let mut training = self.training.lock().expect("training lock");
        for (x, y) in batch {
            let outcome = infer_then_update(x, *y, &training, mode, cfg, &self.spec)?;
            *training = outcome.next_params;
        }
        Ok(training.version)
    }

    pub fn training_version(&self) -> u64 {
        self.training.lock().expect("training lock").version
    }

    /// Content digest of the private training copy.
    pub fn training_digest(&self) -> u64 {
        self.training.lock().expect("training lock").content_digest()
    }

    pub fn audit_records(&self) -> Vec<AuditRecord> {
        self.audit.lock().expect("audit lock").clone()
    }

    pub fn audit_len(&self) -> usize {
        self.audit.lock().expect("audit lock").len()
    }
}

/// Recompute a served output from its archived snapshot.
///
/// Fails with [`Error::AuditGap`] if the referenced snapshot is missing,
/// and with [`Error::AuditMismatch`] if the input digest, prediction, or
/// logits digest disagree with the record.
pub fn audit_replay(
    record: &AuditRecord,
    archive: &SnapshotArchive,
    x: &[f64],
    spec: &GateSpec,
) -> Result<()> {
    let snapshot = archive
        .get(record.snapshot_version)
        .ok_or(Error::AuditGap(record.snapshot_version))?;
    if fnv1a64_f64(x) != record.input_digest {
        return Err(Error::AuditMismatch {
            request_id: record.request_id,
            detail: "input digest does not match the provided input".into(),
        });
    }
    if snapshot.params.content_digest() != snapshot.checksum {
        return Err(Error::AuditMismatch {
            request_id: record.request_id,
            detail: format!(
                "snapshot {} content differs from its publication checksum",
                snapshot.version
            ),
        });
    }
    let fwd = masked_forward(x, &snapshot.params, spec)?;
    if fwd.prediction() != record.prediction {
        return Err(Error::AuditMismatch {
            request_id: record.request_id,
            detail: format!(
                "prediction {} != recorded {}",
                fwd.prediction(),
                record.prediction
            ),
        });
    }
    if fnv1a64_f64(&fwd.logits) != record.logits_digest {
        return Err(Error::AuditMismatch {
            request_id: record.request_id,
            detail: "logits digest mismatch".into(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gatenet::{Arch, GateKind};
    use crate::mathcore::RngStream;

    fn engine(kind: GateKind, seed: u64) -> ServeEngine {
        let (spec, arch) = match kind {
            GateKind::MoeTop1 => (GateSpec::moe_top1(3).unwrap(), Arch::moe(6, 5, 3, 3)),
            GateKind::DgHard => (GateSpec::dg_hard(0.0), Arch::mlp(6, 5, 3)),
            _ => (GateSpec::dg_soft(1.0).unwrap(), Arch::mlp(6, 5, 3)),
        };
        let params = ModelParams::init(arch, &spec, seed).unwrap();
        ServeEngine::new(params, spec)
    }

    fn input(seed: u64) -> Vec<f64> {
        let mut rng = RngStream::new(seed);
        (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect()
    }

    #[test]
    fn serve_before_publish_is_unavailable() {
        let engine = engine(GateKind::DgSoft, 1);
        assert!(matches!(engine.serve(&input(0)), Err(Error::NoSnapshot)));
    }

    #[test]
    fn serves_pin_the_latest_version() {
        let engine = engine(GateKind::DgSoft, 2);
        let snap = engine.publish_snapshot();
        assert_eq!(snap.version, 0);
        let (_, _, rec1) = engine.serve(&input(1)).unwrap();
        let (_, _, rec2) = engine.serve(&input(2)).unwrap();
        assert_eq!(rec1.snapshot_version, 0);
        assert_eq!(rec2.snapshot_version, 0);
        assert_eq!(rec1.request_id, 0);
        assert_eq!(rec2.request_id, 1);
    }

    #[test]
    fn training_is_isolated_until_publish() {
        let engine = engine(GateKind::DgSoft, 3);
        engine.publish_snapshot();
        let x = input(5);
        let before = engine.serve(&x).unwrap();
        let serving_digest = engine.current_snapshot().unwrap().params.content_digest();
        let batch: Vec<(Vec<f64>, usize)> = (0..20).map(|s| (input(100 + s), (s % 3) as usize)).collect();
        engine
            .train_step(&batch, AdaptationMode::DThetaAndWInactive, &AdaptConfig::default())
            .unwrap();
        // Serving snapshot bits unchanged, output identical.
        assert_eq!(
            engine.current_snapshot().unwrap().params.content_digest(),
            serving_digest
        );
        let after = engine.serve(&x).unwrap();
        assert_eq!(before.1, after.1);
        // Training moved.
        assert_ne!(engine.training_digest(), serving_digest);
    }

    #[test]
    fn mode_a_training_does_not_bump_version() {
        let engine = engine(GateKind::DgSoft, 4);
        let batch = vec![(input(7), 0usize)];
        let v = engine
            .train_step(&batch, AdaptationMode::ANone, &AdaptConfig::default())
            .unwrap();
        assert_eq!(v, 0);
        let v2 = engine
            .train_step(&batch, AdaptationMode::BThetaOnly, &AdaptConfig::default())
            .unwrap();
        assert_eq!(v2, 1);
    }

    #[test]
    fn publish_without_training_preserves_content() {
        let engine = engine(GateKind::DgSoft, 5);
        let a = engine.publish_snapshot();
        let b = engine.publish_snapshot();
        assert_eq!(a.checksum, b.checksum);
        assert_eq!(a.params, b.params);
        assert_eq!(b.version, a.version + 1);
        assert!(b.published_at_nanos >= a.published_at_nanos);
    }

    #[test]
    fn pinned_snapshot_survives_publication() {
        let engine = engine(GateKind::DgSoft, 6);
        engine.publish_snapshot();
        let pin = engine.current_snapshot().unwrap();
        let batch = vec![(input(9), 1usize)];
        engine
            .train_step(&batch, AdaptationMode::BThetaOnly, &AdaptConfig::default())
            .unwrap();
        engine.publish_snapshot();
        assert_eq!(pin.version, 0);
        assert_eq!(engine.current_snapshot().unwrap().version, 1);
        // The pinned state is still fully usable.
        let fwd = masked_forward(&input(9), &pin.params, engine.spec()).unwrap();
        assert_eq!(fwd.logits.len(), 3);
    }

    #[test]
    fn audit_replay_round_trip_and_negative_control() {
        let engine = engine(GateKind::DgHard, 7);
        engine.publish_snapshot();
        let x = input(11);
        let (_, _, record) = engine.serve(&x).unwrap();
        audit_replay(&record, engine.archive(), &x, engine.spec()).unwrap();

        // Tampered version: either a gap or a mismatch, never a pass.
        let mut tampered = record.clone();
        tampered.snapshot_version += 1;
        let err = audit_replay(&tampered, engine.archive(), &x, engine.spec()).unwrap_err();
        assert!(matches!(err, Error::AuditGap(_) | Error::AuditMismatch { .. }));

        // Tampered prediction on a valid version: mismatch.
        let mut wrong = record.clone();
        wrong.prediction = (wrong.prediction + 1) % 3;
        let err = audit_replay(&wrong, engine.archive(), &x, engine.spec()).unwrap_err();
        assert!(matches!(err, Error::AuditMismatch { .. }));

        // Wrong input: mismatch on the input digest.
        let err = audit_replay(&record, engine.archive(), &input(12), engine.spec()).unwrap_err();
        assert!(matches!(err, Error::AuditMismatch { .. }));
    }

    #[test]
    fn audit_log_line_round_trip() {
        let record = AuditRecord {
            request_id: 42,
            input_digest: 0xdead_beef_0123_4567,
            snapshot_version: 7,
            prediction: 3,
            logits_digest: 0x0011_2233_4455_6677,
        };
        let line = record.to_line();
        assert_eq!(line, "42,7,deadbeef01234567,3,0011223344556677");
        let parsed = AuditRecord::from_line(&line, 0).unwrap();
        assert_eq!(parsed, record);
    }

    #[test]
    fn archive_spill_and_reload_replays() {
        let engine = engine(GateKind::DgSoft, 8);
        engine.publish_snapshot();
        let batch = vec![(input(13), 2usize)];
        let mut records = Vec::new();
        let mut inputs = Vec::new();
        for s in 0..5u64 {
            engine
                .train_step(&batch, AdaptationMode::DThetaAndWInactive, &AdaptConfig::default())
                .unwrap();
            engine.publish_snapshot();
            let x = input(50 + s);
            let (_, _, rec) = engine.serve(&x).unwrap();
            records.push(rec);
            inputs.push(x);
        }
        let dir = std::env::temp_dir().join(format!("dyngate-archive-{}", std::process::id()));
        engine.archive().spill_to_dir(&dir).unwrap();
        let template = engine.current_snapshot().unwrap().params.clone();
        let reloaded = SnapshotArchive::load_from_dir(&dir, &template).unwrap();
        assert_eq!(reloaded.len(), engine.archive().len());
        for (rec, x) in records.iter().zip(&inputs) {
            audit_replay(rec, &reloaded, x, engine.spec()).unwrap();
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn concurrent_serves_see_monotone_versions() {
        let engine = Arc::new(engine(GateKind::DgSoft, 9));
        engine.publish_snapshot();

        let mut readers = Vec::new();
        for t in 0..3u64 {
            let engine = engine.clone();
            readers.push(std::thread::spawn(move || {
                let mut last = 0u64;
                for _ in 0..50 {
                    let x = input(1000 + t);
                    let (_, _, rec) = engine.serve(&x).unwrap();
                    assert!(rec.snapshot_version >= last, "version went backwards");
                    last = rec.snapshot_version;
                }
            }));
        }

        let batch: Vec<(Vec<f64>, usize)> =
            (0..4).map(|s| (input(2000 + s), (s % 3) as usize)).collect();
        for _ in 0..20 {
            engine
                .train_step(&batch, AdaptationMode::BThetaOnly, &AdaptConfig::default())
                .unwrap();
            engine.publish_snapshot();
        }
        for reader in readers {
            reader.join().unwrap();
        }
        assert_eq!(engine.audit_len(), 150);
    }
}
