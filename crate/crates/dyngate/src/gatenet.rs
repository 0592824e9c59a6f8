//! Model zoo: dense MLP baseline and the five gated variants.
//!
//! All models share the two-layer shape `input -> hidden -> classes`. Gated
//! variants insert an input-dependent mask after the hidden layer: DG kinds
//! mask hidden units through a self-gate (`d_hidden -> d_hidden`), MoE kinds
//! route through per-expert heads (`d_hidden -> expert_count`). The gate and
//! router weights are the routing parameters `theta`; everything else is the
//! representation `W`.
//!
//! Forward passes are pure; parameters mutate only by constructing a
//! successor version. Inactive units are skipped in the accumulation, never
//! multiplied by zero, so perturbing an inactive unit's outgoing weights
//! cannot change the output bits.

use crate::mathcore::{self, fnv1a64_f64, matvec, relu, sigmoid, softmax, Matrix, RngStream};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

/// Active-set threshold used for activation-ratio accounting of soft masks.
pub const DEFAULT_ACTIVE_TAU: f64 = 1e-3;

/// Model kinds of the benchmark grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    Dense,
    DgHard,
    DgSoft,
    DgAnneal,
    MoeTop1,
    MoeSoft,
}

impl GateKind {
    pub const ALL: [GateKind; 6] = [
        GateKind::Dense,
        GateKind::DgHard,
        GateKind::DgSoft,
        GateKind::DgAnneal,
        GateKind::MoeTop1,
        GateKind::MoeSoft,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GateKind::Dense => "dense",
            GateKind::DgHard => "dg_hard",
            GateKind::DgSoft => "dg_soft",
            GateKind::DgAnneal => "dg_anneal",
            GateKind::MoeTop1 => "moe_top1",
            GateKind::MoeSoft => "moe_soft",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        GateKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model kind `{s}`")))
    }

    pub fn is_moe(self) -> bool {
        matches!(self, GateKind::MoeTop1 | GateKind::MoeSoft)
    }

    /// Kinds whose mask is exactly {0,1} and whose gate is therefore not
    /// differentiable without a surrogate.
    pub fn is_hard(self) -> bool {
        matches!(self, GateKind::DgHard | GateKind::MoeTop1)
    }

    pub fn is_gated(self) -> bool {
        self != GateKind::Dense
    }
}

impl fmt::Display for GateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Linear temperature schedule for `dg_anneal`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub t_start: f64,
    pub t_end: f64,
    pub steps: u64,
}

/// Gating configuration for one model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateSpec {
    pub kind: GateKind,
    /// Sigmoid temperature for `dg_soft`; current temperature for
    /// `dg_anneal` (see [`anneal_step`]).
    pub temperature: f64,
    pub anneal: Option<AnnealSchedule>,
    /// Logit cutoff for `dg_hard`.
    pub hard_threshold: f64,
    /// Expert count for MoE kinds.
    pub expert_count: usize,
}

impl GateSpec {
    pub fn dense() -> Self {
        Self {
            kind: GateKind::Dense,
            temperature: 1.0,
            anneal: None,
            hard_threshold: 0.0,
            expert_count: 0,
        }
    }

    pub fn dg_hard(threshold: f64) -> Self {
        Self {
            kind: GateKind::DgHard,
            hard_threshold: threshold,
            ..Self::dense()
        }
    }

    pub fn dg_soft(temperature: f64) -> Result<Self> {
        let spec = Self {
            kind: GateKind::DgSoft,
            temperature,
            ..Self::dense()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn dg_anneal(t_start: f64, t_end: f64, steps: u64) -> Result<Self> {
        let spec = Self {
            kind: GateKind::DgAnneal,
            temperature: t_start,
            anneal: Some(AnnealSchedule { t_start, t_end, steps }),
            ..Self::dense()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn moe_top1(expert_count: usize) -> Result<Self> {
        let spec = Self {
            kind: GateKind::MoeTop1,
            expert_count,
            ..Self::dense()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn moe_soft(expert_count: usize) -> Result<Self> {
        let spec = Self {
            kind: GateKind::MoeSoft,
            expert_count,
            ..Self::dense()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if let Some(a) = &self.anneal {
            if a.t_start <= 0.0 || a.t_end <= 0.0 || a.t_end > a.t_start {
                return Err(Error::Config(format!(
                    "anneal schedule requires 0 < t_end <= t_start, got {} -> {}",
                    a.t_start, a.t_end
                )));
            }
        }
        if self.kind.is_moe() && self.expert_count < 2 {
            return Err(Error::Config(format!(
                "MoE kinds need at least 2 experts, got {}",
                self.expert_count
            )));
        }
        Ok(())
    }
}

/// Temperature for `dg_anneal` at a given adaptation step: linear from
/// `t_start` to `t_end` over `steps`, then constant.
pub fn anneal_step(spec: &GateSpec, step: u64) -> Result<GateSpec> {
    if spec.kind != GateKind::DgAnneal {
        return Err(Error::Unsupported(format!(
            "anneal_step on kind `{}`",
            spec.kind
        )));
    }
    let a = spec
        .anneal
        .ok_or_else(|| Error::Config("dg_anneal without a schedule".into()))?;
    let frac = if a.steps == 0 {
        1.0
    } else {
        (step as f64 / a.steps as f64).min(1.0)
    };
    Ok(GateSpec {
        temperature: a.t_start + (a.t_end - a.t_start) * frac,
        ..*spec
    })
}

/// Layer shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub n_in: usize,
    pub d_hidden: usize,
    pub n_classes: usize,
    /// 0 for non-MoE models.
    pub expert_count: usize,
}

impl Arch {
    pub fn mlp(n_in: usize, d_hidden: usize, n_classes: usize) -> Self {
        Self {
            n_in,
            d_hidden,
            n_classes,
            expert_count: 0,
        }
    }

    pub fn moe(n_in: usize, d_hidden: usize, n_classes: usize, expert_count: usize) -> Self {
        Self {
            n_in,
            d_hidden,
            n_classes,
            expert_count,
        }
    }

    /// Width of the gated stage: hidden units for DG kinds, experts for MoE.
    pub fn gated_width(&self) -> usize {
        if self.expert_count > 0 {
            self.expert_count
        } else {
            self.d_hidden
        }
    }
}

/// One affine stage `y = Wx + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl Affine {
    pub fn glorot(rows: usize, cols: usize, rng: &mut RngStream) -> Self {
        Self {
            w: Matrix::glorot_uniform(rows, cols, rng),
            b: vec![0.0; rows],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = matvec(&self.w, x)?;
        for (yi, bi) in y.iter_mut().zip(&self.b) {
            *yi += bi;
        }
        Ok(y)
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Output stage: one shared head for dense/DG, one head per expert for MoE.
#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Single(Affine),
    Experts(Vec<Affine>),
}

impl Head {
    pub fn param_count(&self) -> usize {
        match self {
            Head::Single(a) => a.param_count(),
            Head::Experts(es) => es.iter().map(Affine::param_count).sum(),
        }
    }
}

/// Which parameter group an operation touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamScope {
    Theta,
    W,
    Both,
}

/// Full parameter state of one model, versioned.
///
/// `input` and `head` are the representation parameters `W`; `router` holds
/// the routing parameters `theta` (the self-gate for DG kinds, the expert
/// router for MoE kinds, absent for dense). `version` strictly increases on
/// every committed update.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Arch,
    pub input: Affine,
    pub head: Head,
    pub router: Option<Affine>,
    pub version: u64,
}

impl ModelParams {
    /// Seeded initialization matching `spec.kind`.
    pub fn init(arch: Arch, spec: &GateSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        if spec.kind.is_moe() {
            if arch.expert_count != spec.expert_count {
                return Err(Error::Config(format!(
                    "arch has {} experts but spec has {}",
                    arch.expert_count, spec.expert_count
                )));
            }
        } else if arch.expert_count != 0 {
            return Err(Error::Config("non-MoE kind with MoE arch".into()));
        }

        let rng = RngStream::new(seed);
        let input = Affine::glorot(arch.d_hidden, arch.n_in, &mut rng.fork(1));
        let head = if spec.kind.is_moe() {
            let experts = (0..arch.expert_count)
                .map(|e| {
                    Affine::glorot(arch.n_classes, arch.d_hidden, &mut rng.fork(100 + e as u64))
                })
                .collect();
            Head::Experts(experts)
        } else {
            Head::Single(Affine::glorot(arch.n_classes, arch.d_hidden, &mut rng.fork(2)))
        };
        let router = match spec.kind {
            GateKind::Dense => None,
            GateKind::DgHard | GateKind::DgSoft | GateKind::DgAnneal => {
                Some(Affine::glorot(arch.d_hidden, arch.d_hidden, &mut rng.fork(3)))
            }
            GateKind::MoeTop1 | GateKind::MoeSoft => Some(Affine::glorot(
                arch.expert_count,
                arch.d_hidden,
                &mut rng.fork(3),
            )),
        };
        Ok(Self {
            arch,
            input,
            head,
            router,
            version: 0,
        })
    }

    /// Exact scalar count of the scope: `theta` is the gate/router affine,
    /// `w` is everything on the prediction path.
    pub fn count_params(&self, scope: ParamScope) -> usize {
        let theta = self.router.as_ref().map_or(0, Affine::param_count);
        let w = self.input.param_count() + self.head.param_count();
        match scope {
            ParamScope::Theta => theta,
            ParamScope::W => w,
            ParamScope::Both => theta + w,
        }
    }

    /// Tensors in checkpoint order. Biases appear as `1 x n` matrices.
    fn tensor_list(&self) -> Vec<(usize, usize, Vec<f64>)> {
        let mut out = Vec::new();
        fn push_affine(a: &Affine, out: &mut Vec<(usize, usize, Vec<f64>)>) {
            out.push((a.w.rows(), a.w.cols(), a.w.data().to_vec()));
            out.push((1, a.b.len(), a.b.clone()));
        }
        push_affine(&self.input, &mut out);
        match &self.head {
            Head::Single(a) => push_affine(a, &mut out),
            Head::Experts(es) => {
                for e in es {
                    push_affine(e, &mut out);
                }
            }
        }
        if let Some(r) = &self.router {
            push_affine(r, &mut out);
        }
        out
    }

    /// FNV-1a over all tensor contents in checkpoint order. Version and
    /// shapes excluded; two states with identical weights hash identically.
    pub fn content_digest(&self) -> u64 {
        let mut all = Vec::new();
        for (_, _, data) in self.tensor_list() {
            all.extend_from_slice(&data);
        }
        fnv1a64_f64(&all)
    }

    /// Write the flat binary checkpoint: magic `DGMLP1`, little-endian u64
    /// version, then each tensor as `(u32 rows, u32 cols, row-major f64)`.
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"DGMLP1")?;
        w.write_all(&self.version.to_le_bytes())?;
        for (rows, cols, data) in self.tensor_list() {
            w.write_all(&(rows as u32).to_le_bytes())?;
            w.write_all(&(cols as u32).to_le_bytes())?;
            for v in &data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save_to_path<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut buf = std::io::BufWriter::new(f);
        self.save(&mut buf)?;
        buf.flush()?;
        Ok(())
    }

    /// Read a checkpoint written by [`save`](Self::save). `template` supplies
    /// the architecture; tensor shapes must match it exactly.
    pub fn load<R: Read>(mut r: R, template: &ModelParams) -> Result<Self> {
        let mut magic = [0u8; 6];
        read_exact_at(&mut r, &mut magic, 0)?;
        if &magic != b"DGMLP1" {
            return Err(Error::Parse {
                offset: 0,
                message: "bad magic, expected DGMLP1".into(),
            });
        }
        let mut vbuf = [0u8; 8];
        read_exact_at(&mut r, &mut vbuf, 6)?;
        let version = u64::from_le_bytes(vbuf);

        let mut offset: u64 = 14;
        let mut loaded = template.clone();
        loaded.version = version;
        let expected = template.tensor_list();
        let mut tensors = Vec::with_capacity(expected.len());
        for (rows, cols, _) in &expected {
            let mut dims = [0u8; 8];
            read_exact_at(&mut r, &mut dims, offset)?;
            let got_rows = u32::from_le_bytes(dims[0..4].try_into().unwrap()) as usize;
            let got_cols = u32::from_le_bytes(dims[4..8].try_into().unwrap()) as usize;
            if got_rows != *rows || got_cols != *cols {
                return Err(Error::Parse {
                    offset,
                    message: format!(
                        "tensor shape {got_rows}x{got_cols} does not match expected {rows}x{cols}"
                    ),
                });
            }
            offset += 8;
            let count = rows * cols;
            let mut bytes = vec![0u8; count * 8];
            read_exact_at(&mut r, &mut bytes, offset)?;
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset += (count * 8) as u64;
            tensors.push(data);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Parse {
                offset,
                message: "trailing bytes after final tensor".into(),
            });
        }
        loaded.assign_tensors(tensors)?;
        Ok(loaded)
    }

    pub fn load_from_path<P: AsRef<Path>>(path: P, template: &ModelParams) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::load(std::io::BufReader::new(f), template)
    }

    fn assign_tensors(&mut self, tensors: Vec<Vec<f64>>) -> Result<()> {
        let mut it = tensors.into_iter();
        fn take_affine(a: &mut Affine, it: &mut impl Iterator<Item = Vec<f64>>) -> Result<()> {
            let w = it.next().ok_or(Error::Parse {
                offset: 0,
                message: "missing tensor".into(),
            })?;
            a.w = Matrix::new(a.w.rows(), a.w.cols(), w)?;
            a.b = it.next().ok_or(Error::Parse {
                offset: 0,
                message: "missing tensor".into(),
            })?;
            Ok(())
        }
        take_affine(&mut self.input, &mut it)?;
        match &mut self.head {
            Head::Single(a) => take_affine(a, &mut it)?,
            Head::Experts(es) => {
                for e in es.iter_mut() {
                    take_affine(e, &mut it)?;
                }
            }
        }
        if let Some(r) = &mut self.router {
            take_affine(r, &mut it)?;
        }
        Ok(())
    }
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: u64) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Parse {
        offset,
        message: format!("truncated: expected {} more bytes", buf.len()),
    })
}

/// Per-input gate mask, in `[0,1]^d` (exactly `{0,1}^d` for hard kinds).
#[derive(Debug, Clone, PartialEq)]
pub struct GateMask {
    pub values: Vec<f64>,
}

impl GateMask {
    pub fn ones(d: usize) -> Self {
        Self {
            values: vec![1.0; d],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Sorted indices whose mask value exceeds the threshold used.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveSet {
    pub indices: Vec<usize>,
    threshold_bits: u64,
}

impl ActiveSet {
    pub fn threshold_used(&self) -> f64 {
        f64::from_bits(self.threshold_bits)
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// `{ i | mask_i > tau }`, ascending. With hard masks and `tau = 0` this is
/// exactly the set of units the forward pass computed.
pub fn active_set(mask: &GateMask, tau: f64) -> ActiveSet {
    debug_assert!((0.0..1.0).contains(&tau), "tau must be in [0,1)");
    ActiveSet {
        indices: (0..mask.len()).filter(|&i| mask.values[i] > tau).collect(),
        threshold_bits: tau.to_bits(),
    }
}

/// Intermediates kept for gradient reuse.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Hidden activation after the first affine + ReLU (the gate input).
    pub h: Vec<f64>,
    /// Gate/router logits; `None` for dense.
    pub gate_z: Option<Vec<f64>>,
    /// Raw per-expert outputs; `None` where the expert was skipped.
    pub expert_outputs: Vec<Option<Vec<f64>>>,
    /// Active set at [`DEFAULT_ACTIVE_TAU`].
    pub active: ActiveSet,
}

/// Result of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Vec<f64>,
    pub mask: GateMask,
    pub trace: ForwardTrace,
}

impl Forward {
    /// Argmax class; ties go to the lowest index.
    pub fn prediction(&self) -> usize {
        mathcore::argmax(&self.logits)
    }
}

/// Mask for the hidden activation `h`. Dense is rejected; use
/// [`masked_forward`], which treats it as all-ones.
pub fn gate_forward(h: &[f64], params: &ModelParams, spec: &GateSpec) -> Result<GateMask> {
    let router = match (&params.router, spec.kind) {
        (_, GateKind::Dense) => {
            return Err(Error::Unsupported("gate_forward on dense model".into()))
        }
        (Some(r), _) => r,
        (None, _) => return Err(Error::Config("gated kind without router params".into())),
    };
    let z = router.apply(h)?;
    mask_from_logits(&z, spec)
}

/// Kind-specific mask transform of the gate logits.
pub fn mask_from_logits(z: &[f64], spec: &GateSpec) -> Result<GateMask> {
    let values = match spec.kind {
        GateKind::Dense => return Err(Error::Unsupported("no mask for dense".into())),
        GateKind::DgHard => z
            .iter()
            .map(|&zi| if zi > spec.hard_threshold { 1.0 } else { 0.0 })
            .collect(),
        GateKind::DgSoft | GateKind::DgAnneal => {
            z.iter().map(|&zi| sigmoid(zi / spec.temperature)).collect()
        }
        GateKind::MoeSoft => softmax(z)?,
        GateKind::MoeTop1 => {
            let top = mathcore::argmax(z);
            let mut m = vec![0.0; z.len()];
            m[top] = 1.0;
            m
        }
    };
    Ok(GateMask { values })
}

/// Full forward pass: mask the hidden stage, then apply the output stage to
/// the surviving units only.
pub fn masked_forward(x: &[f64], params: &ModelParams, spec: &GateSpec) -> Result<Forward> {
    if x.len() != params.arch.n_in {
        return Err(Error::DimensionMismatch {
            context: "masked_forward",
            expected: params.arch.n_in,
            actual: x.len(),
        });
    }
    let h: Vec<f64> = params.input.apply(x)?.into_iter().map(relu).collect();

    let (mask, gate_z) = match spec.kind {
        GateKind::Dense => (GateMask::ones(params.arch.d_hidden), None),
        _ => {
            let router = params
                .router
                .as_ref()
                .ok_or_else(|| Error::Config("gated kind without router params".into()))?;
            let z = router.apply(&h)?;
            (mask_from_logits(&z, spec)?, Some(z))
        }
    };

    let (logits, expert_outputs) = match &params.head {
        Head::Single(out) => {
            let mut logits = Vec::with_capacity(params.arch.n_classes);
            for j in 0..out.w.rows() {
                let row = out.w.row(j);
                let mut acc = 0.0;
                for (i, &m) in mask.values.iter().enumerate() {
                    if m != 0.0 {
                        acc += row[i] * (h[i] * m);
                    }
                }
                logits.push(acc + out.b[j]);
            }
            (logits, Vec::new())
        }
        Head::Experts(experts) => {
            if mask.len() != experts.len() {
                return Err(Error::DimensionMismatch {
                    context: "expert mask",
                    expected: experts.len(),
                    actual: mask.len(),
                });
            }
            let mut logits = vec![0.0; params.arch.n_classes];
            let mut outputs: Vec<Option<Vec<f64>>> = vec![None; experts.len()];
            for (e, expert) in experts.iter().enumerate() {
                let m = mask.values[e];
                if m == 0.0 {
                    continue;
                }
                let u = expert.apply(&h)?;
                for (lj, uj) in logits.iter_mut().zip(&u) {
                    *lj += m * uj;
                }
                outputs[e] = Some(u);
            }
            (logits, outputs)
        }
    };

    let active = active_set(&mask, DEFAULT_ACTIVE_TAU);
    Ok(Forward {
        logits,
        mask: mask.clone(),
        trace: ForwardTrace {
            h,
            gate_z,
            expert_outputs,
            active,
        },
    })
}
