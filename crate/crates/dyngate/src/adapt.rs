//! Online adaptation: serve the prediction from the current parameter state,
//! then commit a scoped update for the next state.
//!
//! The scopes mirror the benchmark's mode grid. `B` touches only the routing
//! parameters, `C` only representation weights of units the input did not
//! activate, `D` is their union, and `X` is the converse of `C`: only the
//! active subspace, the rule whose update provably cannot disturb the output
//! already emitted. `A` changes nothing and commits nothing.
//!
//! Every prediction is computed from the pre-update snapshot; replaying the
//! recorded version therefore reproduces each step's output bit for bit.

use crate::gatenet::{
    active_set, anneal_step, masked_forward, ActiveSet, Affine, GateKind, GateMask, GateSpec,
    Head, ModelParams,
};
use crate::graddiff::{
    backward, residual_unit_backward, standalone_expert_backward, ste_backward,
    unmasked_backward, Grads,
};
use crate::mathcore::{cross_entropy, fnv1a64_f64, softmax};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Update-scope selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AdaptationMode {
    #[serde(rename = "A_none")]
    ANone,
    #[serde(rename = "B_theta_only")]
    BThetaOnly,
    #[serde(rename = "C_w_inactive_only")]
    CWInactiveOnly,
    #[serde(rename = "D_theta_and_w_inactive")]
    DThetaAndWInactive,
    #[serde(rename = "X_w_active_only")]
    XWActiveOnly,
}

impl AdaptationMode {
    pub const ALL: [AdaptationMode; 5] = [
        AdaptationMode::ANone,
        AdaptationMode::BThetaOnly,
        AdaptationMode::CWInactiveOnly,
        AdaptationMode::DThetaAndWInactive,
        AdaptationMode::XWActiveOnly,
    ];

    /// The benchmark's A-D grid, excluding the active-subspace rule.
    pub const GRID: [AdaptationMode; 4] = [
        AdaptationMode::ANone,
        AdaptationMode::BThetaOnly,
        AdaptationMode::CWInactiveOnly,
        AdaptationMode::DThetaAndWInactive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AdaptationMode::ANone => "A_none",
            AdaptationMode::BThetaOnly => "B_theta_only",
            AdaptationMode::CWInactiveOnly => "C_w_inactive_only",
            AdaptationMode::DThetaAndWInactive => "D_theta_and_w_inactive",
            AdaptationMode::XWActiveOnly => "X_w_active_only",
        }
    }

    /// Status vocabulary for a mode-based skip, e.g. `mode=theta_only`.
    pub fn skip_reason(self) -> String {
        let raw = self.name();
        let stripped = &raw[2..]; // drop the "A_" style prefix
        format!("mode={stripped}")
    }

    pub fn parse(s: &str) -> Result<Self> {
        AdaptationMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown adaptation mode `{s}`")))
    }

    pub fn updates_theta(self) -> bool {
        matches!(
            self,
            AdaptationMode::BThetaOnly | AdaptationMode::DThetaAndWInactive
        )
    }

    pub fn updates_w(self) -> bool {
        matches!(
            self,
            AdaptationMode::CWInactiveOnly
                | AdaptationMode::DThetaAndWInactive
                | AdaptationMode::XWActiveOnly
        )
    }
}

impl fmt::Display for AdaptationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Gradient source for updates scoped to units the served forward skipped.
///
/// Through the masked forward those units receive a structurally zero
/// gradient on hard kinds, so an auxiliary pass is needed. `Background`
/// trains each skipped unit for the configuration in which it would later
/// serve: counterfactually re-activated alongside the current ensemble for
/// single-head kinds, standalone for expert heads. `Unmasked` uses one
/// all-ones forward/backward; `Masked` keeps the strict served-path
/// gradient, which is exactly zero on hard kinds. The served output always
/// comes from the masked pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InactiveGradSource {
    #[default]
    Background,
    Unmasked,
    Masked,
}

/// Online update hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    /// Learning rate for the per-sample SGD step.
    pub eta: f64,
    /// Weight of the mean-mask regularizer.
    pub lambda: f64,
    /// Mask threshold below which a unit counts as inactive.
    pub tau_inactive: f64,
    /// Allow surrogate routing gradients for hard kinds in mode B.
    pub ste_enabled: bool,
    /// Stream length the protocol adapts for.
    pub steps: u64,
    #[serde(default)]
    pub inactive_grad: InactiveGradSource,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            eta: 0.01,
            lambda: crate::graddiff::DEFAULT_LAMBDA,
            tau_inactive: 1e-3,
            ste_enabled: false,
            steps: 1000,
            inactive_grad: InactiveGradSource::Unmasked,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta <= 0.0 {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if !(0.0..1.0).contains(&self.tau_inactive) {
            return Err(Error::Config(format!(
                "tau_inactive must be in [0,1), got {}",
                self.tau_inactive
            )));
        }
        Ok(())
    }
}

/// Unit indices a mode's W-update may touch, out of `d` gated units.
pub fn scope_mask(mode: AdaptationMode, active: &ActiveSet, d: usize) -> Vec<usize> {
    match mode {
        AdaptationMode::ANone | AdaptationMode::BThetaOnly => Vec::new(),
        AdaptationMode::CWInactiveOnly | AdaptationMode::DThetaAndWInactive => {
            (0..d).filter(|i| !active.contains(*i)).collect()
        }
        AdaptationMode::XWActiveOnly => active.indices.clone(),
    }
}

/// One served prediction plus the committed successor state.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub prediction: usize,
    pub logits: Vec<f64>,
    /// Regularized loss of the served output.
    pub loss: f64,
    pub mask: GateMask,
    /// Active set at `cfg.tau_inactive`.
    pub active: ActiveSet,
    pub next_params: ModelParams,
}

fn axpy(dst: &mut Affine, g: &Affine, eta: f64) {
    for (w, gw) in dst.w.data_mut().iter_mut().zip(g.w.data()) {
        *w -= eta * gw;
    }
    for (b, gb) in dst.b.iter_mut().zip(&g.b) {
        *b -= eta * gb;
    }
}

/// `theta <- theta - eta * d_theta`.
fn apply_theta(params: &mut ModelParams, grads: &Grads, eta: f64) {
    if let (Some(r), Some(g)) = (params.router.as_mut(), grads.d_router.as_ref()) {
        axpy(r, g, eta);
    }
}

/// Full representation update (used by offline pretraining).
pub(crate) fn apply_w_full(params: &mut ModelParams, grads: &Grads, eta: f64) {
    axpy(&mut params.input, &grads.d_input, eta);
    match (&mut params.head, &grads.d_head) {
        (Head::Single(a), Head::Single(g)) => axpy(a, g, eta),
        (Head::Experts(es), Head::Experts(gs)) => {
            for (a, g) in es.iter_mut().zip(gs) {
                axpy(a, g, eta);
            }
        }
        _ => unreachable!("grads mirror params"),
    }
}

/// Representation update restricted to unit-owned coordinates.
///
/// A DG hidden unit owns its incoming row of the input affine, its input
/// bias entry, and its outgoing column of the output affine; an expert owns
/// its whole affine. Shared coordinates (the output bias for DG kinds, the
/// encoder for MoE kinds) belong to no unit and stay fixed in scoped modes.
fn apply_w_scoped(params: &mut ModelParams, grads: &Grads, eta: f64, units: &[usize]) {
    match (&mut params.head, &grads.d_head) {
        (Head::Single(out), Head::Single(d_out)) => {
            for &i in units {
                let w_row = params.input.w.row_mut(i);
                let g_row = grads.d_input.w.row(i);
                for (w, g) in w_row.iter_mut().zip(g_row) {
                    *w -= eta * g;
                }
                params.input.b[i] -= eta * grads.d_input.b[i];
                for j in 0..out.w.rows() {
                    let v = out.w.get(j, i) - eta * d_out.w.get(j, i);
                    out.w.set(j, i, v);
                }
            }
        }
        (Head::Experts(es), Head::Experts(gs)) => {
            for &e in units {
                axpy(&mut es[e], &gs[e], eta);
            }
        }
        _ => unreachable!("grads mirror params"),
    }
}

fn check_mode_supported(mode: AdaptationMode, spec: &GateSpec, cfg: &AdaptConfig) -> Result<()> {
    if spec.kind == GateKind::Dense && mode != AdaptationMode::ANone {
        return Err(Error::ModeSkip("no trainable params".into()));
    }
    // Mode B needs a routing gradient; hard gates have none without the
    // surrogate. Mode D always runs its theta part through the surrogate.
    if mode == AdaptationMode::BThetaOnly && spec.kind.is_hard() && !cfg.ste_enabled {
        return Err(Error::ModeSkip(mode.skip_reason()));
    }
    Ok(())
}

/// Serve `x` from `params`, then build the successor state for the mode.
///
/// The prediction and loss come from the pre-update snapshot; `next_params`
/// carries `version + 1` except for mode `A`, which returns the input state
/// untouched.
pub fn infer_then_update(
    x: &[f64],
    y: usize,
    params: &ModelParams,
    mode: AdaptationMode,
    cfg: &AdaptConfig,
    spec: &GateSpec,
) -> Result<StepOutcome> {
    cfg.validate()?;
    check_mode_supported(mode, spec, cfg)?;

    // Output first.
    let fwd = masked_forward(x, params, spec)?;
    let p = softmax(&fwd.logits)?;
    let omega = if spec.kind.is_gated() {
        fwd.mask.values.iter().sum::<f64>() / fwd.mask.len() as f64
    } else {
        0.0
    };
    let loss = cross_entropy(&p, y)? + cfg.lambda * omega;
    let active = active_set(&fwd.mask, cfg.tau_inactive);

    // Update after.
    let mut next = params.clone();
    if mode != AdaptationMode::ANone {
        if mode.updates_theta() {
            let theta_grads = if spec.kind.is_hard() {
                ste_backward(x, y, params, spec, cfg.lambda)?.1
            } else {
                backward(x, y, params, spec, cfg.lambda)?.1
            };
            apply_theta(&mut next, &theta_grads, cfg.eta);
        }
        if mode.updates_w() {
            let units = scope_mask(mode, &active, params.arch.gated_width());
            if !units.is_empty() {
                let w_grads = match (mode, cfg.inactive_grad) {
                    // The active-subspace rule uses the true masked gradient.
                    (AdaptationMode::XWActiveOnly, _) => {
                        backward(x, y, params, spec, cfg.lambda)?.1
                    }
                    (_, InactiveGradSource::Background) if spec.kind.is_moe() => {
                        standalone_expert_backward(x, y, params, spec, cfg.lambda)?
                    }
                    (_, InactiveGradSource::Background) => {
                        residual_unit_backward(x, y, params, spec, cfg.lambda)?
                    }
                    (_, InactiveGradSource::Unmasked) => {
                        unmasked_backward(x, y, params, spec, cfg.lambda)?.1
                    }
                    (_, InactiveGradSource::Masked) => backward(x, y, params, spec, cfg.lambda)?.1,
                };
                apply_w_scoped(&mut next, &w_grads, cfg.eta, &units);
            }
        }
        next.version = params.version + 1;
    }

    Ok(StepOutcome {
        prediction: fwd.prediction(),
        logits: fwd.logits,
        loss,
        mask: fwd.mask,
        active,
        next_params: next,
    })
}

/// Per-step record of a stream run; one row of the loss trace CSV.
#[derive(Debug, Clone)]
pub struct StreamStep {
    pub step: u64,
    /// Version the prediction was served from.
    pub version: u64,
    pub loss: f64,
    pub prediction: usize,
    pub temperature: f64,
    /// Active fraction of the served mask.
    pub active_ratio: f64,
    pub logits_digest: u64,
}

/// Predictions and routing decisions on a fixed probe set, captured before
/// and after the run for the flip metrics.
#[derive(Debug, Clone, Default)]
pub struct ProbeCapture {
    pub predictions_before: Vec<usize>,
    pub predictions_after: Vec<usize>,
    pub routing_before: Vec<ActiveSet>,
    pub routing_after: Vec<ActiveSet>,
}

/// Outcome of folding a labeled stream.
#[derive(Debug, Clone)]
pub struct StreamRun {
    pub final_params: ModelParams,
    /// Spec in effect after the last step (annealing included).
    pub final_spec: GateSpec,
    pub steps: Vec<StreamStep>,
    pub probe: Option<ProbeCapture>,
}

/// Spec in effect at adaptation step `t`: only `dg_anneal` changes over the
/// stream, following its temperature schedule.
pub fn spec_at_step(spec: &GateSpec, step: u64) -> Result<GateSpec> {
    if spec.kind == GateKind::DgAnneal {
        anneal_step(spec, step)
    } else {
        Ok(*spec)
    }
}

fn capture_probe(
    probe: &[Vec<f64>],
    params: &ModelParams,
    spec: &GateSpec,
    tau: f64,
) -> Result<(Vec<usize>, Vec<ActiveSet>)> {
    let mut preds = Vec::with_capacity(probe.len());
    let mut routes = Vec::with_capacity(probe.len());
    for x in probe {
        let fwd = masked_forward(x, params, spec)?;
        preds.push(fwd.prediction());
        routes.push(active_set(&fwd.mask, tau));
    }
    Ok((preds, routes))
}

/// Fold [`infer_then_update`] over a labeled stream in order.
///
/// Mode skips surface as an error before any step runs. The probe set, when
/// given, is evaluated with the initial state under the step-0 spec and with
/// the final state under the post-stream spec.
pub fn run_stream(
    stream: &[(Vec<f64>, usize)],
    params: &ModelParams,
    mode: AdaptationMode,
    cfg: &AdaptConfig,
    spec: &GateSpec,
    probe: Option<&[Vec<f64>]>,
) -> Result<StreamRun> {
    if stream.is_empty() {
        return Err(Error::InvalidInput("empty adaptation stream".into()));
    }
    check_mode_supported(mode, spec, cfg)?;

    let mut probe_capture = None;
    if let Some(probe_inputs) = probe {
        let spec0 = spec_at_step(spec, 0)?;
        let (predictions_before, routing_before) =
            capture_probe(probe_inputs, params, &spec0, cfg.tau_inactive)?;
        probe_capture = Some(ProbeCapture {
            predictions_before,
            predictions_after: Vec::new(),
            routing_before,
            routing_after: Vec::new(),
        });
    }

    let mut current = params.clone();
    let mut steps = Vec::with_capacity(stream.len());
    for (t, (x, y)) in stream.iter().enumerate() {
        let step_spec = spec_at_step(spec, t as u64)?;
        let outcome = infer_then_update(x, *y, &current, mode, cfg, &step_spec)?;
        let d = outcome.mask.len().max(1);
        steps.push(StreamStep {
            step: t as u64,
            version: current.version,
            loss: outcome.loss,
            prediction: outcome.prediction,
            temperature: step_spec.temperature,
            active_ratio: outcome.active.len() as f64 / d as f64,
            logits_digest: fnv1a64_f64(&outcome.logits),
        });
        current = outcome.next_params;
    }

    let final_spec = spec_at_step(spec, stream.len() as u64)?;
    if let (Some(capture), Some(probe_inputs)) = (probe_capture.as_mut(), probe) {
        let (after, routing_after) =
            capture_probe(probe_inputs, &current, &final_spec, cfg.tau_inactive)?;
        capture.predictions_after = after;
        capture.routing_after = routing_after;
    }

    Ok(StreamRun {
        final_params: current,
        final_spec,
        steps,
        probe: probe_capture,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gatenet::Arch;
    use crate::mathcore::RngStream;

    fn toy(kind: GateKind, seed: u64) -> (GateSpec, ModelParams) {
        let spec = match kind {
            GateKind::Dense => GateSpec::dense(),
            GateKind::DgHard => GateSpec::dg_hard(0.0),
            GateKind::DgSoft => GateSpec::dg_soft(1.0).unwrap(),
            GateKind::DgAnneal => GateSpec::dg_anneal(1.0, 0.5, 50).unwrap(),
            GateKind::MoeTop1 => GateSpec::moe_top1(4).unwrap(),
            GateKind::MoeSoft => GateSpec::moe_soft(4).unwrap(),
        };
        let arch = if kind.is_moe() {
            Arch::moe(6, 5, 3, 4)
        } else {
            Arch::mlp(6, 5, 3)
        };
        (spec, ModelParams::init(arch, &spec, seed).unwrap())
    }

    fn sample(seed: u64) -> (Vec<f64>, usize) {
        let mut rng = RngStream::new(seed);
        let x = (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect();
        (x, (seed % 3) as usize)
    }

    #[test]
    fn scope_mask_cases() {
        let active = active_set(
            &GateMask {
                values: vec![1.0, 0.0, 1.0, 0.0],
            },
            0.0,
        );
        assert_eq!(active.indices, vec![0, 2]);
        assert_eq!(
            scope_mask(AdaptationMode::CWInactiveOnly, &active, 4),
            vec![1, 3]
        );
        assert_eq!(
            scope_mask(AdaptationMode::XWActiveOnly, &active, 4),
            vec![0, 2]
        );
        assert!(scope_mask(AdaptationMode::BThetaOnly, &active, 4).is_empty());
        assert!(scope_mask(AdaptationMode::ANone, &active, 4).is_empty());

        let empty = active_set(&GateMask { values: vec![0.0; 3] }, 0.0);
        assert_eq!(
            scope_mask(AdaptationMode::CWInactiveOnly, &empty, 3),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn mode_a_is_bit_exact_noop() {
        let (spec, params) = toy(GateKind::DgSoft, 1);
        let (x, y) = sample(10);
        let out = infer_then_update(&x, y, &params, AdaptationMode::ANone, &AdaptConfig::default(), &spec)
            .unwrap();
        assert_eq!(out.next_params, params);
        assert_eq!(out.next_params.version, params.version);
    }

    #[test]
    fn dense_with_update_mode_skips() {
        let (spec, params) = toy(GateKind::Dense, 2);
        let (x, y) = sample(11);
        for mode in [
            AdaptationMode::BThetaOnly,
            AdaptationMode::CWInactiveOnly,
            AdaptationMode::DThetaAndWInactive,
        ] {
            let err =
                infer_then_update(&x, y, &params, mode, &AdaptConfig::default(), &spec).unwrap_err();
            assert!(matches!(err, Error::ModeSkip(_)), "{mode}");
        }
    }

    #[test]
    fn hard_kind_mode_b_skips_without_ste() {
        for kind in [GateKind::DgHard, GateKind::MoeTop1] {
            let (spec, params) = toy(kind, 3);
            let (x, y) = sample(12);
            let err = infer_then_update(
                &x,
                y,
                &params,
                AdaptationMode::BThetaOnly,
                &AdaptConfig::default(),
                &spec,
            )
            .unwrap_err();
            match err {
                Error::ModeSkip(reason) => assert_eq!(reason, "mode=theta_only"),
                other => panic!("expected skip, got {other:?}"),
            }
            // Opting into the surrogate unskips it.
            let cfg = AdaptConfig {
                ste_enabled: true,
                ..AdaptConfig::default()
            };
            let out = infer_then_update(&x, y, &params, AdaptationMode::BThetaOnly, &cfg, &spec)
                .unwrap();
            assert_eq!(out.next_params.version, params.version + 1);
        }
    }

    #[test]
    fn mode_b_leaves_w_bit_identical() {
        let (spec, mut params) = toy(GateKind::DgSoft, 4);
        let w_before = (params.input.clone(), params.head.clone());
        for s in 0..50u64 {
            let (x, y) = sample(100 + s);
            params = infer_then_update(
                &x,
                y,
                &params,
                AdaptationMode::BThetaOnly,
                &AdaptConfig::default(),
                &spec,
            )
            .unwrap()
            .next_params;
        }
        assert_eq!(params.input, w_before.0);
        assert_eq!(params.head, w_before.1);
        assert_eq!(params.version, 50);
    }

    #[test]
    fn mode_b_theta_actually_moves() {
        let (spec, params) = toy(GateKind::DgSoft, 5);
        let (x, y) = sample(13);
        let out = infer_then_update(
            &x,
            y,
            &params,
            AdaptationMode::BThetaOnly,
            &AdaptConfig::default(),
            &spec,
        )
        .unwrap();
        assert_ne!(out.next_params.router, params.router);
    }

    #[test]
    fn mode_b_single_step_decreases_sample_loss() {
        let (spec, params) = toy(GateKind::DgSoft, 6);
        let (x, y) = sample(14);
        let cfg = AdaptConfig {
            eta: 0.01,
            ..AdaptConfig::default()
        };
        let out = infer_then_update(&x, y, &params, AdaptationMode::BThetaOnly, &cfg, &spec).unwrap();
        let after = crate::graddiff::loss_value(&x, y, &out.next_params, &spec, cfg.lambda).unwrap();
        assert!(after < out.loss, "{after} !< {}", out.loss);
    }

    #[test]
    fn mode_x_keeps_inactive_coordinates_and_pre_update_output() {
        let (spec, params) = toy(GateKind::DgHard, 7);
        for s in 0..20u64 {
            let (x, y) = sample(200 + s);
            let pure = masked_forward(&x, &params, &spec).unwrap();
            let out = infer_then_update(
                &x,
                y,
                &params,
                AdaptationMode::XWActiveOnly,
                &AdaptConfig::default(),
                &spec,
            )
            .unwrap();
            // Prediction equals the pure forward of the pre-update state.
            assert_eq!(out.logits, pure.logits);
            // Coordinates outside the active set are untouched bits.
            let next = &out.next_params;
            for i in 0..5 {
                if !out.active.contains(i) {
                    assert_eq!(next.input.w.row(i), params.input.w.row(i));
                    assert_eq!(next.input.b[i], params.input.b[i]);
                    let (Head::Single(a), Head::Single(b)) = (&next.head, &params.head) else {
                        unreachable!()
                    };
                    for j in 0..3 {
                        assert_eq!(a.w.get(j, i), b.w.get(j, i));
                    }
                }
            }
            // Theta untouched in X.
            assert_eq!(next.router, params.router);
        }
    }

    #[test]
    fn mode_c_touches_only_inactive_units() {
        let (spec, params) = toy(GateKind::DgHard, 8);
        let (x, y) = sample(15);
        let out = infer_then_update(
            &x,
            y,
            &params,
            AdaptationMode::CWInactiveOnly,
            &AdaptConfig::default(),
            &spec,
        )
        .unwrap();
        let next = &out.next_params;
        for i in 0..5 {
            let row_same = next.input.w.row(i) == params.input.w.row(i);
            if out.active.contains(i) {
                assert!(row_same, "active unit {i} must stay fixed in C");
            }
        }
        assert_eq!(next.router, params.router, "theta frozen in C");
        // Output bias is shared, never scoped.
        let (Head::Single(a), Head::Single(b)) = (&next.head, &params.head) else {
            unreachable!()
        };
        assert_eq!(a.b, b.b);
    }

    #[test]
    fn mode_d_unions_b_and_c() {
        let (spec, params) = toy(GateKind::DgSoft, 9);
        let (x, y) = sample(16);
        let cfg = AdaptConfig::default();
        let d = infer_then_update(&x, y, &params, AdaptationMode::DThetaAndWInactive, &cfg, &spec)
            .unwrap();
        let b = infer_then_update(&x, y, &params, AdaptationMode::BThetaOnly, &cfg, &spec).unwrap();
        let c = infer_then_update(&x, y, &params, AdaptationMode::CWInactiveOnly, &cfg, &spec)
            .unwrap();
        assert_eq!(d.next_params.router, b.next_params.router);
        assert_eq!(d.next_params.input, c.next_params.input);
        assert_eq!(d.next_params.head, c.next_params.head);
    }

    #[test]
    fn run_stream_rejects_empty() {
        let (spec, params) = toy(GateKind::DgSoft, 10);
        let err = run_stream(
            &[],
            &params,
            AdaptationMode::ANone,
            &AdaptConfig::default(),
            &spec,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn run_stream_single_element_equals_one_step() {
        let (spec, params) = toy(GateKind::DgSoft, 11);
        let (x, y) = sample(17);
        let cfg = AdaptConfig::default();
        let run = run_stream(
            &[(x.clone(), y)],
            &params,
            AdaptationMode::BThetaOnly,
            &cfg,
            &spec,
            None,
        )
        .unwrap();
        let single = infer_then_update(&x, y, &params, AdaptationMode::BThetaOnly, &cfg, &spec)
            .unwrap();
        assert_eq!(run.final_params, single.next_params);
        assert_eq!(run.steps.len(), 1);
        assert_eq!(run.steps[0].prediction, single.prediction);
    }

    #[test]
    fn run_stream_mode_a_preserves_params() {
        let (spec, params) = toy(GateKind::MoeSoft, 12);
        let stream: Vec<(Vec<f64>, usize)> = (0..10).map(|s| sample(300 + s)).collect();
        let run = run_stream(
            &stream,
            &params,
            AdaptationMode::ANone,
            &AdaptConfig::default(),
            &spec,
            None,
        )
        .unwrap();
        assert_eq!(run.final_params, params);
        assert!(run.steps.iter().all(|s| s.version == params.version));
    }

    #[test]
    fn versions_increase_per_committed_step() {
        let (spec, params) = toy(GateKind::DgSoft, 13);
        let stream: Vec<(Vec<f64>, usize)> = (0..8).map(|s| sample(400 + s)).collect();
        let run = run_stream(
            &stream,
            &params,
            AdaptationMode::DThetaAndWInactive,
            &AdaptConfig::default(),
            &spec,
            None,
        )
        .unwrap();
        for (t, step) in run.steps.iter().enumerate() {
            assert_eq!(step.version, t as u64);
        }
        assert_eq!(run.final_params.version, 8);
    }

    #[test]
    fn replay_reproduces_every_served_output() {
        // Re-fold the stream and check each step's logits digest against a
        // fresh forward of the recorded state.
        let (spec, params) = toy(GateKind::DgAnneal, 14);
        let stream: Vec<(Vec<f64>, usize)> = (0..30).map(|s| sample(500 + s)).collect();
        let cfg = AdaptConfig::default();
        let run = run_stream(
            &stream,
            &params,
            AdaptationMode::DThetaAndWInactive,
            &cfg,
            &spec,
            None,
        )
        .unwrap();

        let mut replay = params.clone();
        for (t, (x, y)) in stream.iter().enumerate() {
            let step_spec = spec_at_step(&spec, t as u64).unwrap();
            let fresh = masked_forward(x, &replay, &step_spec).unwrap();
            assert_eq!(run.steps[t].version, replay.version);
            assert_eq!(run.steps[t].logits_digest, fnv1a64_f64(&fresh.logits));
            assert_eq!(run.steps[t].prediction, fresh.prediction());
            replay = infer_then_update(x, *y, &replay, AdaptationMode::DThetaAndWInactive, &cfg, &step_spec)
                .unwrap()
                .next_params;
        }
        assert_eq!(replay, run.final_params);
    }

    #[test]
    fn probe_capture_shapes_align() {
        let (spec, params) = toy(GateKind::DgSoft, 15);
        let stream: Vec<(Vec<f64>, usize)> = (0..5).map(|s| sample(600 + s)).collect();
        let probe: Vec<Vec<f64>> = (0..7).map(|s| sample(700 + s).0).collect();
        let run = run_stream(
            &stream,
            &params,
            AdaptationMode::BThetaOnly,
            &AdaptConfig::default(),
            &spec,
            Some(&probe),
        )
        .unwrap();
        let capture = run.probe.unwrap();
        assert_eq!(capture.predictions_before.len(), 7);
        assert_eq!(capture.predictions_after.len(), 7);
        assert_eq!(capture.routing_before.len(), 7);
        assert_eq!(capture.routing_after.len(), 7);
    }
}
