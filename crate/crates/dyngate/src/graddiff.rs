//! Analytic gradients of the regularized loss, split by parameter group.
//!
//! The loss is `cross_entropy(softmax(logits), y) + lambda * mean(mask)` for
//! gated kinds and plain cross-entropy for dense. Gradients are hand-derived
//! for the fixed two-layer gated topology; there is no autodiff tape. A
//! central-difference oracle lives alongside so every soft path can be
//! checked coordinate by coordinate.
//!
//! Hard gates pass no gradient to the routing parameters. `ste_backward`
//! substitutes the soft surrogate (sigmoid for `dg_hard`, softmax for
//! `moe_top1`) for the routing gradient only; the representation gradient is
//! bit-identical to the plain backward pass.

use crate::gatenet::{masked_forward, Affine, GateKind, GateSpec, Head, ModelParams};
use crate::mathcore::{cross_entropy, matvec_transposed, softmax, Matrix, LOG_EPSILON};
use crate::{Error, Result};

/// Temperature of the straight-through surrogate.
pub const STE_TEMPERATURE: f64 = 1.0;

/// Default regularization weight on the mean mask value.
pub const DEFAULT_LAMBDA: f64 = 1e-3;

/// Default step for the central-difference oracle.
pub const FD_EPSILON: f64 = 1e-5;

/// Gradients shaped exactly like [`ModelParams`]: `d_input`/`d_head` mirror
/// the representation parameters, `d_router` the routing parameters.
#[derive(Debug, Clone)]
pub struct Grads {
    pub d_input: Affine,
    pub d_head: Head,
    pub d_router: Option<Affine>,
}

impl Grads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let zero_affine = |a: &Affine| Affine {
            w: Matrix::zeros(a.w.rows(), a.w.cols()),
            b: vec![0.0; a.b.len()],
        };
        Self {
            d_input: zero_affine(&params.input),
            d_head: match &params.head {
                Head::Single(a) => Head::Single(zero_affine(a)),
                Head::Experts(es) => Head::Experts(es.iter().map(zero_affine).collect()),
            },
            d_router: params.router.as_ref().map(zero_affine),
        }
    }

    /// Largest absolute entry across every tensor.
    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        let mut scan = |a: &Affine| {
            for v in a.w.data() {
                m = m.max(v.abs());
            }
            for v in &a.b {
                m = m.max(v.abs());
            }
        };
        scan(&self.d_input);
        match &self.d_head {
            Head::Single(a) => scan(a),
            Head::Experts(es) => es.iter().for_each(&mut scan),
        }
        if let Some(r) = &self.d_router {
            scan(r);
        }
        m
    }
}

/// How the backward pass treats the mask.
#[derive(Clone, Copy, PartialEq)]
enum MaskTreatment {
    /// Mask from the spec's gate; routing gradient where differentiable.
    Gated,
    /// Constant all-ones mask, no gate path, no regularizer. This is the
    /// dense backward, and also the gradient source for inactive-scope
    /// updates where the masked gradient is structurally zero.
    AllOnes,
}

/// Loss and full gradient through the masked forward pass.
///
/// For hard kinds the routing gradient is exactly zero; use
/// [`ste_backward`] to opt into the surrogate.
pub fn backward(
    x: &[f64],
    y: usize,
    params: &ModelParams,
    spec: &GateSpec,
    lambda: f64,
) -> Result<(f64, Grads)> {
    backward_inner(x, y, params, spec, lambda, MaskTreatment::Gated)
}

/// Loss and gradient through an all-ones-mask forward of the same
/// parameters. The routing gradient is zero and the mask regularizer is
/// dropped; this is the auxiliary gradient used for inactive-subspace
/// updates on hard kinds.
pub fn unmasked_backward(
    x: &[f64],
    y: usize,
    params: &ModelParams,
    spec: &GateSpec,
    lambda: f64,
) -> Result<(f64, Grads)> {
    backward_inner(x, y, params, spec, lambda, MaskTreatment::AllOnes)
}

fn backward_inner(
    x: &[f64],
    y: usize,
    params: &ModelParams,
    spec: &GateSpec,
    lambda: f64,
    treatment: MaskTreatment,
) -> Result<(f64, Grads)> {
    let d = params.arch.gated_width();
    let n_classes = params.arch.n_classes;

    // Forward. The all-ones treatment runs every unit and expert.
    let (h, mask, logits, expert_outputs): (Vec<f64>, Vec<f64>, Vec<f64>, Vec<Option<Vec<f64>>>) =
        match treatment {
            MaskTreatment::Gated => {
                let fwd = masked_forward(x, params, spec)?;
                (
                    fwd.trace.h,
                    fwd.mask.values,
                    fwd.logits,
                    fwd.trace.expert_outputs,
                )
            }
            MaskTreatment::AllOnes => {
                let h: Vec<f64> = params
                    .input
                    .apply(x)?
                    .into_iter()
                    .map(crate::mathcore::relu)
                    .collect();
                match &params.head {
                    Head::Single(out) => {
                        let logits = out.apply(&h)?;
                        (h, vec![1.0; d], logits, Vec::new())
                    }
                    Head::Experts(experts) => {
                        let mut logits = vec![0.0; n_classes];
                        let mut outputs = Vec::with_capacity(experts.len());
                        for expert in experts {
                            let u = expert.apply(&h)?;
                            for (lj, uj) in logits.iter_mut().zip(&u) {
                                *lj += uj;
                            }
                            outputs.push(Some(u));
                        }
                        (h, vec![1.0; d], logits, outputs)
                    }
                }
            }
        };

    let p = softmax(&logits)?;
    if y >= n_classes {
        return Err(Error::InvalidInput(format!(
            "class index {y} out of range for {n_classes} classes"
        )));
    }
    let gated = treatment == MaskTreatment::Gated && spec.kind.is_gated();
    let omega = if gated {
        mask.iter().sum::<f64>() / d as f64
    } else {
        0.0
    };
    let loss = cross_entropy(&p, y)? + lambda * omega;

    // d loss / d logits, with the exact log-epsilon factor so the analytic
    // gradient matches finite differences of the actual loss.
    let scale = p[y] / (p[y] + LOG_EPSILON);
    let grad_u: Vec<f64> = (0..n_classes)
        .map(|j| scale * (p[j] - if j == y { 1.0 } else { 0.0 }))
        .collect();

    let mut grads = Grads::zeros_like(params);
    let mut grad_h = vec![0.0; params.arch.d_hidden];
    // d loss / d mask, accumulated per gated unit.
    let mut grad_m = vec![0.0; d];

    match (&params.head, &mut grads.d_head) {
        (Head::Single(out), Head::Single(d_out)) => {
            // g = h .* mask feeds the output affine.
            let g: Vec<f64> = (0..d)
                .map(|i| if mask[i] == 0.0 { 0.0 } else { h[i] * mask[i] })
                .collect();
            for j in 0..n_classes {
                for i in 0..d {
                    d_out.w.set(j, i, grad_u[j] * g[i]);
                }
                d_out.b[j] = grad_u[j];
            }
            let grad_g = matvec_transposed(&out.w, &grad_u)?;
            for i in 0..d {
                grad_h[i] = grad_g[i] * mask[i];
                grad_m[i] = grad_g[i] * h[i];
            }
        }
        (Head::Experts(experts), Head::Experts(d_experts)) => {
            for (e, expert) in experts.iter().enumerate() {
                let m = mask[e];
                if m != 0.0 {
                    let d_e = &mut d_experts[e];
                    for j in 0..n_classes {
                        let gj = m * grad_u[j];
                        for (k, hk) in h.iter().enumerate() {
                            d_e.w.set(j, k, gj * hk);
                        }
                        d_e.b[j] = gj;
                    }
                    let back = matvec_transposed(&expert.w, &grad_u)?;
                    for (gh, b) in grad_h.iter_mut().zip(&back) {
                        *gh += m * b;
                    }
                }
                if let Some(u) = expert_outputs.get(e).and_then(|o| o.as_ref()) {
                    grad_m[e] = grad_u.iter().zip(u).map(|(a, b)| a * b).sum();
                }
            }
        }
        _ => unreachable!("grads mirror params"),
    }

    if gated {
        let reg = lambda / d as f64;
        for gm in grad_m.iter_mut() {
            *gm += reg;
        }
    }

    // Routing gradient: only soft transforms pass gradient through the mask.
    if gated {
        let grad_z: Option<Vec<f64>> = match spec.kind {
            GateKind::DgSoft | GateKind::DgAnneal => Some(
                (0..d)
                    .map(|i| grad_m[i] * mask[i] * (1.0 - mask[i]) / spec.temperature)
                    .collect(),
            ),
            GateKind::MoeSoft => {
                // Softmax Jacobian: gz_e = m_e * (gm_e - sum_k gm_k m_k).
                let dot: f64 = grad_m.iter().zip(&mask).map(|(g, m)| g * m).sum();
                Some((0..d).map(|e| mask[e] * (grad_m[e] - dot)).collect())
            }
            GateKind::DgHard | GateKind::MoeTop1 | GateKind::Dense => None,
        };
        if let (Some(gz), Some(router), Some(d_router)) =
            (grad_z, params.router.as_ref(), grads.d_router.as_mut())
        {
            for i in 0..gz.len() {
                for (k, hk) in h.iter().enumerate() {
                    d_router.w.set(i, k, gz[i] * hk);
                }
                d_router.b[i] = gz[i];
            }
            let back = matvec_transposed(&router.w, &gz)?;
            for (gh, b) in grad_h.iter_mut().zip(&back) {
                *gh += b;
            }
        }
    }

    // Through ReLU into the input affine.
    for i in 0..params.arch.d_hidden {
        let da = if h[i] > 0.0 { grad_h[i] } else { 0.0 };
        for (k, xk) in x.iter().enumerate() {
            grads.d_input.w.set(i, k, da * xk);
        }
        grads.d_input.b[i] = da;
    }

    Ok((loss, grads))
}

/// Per-unit background gradient for single-head models: each unit is
/// trained against the counterfactual forward in which its mask entry is
/// raised to 1 while everything else stays as served.
///
/// A unit that later flips into the active set joins an already-working
/// ensemble, so this is the configuration worth preparing it for; the
/// all-ones forward of [`unmasked_backward`] instead teaches units to rely
/// on 255 simultaneously active peers. Gradients touch only unit-owned
/// coordinates (input row, input bias, output column); routing and shared
/// coordinates get zero.
pub fn residual_unit_backward(
    x: &[f64],
    y: usize,
    params: &ModelParams,
    spec: &GateSpec,
    _lambda: f64,
) -> Result<Grads> {
    let Head::Single(out) = &params.head else {
        return Err(Error::Unsupported(
            "residual unit gradient on an expert-head model".into(),
        ));
    };
    let fwd = masked_forward(x, params, spec)?;
    let h = &fwd.trace.h;
    let mask = &fwd.mask.values;
    let n_classes = params.arch.n_classes;

    let mut grads = Grads::zeros_like(params);
    let Head::Single(d_out) = &mut grads.d_head else {
        unreachable!("grads mirror params")
    };
    for i in 0..params.arch.d_hidden {
        // Counterfactual logits with unit i fully active.
        let extra = (1.0 - mask[i]) * h[i];
        let logits: Vec<f64> = (0..n_classes)
            .map(|j| fwd.logits[j] + out.w.get(j, i) * extra)
            .collect();
        let p = softmax(&logits)?;
        let scale = p[y] / (p[y] + LOG_EPSILON);
        // d logits_j / d w_out[j][i] = h_i exactly: the served term carries
        // mask_i * h_i and the counterfactual term (1 - mask_i) * h_i.
        let mut grad_hi = 0.0;
        for j in 0..n_classes {
            let gj = scale * (p[j] - if j == y { 1.0 } else { 0.0 });
            d_out.w.set(j, i, gj * h[i]);
            grad_hi += gj * out.w.get(j, i);
        }
        if h[i] > 0.0 {
            for (k, xk) in x.iter().enumerate() {
                grads.d_input.w.set(i, k, grad_hi * xk);
            }
            grads.d_input.b[i] = grad_hi;
        }
    }
    Ok(grads)
}
/// Per-expert background gradient: every expert is trained as a standalone
/// head on `(x, y)`, as if it alone served the request.
///
/// This is the MoE counterpart of [`residual_unit_backward`]: a hard router
/// replaces the serving expert outright, so the right counterfactual for an
/// unused expert is serving alone. Encoder and router gradients are zero.
pub fn standalone_expert_backward(
    x: &[f64],
    y: usize,
    params: &ModelParams,
    _spec: &GateSpec,
    _lambda: f64,
) -> Result<Grads> {
    let Head::Experts(experts) = &params.head else {
        return Err(Error::Unsupported(
            "standalone expert gradient on a single-head model".into(),
        ));
    };
    let h: Vec<f64> = params
        .input
        .apply(x)?
        .into_iter()
        .map(crate::mathcore::relu)
        .collect();
    let mut grads = Grads::zeros_like(params);
    let Head::Experts(d_experts) = &mut grads.d_head else {
        unreachable!("grads mirror params")
    };
    for (expert, d_e) in experts.iter().zip(d_experts.iter_mut()) {
        let u = expert.apply(&h)?;
        let p = softmax(&u)?;
        let scale = p[y] / (p[y] + LOG_EPSILON);
        for j in 0..u.len() {
            let gj = scale * (p[j] - if j == y { 1.0 } else { 0.0 });
            for (k, hk) in h.iter().enumerate() {
                d_e.w.set(j, k, gj * hk);
            }
            d_e.b[j] = gj;
        }
    }
    Ok(grads)
}

/// Straight-through estimation for hard gates: the forward pass and the
/// representation gradient come from the hard mask; the routing gradient is
/// the one the soft-surrogate twin (same parameters, soft transform at
/// [`STE_TEMPERATURE`]) would produce.
pub fn ste_backward(
    x: &[f64],
    y: usize,
    params: &ModelParams,
    spec: &GateSpec,
    lambda: f64,
) -> Result<(f64, Grads)> {
    let surrogate = match spec.kind {
        GateKind::DgHard => GateSpec::dg_soft(STE_TEMPERATURE)?,
        GateKind::MoeTop1 => GateSpec::moe_soft(spec.expert_count)?,
        other => {
            return Err(Error::Unsupported(format!(
                "ste_backward on soft kind `{other}`; use backward"
            )))
        }
    };
    let (loss, mut grads) = backward(x, y, params, spec, lambda)?;
    let (_, soft_grads) = backward(x, y, params, &surrogate, lambda)?;
    grads.d_router = soft_grads.d_router;
    Ok((loss, grads))
}

/// Loss value used by both the backward pass and the oracle.
pub fn loss_value(
    x: &[f64],
    y: usize,
    params: &ModelParams,
    spec: &GateSpec,
    lambda: f64,
) -> Result<f64> {
    let fwd = masked_forward(x, params, spec)?;
    let p = softmax(&fwd.logits)?;
    let omega = if spec.kind.is_gated() {
        fwd.mask.values.iter().sum::<f64>() / fwd.mask.len() as f64
    } else {
        0.0
    };
    Ok(cross_entropy(&p, y)? + lambda * omega)
}

/// Central-difference gradient `(L(p + eps e_i) - L(p - eps e_i)) / 2 eps`
/// per coordinate.
///
/// Routing coordinates are differenced only for soft kinds; across a hard
/// gate the loss is piecewise constant in `theta` and the difference
/// quotient is meaningless at a flip, so those entries stay zero.
pub fn fd_gradient(
    x: &[f64],
    y: usize,
    params: &ModelParams,
    spec: &GateSpec,
    lambda: f64,
    epsilon: f64,
) -> Result<Grads> {
    if epsilon <= 0.0 {
        return Err(Error::InvalidInput("epsilon must be positive".into()));
    }
    let mut grads = Grads::zeros_like(params);
    let mut scratch = params.clone();

    fn diff(
        x: &[f64],
        y: usize,
        spec: &GateSpec,
        lambda: f64,
        epsilon: f64,
        scratch: &mut ModelParams,
        select: &dyn Fn(&mut ModelParams) -> &mut Affine,
        out: &mut Affine,
    ) -> Result<()> {
        for idx in 0..out.w.len() {
            let orig = select(scratch).w.data()[idx];
            select(scratch).w.data_mut()[idx] = orig + epsilon;
            let up = loss_value(x, y, scratch, spec, lambda)?;
            select(scratch).w.data_mut()[idx] = orig - epsilon;
            let down = loss_value(x, y, scratch, spec, lambda)?;
            select(scratch).w.data_mut()[idx] = orig;
            out.w.data_mut()[idx] = (up - down) / (2.0 * epsilon);
        }
        for idx in 0..out.b.len() {
            let orig = select(scratch).b[idx];
            select(scratch).b[idx] = orig + epsilon;
            let up = loss_value(x, y, scratch, spec, lambda)?;
            select(scratch).b[idx] = orig - epsilon;
            let down = loss_value(x, y, scratch, spec, lambda)?;
            select(scratch).b[idx] = orig;
            out.b[idx] = (up - down) / (2.0 * epsilon);
        }
        Ok(())
    }

    diff(x, y, spec, lambda, epsilon, &mut scratch, &|p| &mut p.input, &mut grads.d_input)?;
    match &mut grads.d_head {
        Head::Single(d_out) => {
            diff(
                x,
                y,
                spec,
                lambda,
                epsilon,
                &mut scratch,
                &|p| match &mut p.head {
                    Head::Single(a) => a,
                    _ => unreachable!(),
                },
                d_out,
            )?;
        }
        Head::Experts(d_experts) => {
            for (e, d_expert) in d_experts.iter_mut().enumerate() {
                diff(
                    x,
                    y,
                    spec,
                    lambda,
                    epsilon,
                    &mut scratch,
                    &move |p| match &mut p.head {
                        Head::Experts(es) => &mut es[e],
                        _ => unreachable!(),
                    },
                    d_expert,
                )?;
            }
        }
    }
    let theta_differentiable = matches!(
        spec.kind,
        GateKind::DgSoft | GateKind::DgAnneal | GateKind::MoeSoft
    );
    if theta_differentiable {
        if let Some(d_router) = grads.d_router.as_mut() {
            diff(
                x,
                y,
                spec,
                lambda,
                epsilon,
                &mut scratch,
                &|p| p.router.as_mut().expect("router present"),
                d_router,
            )?;
        }
    }
    Ok(grads)
}

/// Max over coordinates of `|analytic - fd| / max(1, |fd|)`, the
/// gradient-check statistic. Routing entries are compared only when `theta`
/// was differenced.
pub fn gradient_check_error(analytic: &Grads, fd: &Grads, include_router: bool) -> f64 {
    fn scan(a: &Affine, b: &Affine, worst: &mut f64) {
        for (x, y) in a.w.data().iter().zip(b.w.data()) {
            let rel = (x - y).abs() / y.abs().max(1.0);
            *worst = worst.max(rel);
        }
        for (x, y) in a.b.iter().zip(&b.b) {
            let rel = (x - y).abs() / y.abs().max(1.0);
            *worst = worst.max(rel);
        }
    }
    let mut worst: f64 = 0.0;
    scan(&analytic.d_input, &fd.d_input, &mut worst);
    match (&analytic.d_head, &fd.d_head) {
        (Head::Single(a), Head::Single(b)) => scan(a, b, &mut worst),
        (Head::Experts(xs), Head::Experts(ys)) => {
            for (a, b) in xs.iter().zip(ys) {
                scan(a, b, &mut worst);
            }
        }
        _ => unreachable!(),
    }
    if include_router {
        if let (Some(a), Some(b)) = (&analytic.d_router, &fd.d_router) {
            scan(a, b, &mut worst);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gatenet::{active_set, Arch, GateMask};
    use crate::mathcore::RngStream;

    fn toy(kind: GateKind, seed: u64) -> (GateSpec, ModelParams) {
        let spec = match kind {
            GateKind::Dense => GateSpec::dense(),
            GateKind::DgHard => GateSpec::dg_hard(0.0),
            GateKind::DgSoft => GateSpec::dg_soft(1.0).unwrap(),
            GateKind::DgAnneal => GateSpec::dg_anneal(0.8, 0.4, 100).unwrap(),
            GateKind::MoeTop1 => GateSpec::moe_top1(3).unwrap(),
            GateKind::MoeSoft => GateSpec::moe_soft(3).unwrap(),
        };
        let arch = if kind.is_moe() {
            Arch::moe(6, 4, 3, 3)
        } else {
            Arch::mlp(6, 4, 3)
        };
        (spec, ModelParams::init(arch, &spec, seed).unwrap())
    }

    fn random_input(rng: &mut RngStream, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()
    }

    #[test]
    fn gradient_check_soft_kinds() {
        for kind in [
            GateKind::Dense,
            GateKind::DgSoft,
            GateKind::DgAnneal,
            GateKind::MoeSoft,
        ] {
            for seed in 0..20u64 {
                let (spec, params) = toy(kind, seed);
                let mut rng = RngStream::new(1000 + seed);
                let x = random_input(&mut rng, 6);
                let y = (seed % 3) as usize;
                let (_, analytic) = backward(&x, y, &params, &spec, DEFAULT_LAMBDA).unwrap();
                let fd = fd_gradient(&x, y, &params, &spec, DEFAULT_LAMBDA, FD_EPSILON).unwrap();
                let include_router = kind != GateKind::Dense;
                let err = gradient_check_error(&analytic, &fd, include_router);
                assert!(err < 1e-5, "{kind} seed {seed}: max rel err {err}");
            }
        }
    }

    #[test]
    fn gradient_check_hard_kind_w_at_fixed_mask() {
        // Representation gradient only; theta is excluded across hard gates.
        for seed in 0..10u64 {
            let (spec, params) = toy(GateKind::DgHard, seed);
            let mut rng = RngStream::new(2000 + seed);
            let x = random_input(&mut rng, 6);
            let (_, analytic) = backward(&x, 1, &params, &spec, DEFAULT_LAMBDA).unwrap();
            let fd = fd_gradient(&x, 1, &params, &spec, DEFAULT_LAMBDA, FD_EPSILON).unwrap();
            let err = gradient_check_error(&analytic, &fd, false);
            assert!(err < 1e-5, "seed {seed}: max rel err {err}");
        }
    }

    #[test]
    fn saturated_correct_prediction_has_tiny_gradient() {
        let (spec, mut params) = toy(GateKind::DgSoft, 3);
        // Crank the correct class's output bias so softmax saturates.
        let Head::Single(out) = &mut params.head else {
            unreachable!()
        };
        out.b[1] = 60.0;
        let mut rng = RngStream::new(7);
        let x = random_input(&mut rng, 6);
        let (loss, grads) = backward(&x, 1, &params, &spec, 0.0).unwrap();
        assert!(loss < 1e-9, "loss {loss}");
        assert!(grads.max_abs() < 1e-9, "max grad {}", grads.max_abs());
    }

    #[test]
    fn all_zero_hard_mask_zeroes_masked_rows() {
        let (_, mut params) = toy(GateKind::DgHard, 5);
        let router = params.router.as_mut().unwrap();
        router.w = Matrix::zeros(4, 4);
        router.b = vec![-10.0; 4];
        let spec = GateSpec::dg_hard(0.0);
        let mut rng = RngStream::new(11);
        let x = random_input(&mut rng, 6);
        let (_, grads) = backward(&x, 0, &params, &spec, DEFAULT_LAMBDA).unwrap();
        // Mask is all zeros: every input row and output column is dead.
        assert!(grads.d_input.w.data().iter().all(|&v| v == 0.0));
        let Head::Single(d_out) = &grads.d_head else {
            unreachable!()
        };
        assert!(d_out.w.data().iter().all(|&v| v == 0.0));
        // Output bias still learns.
        assert!(d_out.b.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn hard_kind_inactive_units_get_zero_w_gradient() {
        for seed in 0..10u64 {
            let (spec, params) = toy(GateKind::DgHard, 40 + seed);
            let mut rng = RngStream::new(seed);
            let x = random_input(&mut rng, 6);
            let fwd = masked_forward(&x, &params, &spec).unwrap();
            let (_, grads) = backward(&x, 2, &params, &spec, DEFAULT_LAMBDA).unwrap();
            let Head::Single(d_out) = &grads.d_head else {
                unreachable!()
            };
            for i in 0..4 {
                if fwd.mask.values[i] == 0.0 {
                    assert!(grads.d_input.w.row(i).iter().all(|&v| v == 0.0));
                    assert_eq!(grads.d_input.b[i], 0.0);
                    for j in 0..3 {
                        assert_eq!(d_out.w.get(j, i), 0.0);
                    }
                }
            }
        }
    }

    fn apply_full_sgd(params: &mut ModelParams, grads: &Grads, eta: f64) {
        fn step(a: &mut Affine, g: &Affine, eta: f64) {
            for (w, gw) in a.w.data_mut().iter_mut().zip(g.w.data()) {
                *w -= eta * gw;
            }
            for (b, gb) in a.b.iter_mut().zip(&g.b) {
                *b -= eta * gb;
            }
        }
        step(&mut params.input, &grads.d_input, eta);
        match (&mut params.head, &grads.d_head) {
            (Head::Single(a), Head::Single(g)) => step(a, g, eta),
            (Head::Experts(es), Head::Experts(gs)) => {
                for (a, g) in es.iter_mut().zip(gs) {
                    step(a, g, eta);
                }
            }
            _ => unreachable!(),
        }
        if let (Some(r), Some(g)) = (params.router.as_mut(), grads.d_router.as_ref()) {
            step(r, g, eta);
        }
    }

    #[test]
    fn sgd_step_decreases_per_sample_loss() {
        let mut decreased = 0;
        let mut total = 0;
        for kind in [GateKind::DgSoft, GateKind::DgAnneal, GateKind::MoeSoft] {
            for seed in 0..100u64 {
                let (spec, mut params) = toy(kind, 300 + seed);
                let mut rng = RngStream::new(seed);
                let x = random_input(&mut rng, 6);
                let y = (seed % 3) as usize;
                let before = loss_value(&x, y, &params, &spec, DEFAULT_LAMBDA).unwrap();
                let (_, grads) = backward(&x, y, &params, &spec, DEFAULT_LAMBDA).unwrap();
                apply_full_sgd(&mut params, &grads, 1e-3);
                let after = loss_value(&x, y, &params, &spec, DEFAULT_LAMBDA).unwrap();
                total += 1;
                if after < before {
                    decreased += 1;
                }
            }
        }
        assert!(
            decreased * 100 >= total * 95,
            "only {decreased}/{total} instances decreased"
        );
    }

    #[test]
    fn fd_on_quadratic_toy() {
        // f(w) = w^2 has derivative 6 at w = 3; the central difference with
        // eps = 1e-5 lands within 1e-8.
        let f = |w: f64| w * w;
        let eps = 1e-5;
        let fd = (f(3.0 + eps) - f(3.0 - eps)) / (2.0 * eps);
        assert!((fd - 6.0).abs() < 1e-8);
    }

    #[test]
    fn ste_rejects_soft_kinds() {
        let (spec, params) = toy(GateKind::DgSoft, 1);
        let err = ste_backward(&[0.0; 6], 0, &params, &spec, 0.0).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }

    #[test]
    fn ste_w_gradient_matches_backward_bit_exactly() {
        for seed in 0..10u64 {
            for kind in [GateKind::DgHard, GateKind::MoeTop1] {
                let (spec, params) = toy(kind, 70 + seed);
                let mut rng = RngStream::new(seed);
                let x = random_input(&mut rng, 6);
                let (loss_a, plain) = backward(&x, 0, &params, &spec, DEFAULT_LAMBDA).unwrap();
                let (loss_b, ste) = ste_backward(&x, 0, &params, &spec, DEFAULT_LAMBDA).unwrap();
                assert_eq!(loss_a, loss_b);
                assert_eq!(plain.d_input.w.data(), ste.d_input.w.data());
                assert_eq!(plain.d_input.b, ste.d_input.b);
                match (&plain.d_head, &ste.d_head) {
                    (Head::Single(a), Head::Single(b)) => {
                        assert_eq!(a.w.data(), b.w.data());
                        assert_eq!(a.b, b.b);
                    }
                    (Head::Experts(xs), Head::Experts(ys)) => {
                        for (a, b) in xs.iter().zip(ys) {
                            assert_eq!(a.w.data(), b.w.data());
                            assert_eq!(a.b, b.b);
                        }
                    }
                    _ => unreachable!(),
                }
            }
        }
    }

    #[test]
    fn ste_theta_gradient_equals_soft_twin_at_zero_theta() {
        let (spec, mut params) = toy(GateKind::DgHard, 90);
        let router = params.router.as_mut().unwrap();
        router.w = Matrix::zeros(4, 4);
        router.b = vec![0.0; 4];
        let mut rng = RngStream::new(31);
        let x = random_input(&mut rng, 6);

        let (_, ste) = ste_backward(&x, 1, &params, &spec, DEFAULT_LAMBDA).unwrap();
        let soft_spec = GateSpec::dg_soft(STE_TEMPERATURE).unwrap();
        let (_, twin) = backward(&x, 1, &params, &soft_spec, DEFAULT_LAMBDA).unwrap();

        let a = ste.d_router.as_ref().unwrap();
        let b = twin.d_router.as_ref().unwrap();
        assert_eq!(a.w.data(), b.w.data());
        assert_eq!(a.b, b.b);
        // At theta = 0 with T = 1 the surrogate mask is exactly 0.5.
        let fwd_soft = masked_forward(&x, &params, &soft_spec).unwrap();
        assert_eq!(fwd_soft.mask.values, vec![0.5; 4]);
    }

    #[test]
    fn ste_saturated_gate_gradient_vanishes() {
        let (spec, mut params) = toy(GateKind::DgHard, 91);
        let router = params.router.as_mut().unwrap();
        router.w = Matrix::zeros(4, 4);
        router.b = vec![25.0, -25.0, 30.0, -30.0];
        let mut rng = RngStream::new(17);
        let x = random_input(&mut rng, 6);
        let (_, ste) = ste_backward(&x, 0, &params, &spec, DEFAULT_LAMBDA).unwrap();
        let r = ste.d_router.as_ref().unwrap();
        let max = r
            .w
            .data()
            .iter()
            .chain(&r.b)
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 1e-8, "saturated surrogate gradient {max}");
    }

    #[test]
    fn unmasked_backward_reaches_inactive_units() {
        let (spec, params) = toy(GateKind::DgHard, 45);
        let mut rng = RngStream::new(3);
        let x = random_input(&mut rng, 6);
        let fwd = masked_forward(&x, &params, &spec).unwrap();
        let inactive: Vec<usize> = (0..4).filter(|&i| fwd.mask.values[i] == 0.0).collect();
        assert!(!inactive.is_empty(), "need an inactive unit for this seed");
        let (_, grads) = unmasked_backward(&x, 0, &params, &spec, DEFAULT_LAMBDA).unwrap();
        let touched = inactive
            .iter()
            .any(|&i| grads.d_input.w.row(i).iter().any(|&v| v != 0.0));
        assert!(touched);
        // No routing gradient from the all-ones path.
        let r = grads.d_router.as_ref().unwrap();
        assert!(r.w.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn active_set_consistency_between_forward_and_trace() {
        let (spec, params) = toy(GateKind::DgSoft, 46);
        let mut rng = RngStream::new(9);
        let x = random_input(&mut rng, 6);
        let fwd = masked_forward(&x, &params, &spec).unwrap();
        let again = active_set(
            &GateMask {
                values: fwd.mask.values.clone(),
            },
            crate::gatenet::DEFAULT_ACTIVE_TAU,
        );
        assert_eq!(fwd.trace.active, again);
    }
}
