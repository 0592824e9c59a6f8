//! Metric arithmetic for the benchmark tables, kept separate from the
//! protocol so each formula is unit-testable on its own.

use crate::driftlab::{MetricsRecord, RunStatus};
use crate::gatenet::{ActiveSet, Arch, GateMask};
use crate::{Error, Result};

/// Accuracy gained back by adaptation, in percentage points.
pub fn recovery(adapt_acc: f64, drift_before: f64) -> f64 {
    adapt_acc - drift_before
}

/// Clean-distribution accuracy change across adaptation, in percentage
/// points. Negative means forgetting.
pub fn clean_drop(clean_after: f64, clean_before: f64) -> f64 {
    clean_after - clean_before
}

/// Predicted classes for the same samples before and after adaptation.
#[derive(Debug, Clone)]
pub struct PredictionPair<'a> {
    pub before: &'a [usize],
    pub after: &'a [usize],
}

/// Fraction of samples whose predicted class changed.
pub fn flip_pred(pair: &PredictionPair) -> Result<f64> {
    if pair.before.len() != pair.after.len() || pair.before.is_empty() {
        return Err(Error::DimensionMismatch {
            context: "flip_pred",
            expected: pair.before.len().max(1),
            actual: pair.after.len(),
        });
    }
    let flips = pair
        .before
        .iter()
        .zip(pair.after)
        .filter(|(b, a)| b != a)
        .count();
    Ok(flips as f64 / pair.before.len() as f64)
}

/// Routing decisions for the same samples before and after adaptation.
#[derive(Debug, Clone)]
pub struct RoutingPair<'a> {
    pub before: &'a [ActiveSet],
    pub after: &'a [ActiveSet],
}

/// Fraction of samples whose active set changed.
pub fn flip_routing(pair: &RoutingPair) -> Result<f64> {
    if pair.before.len() != pair.after.len() || pair.before.is_empty() {
        return Err(Error::DimensionMismatch {
            context: "flip_routing",
            expected: pair.before.len().max(1),
            actual: pair.after.len(),
        });
    }
    let flips = pair
        .before
        .iter()
        .zip(pair.after)
        .filter(|(b, a)| b.indices != a.indices)
        .count();
    Ok(flips as f64 / pair.before.len() as f64)
}

/// Mean over samples of the fraction of units with mask value above `tau`.
pub fn activation_ratio(masks: &[GateMask], tau: f64) -> Result<f64> {
    let Some(first) = masks.first() else {
        return Err(Error::InvalidInput("activation_ratio of no masks".into()));
    };
    let d = first.len();
    if d == 0 {
        return Err(Error::InvalidInput("zero-width mask".into()));
    }
    let mut total = 0.0;
    for mask in masks {
        if mask.len() != d {
            return Err(Error::DimensionMismatch {
                context: "activation_ratio",
                expected: d,
                actual: mask.len(),
            });
        }
        let active = mask.values.iter().filter(|&&m| m > tau).count();
        total += active as f64 / d as f64;
    }
    Ok(total / masks.len() as f64)
}

/// Normalized compute proxy for an activation ratio under a given layout.
///
/// Counts multiply-accumulates of the affine stages, attributing each MAC to
/// the gated unit that owns it — a DG hidden unit owns its input row and
/// output column, an expert owns its head — and scaling owned MACs by the
/// activation ratio. Routing overhead and shared stages are not part of the
/// account, which is what makes the proxy land on the activation ratio for
/// these layouts (dense = 1.00). This is a compute proxy, not a hardware
/// model.
pub fn flops_proxy(ar: f64, arch: &Arch) -> f64 {
    let (ungated, gated) = if arch.expert_count > 0 {
        (
            0usize,
            arch.expert_count * arch.d_hidden * arch.n_classes,
        )
    } else {
        (
            0usize,
            arch.n_in * arch.d_hidden + arch.d_hidden * arch.n_classes,
        )
    };
    if gated == 0 {
        return 1.0;
    }
    (ungated as f64 + ar * gated as f64) / (ungated + gated) as f64
}

/// One scatter point of the flip/accuracy correlation.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationPoint {
    pub model: String,
    pub mode: String,
    pub flip: f64,
    pub adapt_acc: f64,
}

/// Which flip definition feeds the correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipColumn {
    Pred,
    Routing,
}

/// Pearson correlation over `(x, y)` pairs. Needs at least 3 points.
pub fn pearson(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "pearson needs at least 3 points, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in points {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InsufficientData(
            "degenerate variance in correlation input".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Correlation between a flip column and adaptation accuracy over the OK
/// rows of a benchmark result set, plus the raw scatter points.
pub fn correlate_flip_adaptacc(
    records: &[MetricsRecord],
    column: FlipColumn,
) -> Result<(f64, Vec<CorrelationPoint>)> {
    let mut points = Vec::new();
    for rec in records {
        if rec.status != RunStatus::Ok {
            continue;
        }
        let flip = match column {
            FlipColumn::Pred => rec.flip_pred,
            FlipColumn::Routing => rec.flip_routing,
        };
        if let (Some(flip), Some(adapt_acc)) = (flip, rec.adapt_acc) {
            points.push(CorrelationPoint {
                model: rec.model.clone(),
                mode: rec.mode.clone(),
                flip,
                adapt_acc,
            });
        }
    }
    let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.flip, p.adapt_acc)).collect();
    let r = pearson(&xy)?;
    Ok((r, points))
}
