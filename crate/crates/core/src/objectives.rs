//! Training losses and evaluation metrics.
//!
//! Training uses the soft Jaccard loss over probabilities (robust to the
//! heavy foreground/background imbalance of tubular structures) plus mean
//! squared error on the normalized proximity map, combined as
//! `total = lambda * seg + (1 - lambda) * reg`. Evaluation uses hard Dice
//! and Jaccard overlap on thresholded masks.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Var};
use crate::volume::Volume;

pub const JACCARD_EPSILON: f64 = 1e-5;

/// Scalar loss values extracted from one forward pass.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct LossValues {
    pub seg: f64,
    pub reg: f64,
    pub total: f64,
    pub lambda: f64,
}

fn check_same_shape<T: Element>(g: &Graph<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if g.value(a).shape() != g.value(b).shape() {
        return Err(Error::Shape(format!(
            "{what}: prediction shape {:?} does not match target shape {:?}",
            g.value(a).shape(),
            g.value(b).shape()
        )));
    }
    Ok(())
}

/// Soft Jaccard loss `1 - sum(P*Y) / (sum(P) + sum(Y) - sum(P*Y) + eps)`.
///
/// `pred` must hold probabilities in [0, 1]; `target` must be binary.
pub fn jaccard_loss<T: Element>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    epsilon: f64,
) -> Result<Var> {
    check_same_shape(g, pred, target, "jaccard_loss")?;
    let zero = T::zero();
    let one = T::one();
    if !g.value(pred).data().iter().all(|&p| p >= zero && p <= one) {
        return Err(Error::InvalidArg(
            "jaccard_loss: prediction outside [0, 1]".into(),
        ));
    }
    if !g
        .value(target)
        .data()
        .iter()
        .all(|&y| y == zero || y == one)
    {
        return Err(Error::InvalidArg(
            "jaccard_loss: target is not binary".into(),
        ));
    }
    let py = g.mul(pred, target)?;
    let inter = g.sum(py);
    let p_sum = g.sum(pred);
    let y_sum = g.sum(target);
    let sums = g.add(p_sum, y_sum)?;
    let union_ish = g.sub(sums, inter)?;
    let denom = g.add_scalar(union_ish, epsilon);
    let iou = g.div(inter, denom)?;
    let neg = g.scale(iou, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Mean squared error over all elements.
pub fn mse_loss<T: Element>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    check_same_shape(g, pred, target, "mse_loss")?;
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}

/// Weighted multi-task objective. At `lambda == 1` the proximity target is
/// never read and the regression term is skipped outright.
pub fn total_loss<T: Element>(
    g: &mut Graph<T>,
    seg_prob: Var,
    label: Var,
    proximity_pred: Option<Var>,
    proximity_target: Option<Var>,
    lambda: f64,
) -> Result<(Var, LossValues)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArg(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )));
    }
    let seg = jaccard_loss(g, seg_prob, label, JACCARD_EPSILON)?;
    let seg_value = g.value(seg).item()?.to_f64();

    if lambda == 1.0 || proximity_pred.is_none() {
        let total = g.scale(seg, lambda);
        let values = LossValues {
            seg: seg_value,
            reg: 0.0,
            total: g.value(total).item()?.to_f64(),
            lambda,
        };
        return Ok((total, values));
    }
    let (pred, target) = match (proximity_pred, proximity_target) {
        (Some(p), Some(t)) => (p, t),
        _ => {
            return Err(Error::InvalidArg(
                "total_loss: proximity prediction without a proximity target".into(),
            ))
        }
    };
    let reg = mse_loss(g, pred, target)?;
    let reg_value = g.value(reg).item()?.to_f64();
    let seg_w = g.scale(seg, lambda);
    let reg_w = g.scale(reg, 1.0 - lambda);
    let total = g.add(seg_w, reg_w)?;
    let values = LossValues {
        seg: seg_value,
        reg: reg_value,
        total: g.value(total).item()?.to_f64(),
        lambda,
    };
    Ok((total, values))
}

/// Overlap counts for binary volumes; empty/empty is defined as perfect.
fn overlap_counts(pred: &Volume, label: &Volume) -> Result<(u64, u64, u64)> {
    if pred.shape() != label.shape() {
        return Err(Error::Shape(format!(
            "metric shapes differ: {:?} vs {:?}",
            pred.shape(),
            label.shape()
        )));
    }
    if !pred.is_binary() || !label.is_binary() {
        return Err(Error::InvalidArg("metrics require binary volumes".into()));
    }
    let a = pred.as_u8()?;
    let b = label.as_u8()?;
    let mut inter = 0u64;
    let mut na = 0u64;
    let mut nb = 0u64;
    for (&x, &y) in a.iter().zip(b) {
        na += u64::from(x);
        nb += u64::from(y);
        inter += u64::from(x & y);
    }
    Ok((inter, na, nb))
}

/// Soerensen-Dice overlap `2|A.B| / (|A| + |B|)` on the foreground class.
pub fn dice(pred: &Volume, label: &Volume) -> Result<f64> {
    let (inter, na, nb) = overlap_counts(pred, label)?;
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Jaccard index `|A.B| / |A u B|` on the foreground class.
pub fn jac(pred: &Volume, label: &Volume) -> Result<f64> {
    let (inter, na, nb) = overlap_counts(pred, label)?;
    let union = na + nb - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Per-volume metric record as emitted in evaluation reports.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct VolumeMetrics {
    pub dice: f64,
    pub jac: f64,
    pub n_voxels: usize,
}

pub fn volume_metrics(pred: &Volume, label: &Volume) -> Result<VolumeMetrics> {
    Ok(VolumeMetrics {
        dice: dice(pred, label)?,
        jac: jac(pred, label)?,
        n_voxels: label.numel(),
    })
}

/// Threshold a probability volume into a binary mask at 0.5.
pub fn threshold_mask(prob: &Volume) -> Result<Volume> {
    let data = prob.as_f32()?.iter().map(|&p| u8::from(p >= 0.5)).collect();
    Volume::from_u8(prob.shape(), data)
}
