//! Boundary-weighted structure loss.
//!
//! For a ground-truth mask `g` the pixel weight is
//! `ω = 1 + gain · |avgpool_k(g) − g|` (stride 1, zero padding `k / 2`,
//! padded cells counted in the average). Per image, with `p = σ(logit)`:
//!
//! ```text
//! wBCE = Σ ω·bce(logit, g) / Σ ω
//! wIoU = 1 − (Σ ω·p·g + ε) / (Σ ω·(p + g − p·g) + ε)
//! ```
//!
//! Both terms are averaged over the batch; the total loss sums the
//! structure loss of every decoder head with per-head weights.

use ndarray::{Array2, Array4, ArrayView2, Axis};
use sam3unet_tensor::Var;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub pool_kernel: usize,
    pub weight_gain: f64,
    /// Smoothing added to the IoU numerator and denominator.
    pub epsilon: f64,
    /// One weight per head, coarse to fine.
    pub head_weights: Vec<f64>,
    /// Reject masks with values other than exactly 0 or 1.
    pub strict_binary: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { pool_kernel: 31, weight_gain: 5.0, epsilon: 1.0, head_weights: vec![1.0; 3], strict_binary: false }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pool_kernel == 0 || self.pool_kernel % 2 == 0 {
            return Err(Error::config("loss.pool_kernel", format!("{} is not a positive odd size", self.pool_kernel)));
        }
        if !(self.weight_gain >= 0.0) {
            return Err(Error::config("loss.weight_gain", "must be non-negative"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("loss.epsilon", "must be positive"));
        }
        if self.head_weights.is_empty() || self.head_weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::config("loss.head_weights", "needs at least one finite weight"));
        }
        Ok(())
    }
}

/// Zero-padded `k × k` box mean with stride 1 (divisor `k²` everywhere).
pub fn box_mean(plane: ArrayView2<'_, f64>, kernel: usize) -> Array2<f64> {
    let (h, w) = plane.dim();
    let mut integral = Array2::<f64>::zeros((h + 1, w + 1));
    for i in 0..h {
        for j in 0..w {
            integral[[i + 1, j + 1]] = plane[[i, j]] + integral[[i, j + 1]] + integral[[i + 1, j]] - integral[[i, j]];
        }
    }
    let r = kernel / 2;
    let area = (kernel * kernel) as f64;
    Array2::from_shape_fn((h, w), |(i, j)| {
        let (i0, i1) = (i.saturating_sub(r), (i + r + 1).min(h));
        let (j0, j1) = (j.saturating_sub(r), (j + r + 1).min(w));
        (integral[[i1, j1]] - integral[[i0, j1]] - integral[[i1, j0]] + integral[[i0, j0]]) / area
    })
}

fn check_mask(gt: &Array4<f64>, strict: bool) -> Result<()> {
    if gt.shape()[1] != 1 {
        return Err(Error::Shape(format!("masks must be (B, 1, H, W), got {:?}", gt.shape())));
    }
    if let Some(v) = gt.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Validation(format!("mask value {v} is outside [0, 1]")));
    }
    if strict {
        if let Some(v) = gt.iter().find(|v| **v != 0.0 && **v != 1.0) {
            return Err(Error::Validation(format!("mask value {v} is not binary")));
        }
    }
    Ok(())
}

/// Pixel weights `ω` for a `(B, 1, H, W)` mask batch.
pub fn weight_map(gt: &Array4<f64>, cfg: &LossConfig) -> Result<Array4<f64>> {
    check_mask(gt, cfg.strict_binary)?;
    let mut out = Array4::zeros(gt.raw_dim());
    for (src, mut dst) in gt.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        let plane = src.index_axis(Axis(0), 0);
        let pooled = box_mean(plane, cfg.pool_kernel);
        let mut dst = dst.index_axis_mut(Axis(0), 0);
        ndarray::Zip::from(&mut dst).and(&plane).and(&pooled).for_each(|o, &g, &m| *o = 1.0 + cfg.weight_gain * (m - g).abs());
    }
    Ok(out)
}

fn check_logits(logits: Var<'_>, gt: &Array4<f64>) -> Result<()> {
    if logits.shape() != gt.shape() {
        return Err(Error::Shape(format!("logits {:?} do not match masks {:?}", logits.shape(), gt.shape())));
    }
    Ok(())
}

pub fn weighted_bce<'g>(logits: Var<'g>, gt: &Array4<f64>, weight: &Array4<f64>) -> Result<Var<'g>> {
    check_logits(logits, gt)?;
    let graph = logits.graph();
    let w = graph.constant(weight.clone().into_dyn());
    let per_pixel = logits.bce_with_logits(&gt.clone().into_dyn()).mul(w);
    let axes = [1, 2, 3];
    Ok(per_pixel.sum_keepdims(&axes).div(w.sum_keepdims(&axes)).mean())
}

pub fn weighted_iou<'g>(logits: Var<'g>, gt: &Array4<f64>, weight: &Array4<f64>, epsilon: f64) -> Result<Var<'g>> {
    check_logits(logits, gt)?;
    let graph = logits.graph();
    let w = graph.constant(weight.clone().into_dyn());
    let g = graph.constant(gt.clone().into_dyn());
    let p = logits.sigmoid();
    let axes = [1, 2, 3];
    let inter = p.mul(g).mul(w).sum_keepdims(&axes);
    let union = p.add(g).mul(w).sum_keepdims(&axes).sub(inter);
    Ok(inter.add_scalar(epsilon).div(union.add_scalar(epsilon)).one_minus().mean())
}

/// `wBCE + wIoU` of one head.
pub fn structure_loss<'g>(logits: Var<'g>, gt: &Array4<f64>, cfg: &LossConfig) -> Result<Var<'g>> {
    let weight = weight_map(gt, cfg)?;
    Ok(weighted_bce(logits, gt, &weight)?.add(weighted_iou(logits, gt, &weight, cfg.epsilon)?))
}

/// Weighted sum of per-head structure losses.
pub fn total_loss<'g>(logits: &[Var<'g>], gt: &Array4<f64>, cfg: &LossConfig) -> Result<Var<'g>> {
    if logits.len() != cfg.head_weights.len() {
        return Err(Error::config(
            "loss.head_weights",
            format!("{} weights for {} heads", cfg.head_weights.len(), logits.len()),
        ));
    }
    let weight = weight_map(gt, cfg)?;
    let mut total: Option<Var<'g>> = None;
    for (&head, &lambda) in logits.iter().zip(&cfg.head_weights) {
        let term = weighted_bce(head, gt, &weight)?.add(weighted_iou(head, gt, &weight, cfg.epsilon)?).mul_scalar(lambda);
        total = Some(match total {
            Some(t) => t.add(term),
            None => term,
        });
    }
    Ok(total.expect("at least one head"))
}
