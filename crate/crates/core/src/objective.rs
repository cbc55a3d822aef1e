//! Training objective: L1 camera loss plus a three-part depth loss
//! (squared regression, confidence-weighted uncertainty, spatial-gradient
//! L1), the closed-form optimal confidence, and a central-difference
//! gradient checker.
//!
//! All depth terms are means over pixels.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraParams, DepthMap};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.2, gamma: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha > 0.0 && self.gamma > 0.0 {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "loss weights must be positive, got alpha = {}, gamma = {}",
                self.alpha, self.gamma
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cam: f64,
    pub reg: f64,
    pub unc: f64,
    pub grad: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(cam: f64, reg: f64, unc: f64, grad: f64) -> Self {
        LossBreakdown {
            cam,
            reg,
            unc,
            grad,
            total: cam + reg + unc + grad,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.cam, self.reg, self.unc, self.grad, self.total].iter().all(|v| v.is_finite())
    }

    /// Component-wise mean of several breakdowns.
    pub fn mean(parts: &[LossBreakdown]) -> LossBreakdown {
        let n = parts.len().max(1) as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
        LossBreakdown::new(sum(|b| b.cam), sum(|b| b.reg), sum(|b| b.unc), sum(|b| b.grad))
    }
}

/// `‖T̂−T‖₁ + ‖R̂−R‖₁ + |f̂−f|`, the rotation term over all nine entries.
pub fn camera_loss(pred: &CameraParams, gt: &CameraParams) -> f64 {
    let dr: f64 = (pred.rotation - gt.rotation).iter().map(|v| v.abs()).sum();
    let dt: f64 = (pred.translation - gt.translation).iter().map(|v| v.abs()).sum();
    dt + dr + (pred.focal - gt.focal).abs()
}

/// Gradient of [`camera_loss`] with respect to the rotation, translation and
/// focal of the prediction (sign of each residual, zero at zero).
pub fn camera_loss_grad(pred: &CameraParams, gt: &CameraParams) -> (Matrix3<f64>, Vector3<f64>, f64) {
    let sign = |v: f64| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
    (
        (pred.rotation - gt.rotation).map(sign),
        (pred.translation - gt.translation).map(sign),
        sign(pred.focal - gt.focal),
    )
}

/// Forward differences along x (columns) and y (rows); the last column of
/// `gx` and last row of `gy` are zero (edge replicated).
pub fn spatial_gradient(d: &Matrix) -> Result<(Matrix, Matrix)> {
    let (h, w) = d.shape();
    if h < 2 || w < 2 {
        return Err(Error::invalid(format!("spatial gradient needs at least 2x2, got {h}x{w}")));
    }
    let gx = Matrix::from_fn(h, w, |r, c| if c + 1 < w { d[(r, c + 1)] - d[(r, c)] } else { 0.0 });
    let gy = Matrix::from_fn(h, w, |r, c| if r + 1 < h { d[(r + 1, c)] - d[(r, c)] } else { 0.0 });
    Ok((gx, gy))
}

/// Depth-loss components; `cam` is left at zero.
pub fn depth_loss(pred: &DepthMap, gt: &Matrix, w: &LossWeights) -> Result<LossBreakdown> {
    depth_loss_with_grad(pred, gt, w).map(|(l, _)| l)
}

/// Gradients of the summed depth loss with respect to the predicted depth
/// and confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthLossGrad {
    pub d_depth: Matrix,
    pub d_confidence: Matrix,
}

pub fn depth_loss_with_grad(pred: &DepthMap, gt: &Matrix, w: &LossWeights) -> Result<(LossBreakdown, DepthLossGrad)> {
    if pred.depth.shape() != gt.shape() || pred.confidence.shape() != gt.shape() {
        return Err(Error::shape("depth_loss", pred.depth.shape_str(), gt.shape_str()));
    }
    pred.depth.ensure_finite("predicted depth")?;
    pred.confidence.ensure_finite("predicted confidence")?;
    if let Some(c) = pred.confidence.data().iter().find(|&&c| c <= 0.0) {
        return Err(Error::invalid(format!("confidence must be positive, got {c}")));
    }
    let (h, wd) = gt.shape();
    let n = (h * wd) as f64;
    let mut reg = 0.0;
    let mut unc = 0.0;
    let mut d_depth = Matrix::zeros(h, wd);
    let mut d_conf = Matrix::zeros(h, wd);
    for ((i, &p), &g) in pred.depth.data().iter().enumerate().zip(gt.data()) {
        let c = pred.confidence.data()[i];
        let r = p - g;
        reg += r * r;
        unc += w.gamma * r * r * c - w.alpha * c.ln();
        d_depth.data_mut()[i] = (2.0 * r + 2.0 * w.gamma * r * c) / n;
        d_conf.data_mut()[i] = (w.gamma * r * r - w.alpha / c) / n;
    }

    let (pgx, pgy) = spatial_gradient(&pred.depth)?;
    let (tgx, tgy) = spatial_gradient(gt)?;
    let sign = |v: f64| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
    let mut grad = 0.0;
    for r in 0..h {
        for c in 0..wd {
            let ex = pgx[(r, c)] - tgx[(r, c)];
            let ey = pgy[(r, c)] - tgy[(r, c)];
            grad += ex.abs() + ey.abs();
            if c + 1 < wd {
                let s = sign(ex) / n;
                d_depth[(r, c + 1)] += s;
                d_depth[(r, c)] -= s;
            }
            if r + 1 < h {
                let s = sign(ey) / n;
                d_depth[(r + 1, c)] += s;
                d_depth[(r, c)] -= s;
            }
        }
    }
    Ok((
        LossBreakdown::new(0.0, reg / n, unc / n, grad / n),
        DepthLossGrad {
            d_depth,
            d_confidence: d_conf,
        },
    ))
}

/// Per-pixel uncertainty objective `γ r² C − α ln C`.
pub fn uncertainty_objective(confidence: f64, r_sq: f64, w: &LossWeights) -> f64 {
    w.gamma * r_sq * confidence - w.alpha * confidence.ln()
}

/// Minimiser `α / (γ r²)` of the uncertainty objective.
pub fn optimal_confidence(r_sq: f64, w: &LossWeights) -> Result<f64> {
    if !(r_sq > 0.0) {
        return Err(Error::invalid(format!(
            "optimal confidence is unbounded for r² = {r_sq}; the objective keeps increasing confidence"
        )));
    }
    Ok(w.alpha / (w.gamma * r_sq))
}

/// Value of the uncertainty objective at its minimiser, `α − α ln(α / (γ r²))`.
pub fn marginal_penalty(r_sq: f64, w: &LossWeights) -> Result<f64> {
    if !(r_sq > 0.0) {
        return Err(Error::invalid(format!("marginal penalty undefined for r² = {r_sq}")));
    }
    Ok(w.alpha - w.alpha * (w.alpha / (w.gamma * r_sq)).ln())
}

/// Central-difference check of `analytic` against `f` at `point`. Returns
/// the largest `|fd − analytic| / max(1, |analytic|)` over coordinates.
pub fn finite_diff_check<F>(mut f: F, analytic: &[f64], point: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {step}")));
    }
    if analytic.len() != point.len() {
        return Err(Error::shape(
            "finite_diff_check",
            format!("{} coordinates", point.len()),
            format!("{} gradient entries", analytic.len()),
        ));
    }
    let mut x = point.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x)?;
        x[i] = orig - step;
        let minus = f(&x)?;
        x[i] = orig;
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::NonFinite(format!("function value while perturbing coordinate {i}")));
        }
        let fd = (plus - minus) / (2.0 * step);
        worst = worst.max((fd - analytic[i]).abs() / analytic[i].abs().max(1.0));
    }
    Ok(worst)
}
