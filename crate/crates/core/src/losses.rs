//! Reference training objectives with closed-form gradients.
//!
//! `L = L_cls + λ1·L_quat + λ2·L_trans` where `L_cls` is cross-entropy over
//! class probabilities and both regression terms are squared Euclidean
//! errors. Gradients are taken with respect to the predicted quantity and
//! can be checked against central differences with [`finite_diff_check`].

use thiserror::Error;

use crate::geometry::{Quaternion, Translation};

/// Lower clamp applied to probabilities before taking the log.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("dimension mismatch: {0} labels vs {1} probabilities")]
    DimensionMismatch(usize, usize),
    #[error("label vector is not one-hot")]
    NotOneHot,
    #[error("loss weight {0} must be nonnegative")]
    NegativeWeight(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    lambda1: f64,
    lambda2: f64,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self, LossError> {
        for w in [lambda1, lambda2] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(LossError::NegativeWeight(w));
            }
        }
        Ok(Self { lambda1, lambda2 })
    }

    pub fn lambda1(&self) -> f64 {
        self.lambda1
    }

    pub fn lambda2(&self) -> f64 {
        self.lambda2
    }
}

impl Default for LossWeights {
    /// Both weights 1.0; no particular values are implied by the objective.
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 1.0 }
    }
}

fn check_one_hot(y: &[f64], y_hat: &[f64]) -> Result<(), LossError> {
    if y.len() != y_hat.len() || y.is_empty() {
        return Err(LossError::DimensionMismatch(y.len(), y_hat.len()));
    }
    let ones = y.iter().filter(|&&v| v == 1.0).count();
    if ones != 1 || y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(LossError::NotOneHot);
    }
    Ok(())
}

/// `-Σ y_i ln(max(ŷ_i, 1e-12))` for a one-hot `y`.
pub fn cls_cross_entropy(y: &[f64], y_hat: &[f64]) -> Result<f64, LossError> {
    check_one_hot(y, y_hat)?;
    Ok(y.iter()
        .zip(y_hat)
        .filter(|(&yi, _)| yi != 0.0)
        .map(|(yi, &p)| -yi * p.max(LOG_CLAMP).ln())
        .sum())
}

/// `∂L_cls/∂ŷ_i = -y_i/ŷ_i`, zero where the clamp is active.
pub fn cls_cross_entropy_grad(y: &[f64], y_hat: &[f64]) -> Result<Vec<f64>, LossError> {
    check_one_hot(y, y_hat)?;
    Ok(y.iter()
        .zip(y_hat)
        .map(|(&yi, &p)| if yi == 0.0 || p < LOG_CLAMP { 0.0 } else { -yi / p })
        .collect())
}

fn aligned(q: &Quaternion, q_hat: Quaternion, hemisphere_align: bool) -> (Quaternion, f64) {
    if hemisphere_align && q.dot(&q_hat) < 0.0 {
        (-q_hat, -1.0)
    } else {
        (q_hat, 1.0)
    }
}

/// `‖q − q̂‖²` over the raw components. With `hemisphere_align`, `q̂` is
/// negated first when it lies in the opposite hemisphere from `q`.
pub fn quat_mse(q: &Quaternion, q_hat: &Quaternion, hemisphere_align: bool) -> f64 {
    let (h, _) = aligned(q, *q_hat, hemisphere_align);
    q.to_array().iter().zip(h.to_array()).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `∂L_quat/∂q̂ = 2(q̂ − s·q)` with `s = -1` when the alignment flips.
pub fn quat_mse_grad(q: &Quaternion, q_hat: &Quaternion, hemisphere_align: bool) -> [f64; 4] {
    let (_, s) = aligned(q, *q_hat, hemisphere_align);
    let (a, b) = (q.to_array(), q_hat.to_array());
    [0, 1, 2, 3].map(|i| 2.0 * (b[i] - s * a[i]))
}

pub fn trans_mse(t: &Translation, t_hat: &Translation) -> f64 {
    let (dx, dy, dz) = (t.x - t_hat.x, t.y - t_hat.y, t.z - t_hat.z);
    dx * dx + dy * dy + dz * dz
}

/// `∂L_trans/∂T̂ = 2(T̂ − T)`.
pub fn trans_mse_grad(t: &Translation, t_hat: &Translation) -> [f64; 3] {
    [2.0 * (t_hat.x - t.x), 2.0 * (t_hat.y - t.y), 2.0 * (t_hat.z - t.z)]
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub cls: f64,
    pub quat: f64,
    pub trans: f64,
}

pub fn total_loss(c: LossComponents, w: LossWeights) -> f64 {
    c.cls + w.lambda1 * c.quat + w.lambda2 * c.trans
}

/// Largest relative discrepancy between an analytic gradient and central
/// differences `(f(x + εe_i) − f(x − εe_i)) / 2ε` at `point`.
///
/// The discrepancy is measured in the max norm relative to the larger of the
/// two gradients' max norms, so components near zero do not blow it up.
/// Returns 0 when both gradients vanish.
pub fn finite_diff_check<F, G>(loss: F, grad: G, point: &[f64], epsilon: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    let analytic = grad(point);
    let mut x = point.to_vec();
    let numeric: Vec<f64> = (0..point.len())
        .map(|i| {
            x[i] = point[i] + epsilon;
            let up = loss(&x);
            x[i] = point[i] - epsilon;
            let down = loss(&x);
            x[i] = point[i];
            (up - down) / (2.0 * epsilon)
        })
        .collect();
    let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let scale = max_abs(&analytic).max(max_abs(&numeric));
    if scale == 0.0 {
        return 0.0;
    }
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    max_abs(&diff) / scale
}
