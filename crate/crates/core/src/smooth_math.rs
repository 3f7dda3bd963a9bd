//! Shrinkage kernels, their softplus-smoothed surrogates and the LASSO
//! objectives built on them.
//!
//! Every softplus is evaluated as `max(a, 0) + ln(1 + e^{-|a|})`, so the
//! kernels stay finite for arguments far beyond the `exp` overflow point.

use std::f64::consts::LN_2;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::problem_gen::ProblemInstance;

/// Sharpness `p` of the smooth approximations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothingConfig {
    p: f64,
}

impl SmoothingConfig {
    pub fn new(p: f64) -> Result<Self> {
        if !(p > 0.0 && p.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "smoothing sharpness p must be positive, got {p}"
            )));
        }
        Ok(Self { p })
    }

    pub fn p(&self) -> f64 {
        self.p
    }
}

/// `ln(1 + e^a)`
#[inline]
pub fn softplus(a: f64) -> f64 {
    a.max(0.0) + (-a.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(q: f64) -> f64 {
    if q >= 0.0 {
        1.0 / (1.0 + (-q).exp())
    } else {
        let e = q.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_vec(q: &DVector<f64>) -> DVector<f64> {
    q.map(sigmoid)
}

/// `sign(q) max(|q| - tau, 0)`
#[inline]
pub fn soft_threshold(q: f64, tau: f64) -> f64 {
    if q > tau {
        q - tau
    } else if q < -tau {
        q + tau
    } else {
        0.0
    }
}

pub fn soft_threshold_vec(q: &DVector<f64>, tau: f64) -> DVector<f64> {
    q.map(|v| soft_threshold(v, tau))
}

/// `(softplus(p(q - tau)) - softplus(p(-q - tau))) / p`
#[inline]
pub fn smooth_soft_threshold(q: f64, tau: f64, p: f64) -> f64 {
    (softplus(p * (q - tau)) - softplus(p * (-q - tau))) / p
}

pub fn smooth_soft_threshold_vec(q: &DVector<f64>, tau: f64, p: f64) -> DVector<f64> {
    q.map(|v| smooth_soft_threshold(v, tau, p))
}

/// Derivative of [`smooth_soft_threshold`] in `q`.
#[inline]
pub fn smooth_soft_threshold_dq(q: f64, tau: f64, p: f64) -> f64 {
    sigmoid(p * (q - tau)) + sigmoid(p * (-q - tau))
}

pub fn smooth_soft_threshold_dq_vec(q: &DVector<f64>, tau: f64, p: f64) -> DVector<f64> {
    q.map(|v| smooth_soft_threshold_dq(v, tau, p))
}

/// Derivative of [`smooth_soft_threshold`] in `tau`.
#[inline]
pub fn smooth_soft_threshold_dtau(q: f64, tau: f64, p: f64) -> f64 {
    sigmoid(p * (-q - tau)) - sigmoid(p * (q - tau))
}

/// Smoothed absolute value, `(softplus(px) + softplus(-px) - 2 ln 2) / p`.
#[inline]
pub fn smooth_abs(x: f64, p: f64) -> f64 {
    // softplus(a) + softplus(-a) = |a| + 2 ln(1 + e^{-|a|})
    let a = (p * x).abs();
    (a + 2.0 * (-a).exp().ln_1p() - 2.0 * LN_2) / p
}

pub fn smooth_l1(x: &DVector<f64>, p: f64) -> f64 {
    x.iter().map(|&v| smooth_abs(v, p)).sum()
}

/// Gradient of [`smooth_l1`]: `2σ(px) - 1` per entry.
pub fn smooth_l1_grad(x: &DVector<f64>, p: f64) -> DVector<f64> {
    x.map(|v| 2.0 * sigmoid(p * v) - 1.0)
}

/// LASSO objective `‖y - Ax‖²/2 + λ‖x‖₁`.
pub fn objective(x: &DVector<f64>, prob: &ProblemInstance) -> Result<f64> {
    prob.check_signal("objective", x)?;
    Ok(0.5 * prob.residual(x).norm_squared() + prob.lambda * x.lp_norm(1))
}

/// Surrogate `‖y - Ax‖²/2 + λ·smooth_l1(x)`.
pub fn surrogate_objective(x: &DVector<f64>, prob: &ProblemInstance, p: f64) -> Result<f64> {
    prob.check_signal("surrogate_objective", x)?;
    Ok(0.5 * prob.residual(x).norm_squared() + prob.lambda * smooth_l1(x, p))
}

/// `Aᵀ(Ax - y) + λ(2σ(px) - 1)`
pub fn surrogate_gradient(x: &DVector<f64>, prob: &ProblemInstance, p: f64) -> Result<DVector<f64>> {
    prob.check_signal("surrogate_gradient", x)?;
    Ok(prob.ls_gradient(x) + smooth_l1_grad(x, p) * prob.lambda)
}
