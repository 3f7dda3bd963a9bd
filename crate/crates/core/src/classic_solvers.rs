//! Fixed-step ISTA and FISTA baselines.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::problem_gen::ProblemInstance;
use crate::smooth_math::{objective, soft_threshold_vec};

// gaps of 1 - λ₂/λ₁ ≈ 0.02 are common at 75x150 and need ~1000 iterations
pub const POWER_MAX_ITERS: usize = 10_000;
pub const POWER_REL_TOL: f64 = 1e-12;

/// Largest eigenvalue of `AᵀA` (= `s_max²`) by power iteration from the
/// all-ones vector. `AᵀA` is applied as two matrix-vector products.
pub fn spectral_norm_sq(a: &DMatrix<f64>) -> Result<f64> {
    let mut v = DVector::from_element(a.ncols(), 1.0 / (a.ncols() as f64).sqrt());
    let mut estimate = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let w = a.tr_mul(&(a * &v));
        let norm = w.norm();
        if norm == 0.0 {
            // the all-ones start can be orthogonal to the top singular vector;
            // a nonzero matrix always has some nonzero column
            if a.iter().all(|x| *x == 0.0) {
                return Err(Error::ZeroMatrix);
            }
            let j = (0..a.ncols())
                .find(|&j| a.column(j).iter().any(|x| *x != 0.0))
                .unwrap_or(0);
            v = DVector::zeros(a.ncols());
            v[j] = 1.0;
            continue;
        }
        // Rayleigh quotient vᵀAᵀAv with ‖v‖ = 1
        let next = v.dot(&w);
        v = w / norm;
        if (next - estimate).abs() <= POWER_REL_TOL * next.abs() {
            return Ok(next);
        }
        estimate = next;
    }
    if estimate > 0.0 {
        Ok(estimate)
    } else {
        Err(Error::ZeroMatrix)
    }
}

/// `1 / s_max²`, the classical step for the LASSO gradient.
pub fn lipschitz_step(prob: &ProblemInstance) -> Result<f64> {
    Ok(1.0 / spectral_norm_sq(&prob.a)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassicRecord {
    pub t: usize,
    pub estimate: DVector<f64>,
    pub objective: f64,
    pub squared_error: f64,
}

/// Iterates `0..=T`, including the starting point.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassicTrace {
    pub records: Vec<ClassicRecord>,
}

impl ClassicTrace {
    fn push(&mut self, t: usize, estimate: &DVector<f64>, prob: &ProblemInstance) -> Result<()> {
        self.records.push(ClassicRecord {
            t,
            estimate: estimate.clone(),
            objective: objective(estimate, prob)?,
            squared_error: prob.squared_error(estimate),
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// `r = v - γAᵀ(Av - y)`
pub fn gradient_step(v: &DVector<f64>, prob: &ProblemInstance, gamma: f64) -> DVector<f64> {
    v - prob.ls_gradient(v) * gamma
}

/// FISTA extrapolation `x⁺ + ((s - 1)/s⁺)(x⁺ - x)`.
pub fn momentum_point(x_next: &DVector<f64>, x: &DVector<f64>, s: f64, s_next: f64) -> DVector<f64> {
    x_next + (x_next - x) * ((s - 1.0) / s_next)
}

/// `s⁺ = (1 + √(1 + 4s²)) / 2`
pub fn next_momentum_scalar(s: f64) -> f64 {
    (1.0 + (1.0 + 4.0 * s * s).sqrt()) / 2.0
}

fn check_args(prob: &ProblemInstance, gamma: f64, x0: &DVector<f64>) -> Result<()> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!("step size must be positive, got {gamma}")));
    }
    prob.check_signal("x0", x0)
}

pub fn ista(
    prob: &ProblemInstance,
    gamma: f64,
    iterations: usize,
    x0: &DVector<f64>,
) -> Result<(DVector<f64>, ClassicTrace)> {
    check_args(prob, gamma, x0)?;
    let tau = gamma * prob.lambda;
    let mut trace = ClassicTrace::default();
    let mut x = x0.clone();
    trace.push(0, &x, prob)?;
    for t in 0..iterations {
        let r = gradient_step(&x, prob, gamma);
        x = soft_threshold_vec(&r, tau);
        trace.push(t + 1, &x, prob)?;
    }
    Ok((x, trace))
}

pub fn fista(
    prob: &ProblemInstance,
    gamma: f64,
    iterations: usize,
    x0: &DVector<f64>,
) -> Result<(DVector<f64>, ClassicTrace)> {
    accelerated(prob, gamma, iterations, x0, true)
}

/// FISTA with the gradient step taken at the momentum point `z`. With
/// `momentum = false` the extrapolation is skipped and `z = x`.
pub(crate) fn accelerated(
    prob: &ProblemInstance,
    gamma: f64,
    iterations: usize,
    x0: &DVector<f64>,
    momentum: bool,
) -> Result<(DVector<f64>, ClassicTrace)> {
    check_args(prob, gamma, x0)?;
    let tau = gamma * prob.lambda;
    let mut trace = ClassicTrace::default();
    let mut x = x0.clone();
    let mut z = x0.clone();
    let mut s = 1.0;
    trace.push(0, &z, prob)?;
    for t in 0..iterations {
        let r = gradient_step(&z, prob, gamma);
        let x_next = soft_threshold_vec(&r, tau);
        let s_next = next_momentum_scalar(s);
        z = if momentum {
            momentum_point(&x_next, &x, s, s_next)
        } else {
            x_next.clone()
        };
        x = x_next;
        s = s_next;
        trace.push(t + 1, &z, prob)?;
    }
    Ok((z, trace))
}
