//! Architecture-searched ISTA/FISTA forward steps.
//!
//! Each iteration chooses, per slot, between the gradient step `f` and the
//! shrinkage step `g` (slots `r` and `x`), and for FISTA between the
//! momentum point `h` and the plain iterate (slot `z`). The choice is a
//! two-way softmax over structural parameters `β`. In [`ForwardMode::Hard`]
//! the softmax is rounded to a one-hot selection and `g` is the exact soft
//! threshold; [`ForwardMode::Soft`] mixes with the raw weights and the
//! smoothed threshold, giving a map that is differentiable everywhere.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::classic_solvers::{gradient_step, momentum_point, next_momentum_scalar};
use crate::error::{Error, Result};
use crate::problem_gen::ProblemInstance;
use crate::smooth_math::{smooth_soft_threshold_vec, soft_threshold_vec, SmoothingConfig};

/// `(value for k = 1, value for k = 2)`
pub type Pair = [f64; 2];

/// β = (1, -1): selects the first operation after rounding.
pub const SELECT_FIRST: Pair = [1.0, -1.0];
/// β = (-1, 1): selects the second operation after rounding.
pub const SELECT_SECOND: Pair = [-1.0, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuralParams {
    pub beta_r: Pair,
    pub beta_x: Pair,
    pub beta_z: Option<Pair>,
    pub gamma: f64,
}

impl StructuralParams {
    /// `r = f(x)`, `x⁺ = g(r)`: plain ISTA.
    pub fn ista(gamma: f64) -> Self {
        Self {
            beta_r: SELECT_FIRST,
            beta_x: SELECT_SECOND,
            beta_z: None,
            gamma,
        }
    }

    /// ISTA slots plus the momentum point in the `z` slot: plain FISTA.
    pub fn fista(gamma: f64) -> Self {
        Self {
            beta_z: Some(SELECT_FIRST),
            ..Self::ista(gamma)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "gamma must be positive and finite, got {}",
                self.gamma
            )));
        }
        let betas = self
            .beta_r
            .iter()
            .chain(&self.beta_x)
            .chain(self.beta_z.iter().flatten());
        if betas.into_iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidArgument("structural parameters must be finite".into()));
        }
        Ok(())
    }
}

/// Two-way softmax, shifted by the max for stability.
pub fn softmax_weights(beta: Pair) -> Pair {
    let m = beta[0].max(beta[1]);
    let e1 = (beta[0] - m).exp();
    let e2 = (beta[1] - m).exp();
    let sum = e1 + e2;
    [e1 / sum, e2 / sum]
}

/// One-hot rounding; a tie selects the first operation.
pub fn round_weights(soft: Pair) -> Pair {
    if soft[0] >= soft[1] {
        [1.0, 0.0]
    } else {
        [0.0, 1.0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepWeights {
    pub soft_r: Pair,
    pub soft_x: Pair,
    pub soft_z: Option<Pair>,
    pub hard_r: Pair,
    pub hard_x: Pair,
    pub hard_z: Option<Pair>,
}

impl StepWeights {
    pub fn from_params(params: &StructuralParams) -> Self {
        let soft_r = softmax_weights(params.beta_r);
        let soft_x = softmax_weights(params.beta_x);
        let soft_z = params.beta_z.map(softmax_weights);
        Self {
            soft_r,
            soft_x,
            soft_z,
            hard_r: round_weights(soft_r),
            hard_x: round_weights(soft_x),
            hard_z: soft_z.map(round_weights),
        }
    }
}

/// Gradient step `f(v) = v - γAᵀ(Av - y)`.
pub fn f_step(v: &DVector<f64>, prob: &ProblemInstance, gamma: f64) -> Result<DVector<f64>> {
    prob.check_signal("f_step", v)?;
    Ok(gradient_step(v, prob, gamma))
}

/// Shrinkage step `g(v) = S_{γλ}(v)`.
pub fn g_step(v: &DVector<f64>, prob: &ProblemInstance, gamma: f64) -> Result<DVector<f64>> {
    prob.check_signal("g_step", v)?;
    Ok(soft_threshold_vec(v, gamma * prob.lambda))
}

/// Smoothed shrinkage `g̃(v) = S̃_{γλ}(v)`.
pub fn g_smooth_step(v: &DVector<f64>, prob: &ProblemInstance, gamma: f64, p: f64) -> DVector<f64> {
    smooth_soft_threshold_vec(v, gamma * prob.lambda, p)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ForwardMode {
    Hard,
    Soft { p: f64 },
}

impl ForwardMode {
    fn validate(self) -> Result<()> {
        if let ForwardMode::Soft { p } = self {
            SmoothingConfig::new(p)?;
        }
        Ok(())
    }
}

/// Iterates around one step `t -> t + 1`.
///
/// `x_t` (and, for FISTA, `z_t`, `s_t`) describe the start of the step. The
/// `*_next` fields and `r_t` are filled by a forward step and consumed by the
/// hypergradient routines; [`SolverState::advance`] then shifts them down.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverState {
    pub t: usize,
    pub x_t: DVector<f64>,
    pub z_t: Option<DVector<f64>>,
    pub s_t: Option<f64>,
    pub r_t: Option<DVector<f64>>,
    pub x_next: Option<DVector<f64>>,
    pub z_next: Option<DVector<f64>>,
    pub s_next: Option<f64>,
}

impl SolverState {
    pub fn ista(x0: DVector<f64>) -> Self {
        Self {
            t: 0,
            x_t: x0,
            z_t: None,
            s_t: None,
            r_t: None,
            x_next: None,
            z_next: None,
            s_next: None,
        }
    }

    /// `z⁰ = x⁰`, `s⁰ = 1`.
    pub fn fista(x0: DVector<f64>) -> Self {
        Self {
            z_t: Some(x0.clone()),
            s_t: Some(1.0),
            ..Self::ista(x0)
        }
    }

    pub fn has_momentum(&self) -> bool {
        self.z_t.is_some()
    }

    /// Point the `r`/`x` slots are applied to: `z_t` for FISTA, else `x_t`.
    pub fn step_input(&self) -> &DVector<f64> {
        self.z_t.as_ref().unwrap_or(&self.x_t)
    }

    /// Output of the completed step: `z_next` for FISTA, else `x_next`.
    pub fn estimate_next(&self) -> Result<&DVector<f64>> {
        if self.has_momentum() {
            self.z_next.as_ref().ok_or(Error::MissingState("z_next"))
        } else {
            self.x_next.as_ref().ok_or(Error::MissingState("x_next"))
        }
    }

    /// Current estimate: `z_t` for FISTA, else `x_t`.
    pub fn estimate(&self) -> &DVector<f64> {
        self.step_input()
    }

    /// Moves to `t + 1` after a forward step.
    pub fn advance(self) -> Result<Self> {
        let x_next = self.x_next.ok_or(Error::MissingState("x_next"))?;
        let (z_t, s_t) = if self.z_t.is_some() {
            (
                Some(self.z_next.ok_or(Error::MissingState("z_next"))?),
                Some(self.s_next.ok_or(Error::MissingState("s_next"))?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            t: self.t + 1,
            x_t: x_next,
            z_t,
            s_t,
            r_t: None,
            x_next: None,
            z_next: None,
            s_next: None,
        })
    }
}

fn mix_slot(
    v: &DVector<f64>,
    prob: &ProblemInstance,
    gamma: f64,
    soft: Pair,
    hard: Pair,
    mode: ForwardMode,
) -> DVector<f64> {
    match mode {
        // only the selected branch is evaluated, so the result is bitwise the
        // plain f or g output
        ForwardMode::Hard => {
            if hard[0] == 1.0 {
                gradient_step(v, prob, gamma)
            } else {
                soft_threshold_vec(v, gamma * prob.lambda)
            }
        }
        ForwardMode::Soft { p } => {
            gradient_step(v, prob, gamma) * soft[0] + g_smooth_step(v, prob, gamma, p) * soft[1]
        }
    }
}

/// `(r, x⁺)` for the `r` and `x` slots applied to `input`.
fn slots_rx(
    input: &DVector<f64>,
    params: &StructuralParams,
    weights: &StepWeights,
    mode: ForwardMode,
    prob: &ProblemInstance,
) -> (DVector<f64>, DVector<f64>) {
    let r = mix_slot(input, prob, params.gamma, weights.soft_r, weights.hard_r, mode);
    let x_next = mix_slot(&r, prob, params.gamma, weights.soft_x, weights.hard_x, mode);
    (r, x_next)
}

fn check_step(state: &SolverState, params: &StructuralParams, mode: ForwardMode, prob: &ProblemInstance) -> Result<()> {
    params.validate()?;
    mode.validate()?;
    prob.check_signal("x_t", &state.x_t)
}

/// One AS-ISTA step from `x_t`; fills `r_t` and `x_next`.
pub fn as_ista_step(
    state: &SolverState,
    params: &StructuralParams,
    mode: ForwardMode,
    prob: &ProblemInstance,
) -> Result<SolverState> {
    check_step(state, params, mode, prob)?;
    let weights = StepWeights::from_params(params);
    let (r, x_next) = slots_rx(&state.x_t, params, &weights, mode, prob);
    Ok(SolverState {
        r_t: Some(r),
        x_next: Some(x_next),
        ..state.clone()
    })
}

/// One AS-FISTA step: the `r`/`x` slots act on `z_t`, then `s` and `z` are
/// updated. Fills `r_t`, `x_next`, `s_next` and `z_next`.
pub fn as_fista_step(
    state: &SolverState,
    params: &StructuralParams,
    mode: ForwardMode,
    prob: &ProblemInstance,
) -> Result<SolverState> {
    check_step(state, params, mode, prob)?;
    let z_t = state.z_t.as_ref().ok_or(Error::MissingState("z_t"))?;
    let s_t = state.s_t.ok_or(Error::MissingState("s_t"))?;
    if !(s_t >= 1.0) {
        return Err(Error::InvalidArgument(format!("momentum scalar must be >= 1, got {s_t}")));
    }
    let beta_z = params.beta_z.ok_or(Error::MissingState("beta_z"))?;
    prob.check_signal("z_t", z_t)?;

    let weights = StepWeights::from_params(params);
    let (r, x_next) = slots_rx(z_t, params, &weights, mode, prob);
    let s_next = next_momentum_scalar(s_t);
    let z_next = match mode {
        ForwardMode::Hard => {
            if round_weights(softmax_weights(beta_z))[0] == 1.0 {
                momentum_point(&x_next, &state.x_t, s_t, s_next)
            } else {
                x_next.clone()
            }
        }
        // w1 h + w2 x⁺ written as x⁺ + w1 (h - x⁺), exact in x⁺ when s_t = 1
        ForwardMode::Soft { .. } => {
            let w = softmax_weights(beta_z);
            &x_next + (&x_next - &state.x_t) * (w[0] * (s_t - 1.0) / s_next)
        }
    };
    Ok(SolverState {
        r_t: Some(r),
        x_next: Some(x_next),
        z_next: Some(z_next),
        s_next: Some(s_next),
        ..state.clone()
    })
}

/// Dispatches on whether `state` carries momentum.
pub fn as_step(
    state: &SolverState,
    params: &StructuralParams,
    mode: ForwardMode,
    prob: &ProblemInstance,
) -> Result<SolverState> {
    if state.has_momentum() {
        as_fista_step(state, params, mode, prob)
    } else {
        as_ista_step(state, params, mode, prob)
    }
}
