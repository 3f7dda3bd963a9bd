//! Closed-form one-step hypergradients of the surrogate objective with
//! respect to the step size and the structural parameters, plus a central
//! finite-difference oracle over the soft forward map.
//!
//! The closed forms follow the straight-through convention: iterates come
//! from whatever forward pass produced `state`, but every weight inside a
//! derivative is the unrounded softmax value and every shrinkage is the
//! smoothed `S̃`. Only matrix-vector products with `A` and `Aᵀ` are used, so a
//! full hypergradient set costs `O(MN)`.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::arch_forward::{
    as_step, g_smooth_step, softmax_weights, ForwardMode, Pair, SolverState, StepWeights,
    StructuralParams,
};
use crate::classic_solvers::{gradient_step, lipschitz_step, momentum_point, next_momentum_scalar};
use crate::error::{Error, Result};
use crate::problem_gen::{build_instance, GeneratorConfig, MatrixKind, ProblemInstance};
use crate::smooth_math::{
    smooth_soft_threshold_dq, smooth_soft_threshold_dtau, surrogate_gradient, surrogate_objective,
    SmoothingConfig,
};

/// `∂J̃/∂α` for every online parameter. The second entry of each β pair is
/// the negated first entry.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HypergradSet {
    pub d_gamma: f64,
    pub d_beta_r: Pair,
    pub d_beta_x: Pair,
    pub d_beta_z: Option<Pair>,
}

impl HypergradSet {
    pub fn get(&self, param: HyperParam) -> Option<f64> {
        match param {
            HyperParam::Gamma => Some(self.d_gamma),
            HyperParam::BetaR1 => Some(self.d_beta_r[0]),
            HyperParam::BetaR2 => Some(self.d_beta_r[1]),
            HyperParam::BetaX1 => Some(self.d_beta_x[0]),
            HyperParam::BetaX2 => Some(self.d_beta_x[1]),
            HyperParam::BetaZ1 => self.d_beta_z.map(|d| d[0]),
            HyperParam::BetaZ2 => self.d_beta_z.map(|d| d[1]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_gamma.is_finite()
            && self.d_beta_r.iter().chain(&self.d_beta_x).all(|v| v.is_finite())
            && self.d_beta_z.is_none_or(|d| d.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HyperParam {
    Gamma,
    BetaR1,
    BetaR2,
    BetaX1,
    BetaX2,
    BetaZ1,
    BetaZ2,
}

impl HyperParam {
    pub const ISTA: [HyperParam; 5] = [
        HyperParam::Gamma,
        HyperParam::BetaR1,
        HyperParam::BetaR2,
        HyperParam::BetaX1,
        HyperParam::BetaX2,
    ];
    pub const FISTA: [HyperParam; 7] = [
        HyperParam::Gamma,
        HyperParam::BetaR1,
        HyperParam::BetaR2,
        HyperParam::BetaX1,
        HyperParam::BetaX2,
        HyperParam::BetaZ1,
        HyperParam::BetaZ2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HyperParam::Gamma => "gamma",
            HyperParam::BetaR1 => "beta_r1",
            HyperParam::BetaR2 => "beta_r2",
            HyperParam::BetaX1 => "beta_x1",
            HyperParam::BetaX2 => "beta_x2",
            HyperParam::BetaZ1 => "beta_z1",
            HyperParam::BetaZ2 => "beta_z2",
        }
    }

    /// Copy of `params` with this parameter shifted by `delta`.
    fn shifted(self, params: &StructuralParams, delta: f64) -> Result<StructuralParams> {
        let mut out = *params;
        match self {
            HyperParam::Gamma => out.gamma += delta,
            HyperParam::BetaR1 => out.beta_r[0] += delta,
            HyperParam::BetaR2 => out.beta_r[1] += delta,
            HyperParam::BetaX1 => out.beta_x[0] += delta,
            HyperParam::BetaX2 => out.beta_x[1] += delta,
            HyperParam::BetaZ1 | HyperParam::BetaZ2 => {
                let bz = out.beta_z.as_mut().ok_or(Error::MissingState("beta_z"))?;
                bz[if self == HyperParam::BetaZ1 { 0 } else { 1 }] += delta;
            }
        }
        Ok(out)
    }
}

/// `∂z⁺/∂x⁺ = w_z1 (s⁺ + s - 1)/s⁺ + w_z2` (a scalar multiple of identity).
pub fn momentum_chain_factor(soft_z: Pair, s_t: f64, s_next: f64) -> f64 {
    soft_z[0] * (s_next + s_t - 1.0) / s_next + soft_z[1]
}

struct StepDerivs {
    d_gamma: f64,
    d_beta_r1: f64,
    d_beta_x1: f64,
}

/// Pulls `upstream = ∂J̃/∂x⁺` back through the `x` and `r` slots.
fn pull_back(
    input: &DVector<f64>,
    r: &DVector<f64>,
    upstream: &DVector<f64>,
    params: &StructuralParams,
    prob: &ProblemInstance,
    p: f64,
) -> StepDerivs {
    let w = StepWeights::from_params(params);
    let [wr1, wr2] = w.soft_r;
    let [wx1, wx2] = w.soft_x;
    let gamma = params.gamma;
    let lambda = prob.lambda;
    let tau = gamma * lambda;

    // x slot, applied to r
    let ls_r = prob.ls_gradient(r);
    let f_r = r - &ls_r * gamma;
    let g_r = g_smooth_step(r, prob, gamma, p);
    let d_beta_x1 = wx1 * wx2 * upstream.dot(&(&f_r - &g_r));

    // v = (∂x⁺/∂r)ᵀ upstream with ∂x⁺/∂r = wx1 (I - γAᵀA) + wx2 diag(S̃'(r))
    let ata_up = prob.a.tr_mul(&(&prob.a * upstream));
    let dg_r = r.map(|q| smooth_soft_threshold_dq(q, tau, p));
    let v = (upstream - &ata_up * gamma) * wx1 + upstream.component_mul(&dg_r) * wx2;

    // r slot, applied to the step input
    let ls_u = prob.ls_gradient(input);
    let f_u = input - &ls_u * gamma;
    let g_u = g_smooth_step(input, prob, gamma, p);
    let d_beta_r1 = wr1 * wr2 * v.dot(&(&f_u - &g_u));

    // γ enters f, g̃ and r
    let dr_dgamma = -&ls_u * wr1 + input.map(|q| lambda * smooth_soft_threshold_dtau(q, tau, p)) * wr2;
    let direct = -&ls_r * wx1 + r.map(|q| lambda * smooth_soft_threshold_dtau(q, tau, p)) * wx2;
    let d_gamma = upstream.dot(&direct) + v.dot(&dr_dgamma);

    StepDerivs {
        d_gamma,
        d_beta_r1,
        d_beta_x1,
    }
}

fn completed_rx(state: &SolverState) -> Result<(&DVector<f64>, &DVector<f64>)> {
    Ok((
        state.r_t.as_ref().ok_or(Error::MissingState("r_t"))?,
        state.x_next.as_ref().ok_or(Error::MissingState("x_next"))?,
    ))
}

fn check_p(p: f64) -> Result<()> {
    SmoothingConfig::new(p).map(|_| ())
}

/// Full HGD-AS-ISTA set `{γ, β_r, β_x}` from a completed step.
pub fn hypergrad_all_ista(
    state: &SolverState,
    params: &StructuralParams,
    prob: &ProblemInstance,
    p: f64,
) -> Result<HypergradSet> {
    check_p(p)?;
    if state.has_momentum() {
        return Err(Error::InvalidArgument(
            "ISTA hypergradients need a state without momentum".into(),
        ));
    }
    let (r, x_next) = completed_rx(state)?;
    let upstream = surrogate_gradient(x_next, prob, p)?;
    let d = pull_back(&state.x_t, r, &upstream, params, prob, p);
    Ok(HypergradSet {
        d_gamma: d.d_gamma,
        d_beta_r: [d.d_beta_r1, -d.d_beta_r1],
        d_beta_x: [d.d_beta_x1, -d.d_beta_x1],
        d_beta_z: None,
    })
}

pub fn hypergrad_gamma_ista(
    state: &SolverState,
    params: &StructuralParams,
    prob: &ProblemInstance,
    p: f64,
) -> Result<f64> {
    Ok(hypergrad_all_ista(state, params, prob, p)?.d_gamma)
}

pub fn hypergrad_beta_r_ista(
    state: &SolverState,
    params: &StructuralParams,
    prob: &ProblemInstance,
    p: f64,
) -> Result<Pair> {
    Ok(hypergrad_all_ista(state, params, prob, p)?.d_beta_r)
}

pub fn hypergrad_beta_x_ista(
    state: &SolverState,
    params: &StructuralParams,
    prob: &ProblemInstance,
    p: f64,
) -> Result<Pair> {
    Ok(hypergrad_all_ista(state, params, prob, p)?.d_beta_x)
}

/// Full HGD-AS-FISTA set. The `r`/`x` slot derivatives are those of
/// AS-ISTA at input `z_t`, scaled by [`momentum_chain_factor`]; `∇J̃` is
/// taken at `z_next`.
pub fn hypergrad_all_fista(
    state: &SolverState,
    params: &StructuralParams,
    prob: &ProblemInstance,
    p: f64,
) -> Result<HypergradSet> {
    check_p(p)?;
    let z_t = state.z_t.as_ref().ok_or(Error::MissingState("z_t"))?;
    let s_t = state.s_t.ok_or(Error::MissingState("s_t"))?;
    let s_next = state.s_next.ok_or(Error::MissingState("s_next"))?;
    let z_next = state.z_next.as_ref().ok_or(Error::MissingState("z_next"))?;
    let beta_z = params.beta_z.ok_or(Error::MissingState("beta_z"))?;
    let (r, x_next) = completed_rx(state)?;

    let soft_z = softmax_weights(beta_z);
    let grad_z = surrogate_gradient(z_next, prob, p)?;
    let factor = momentum_chain_factor(soft_z, s_t, s_next);
    let upstream = &grad_z * factor;
    let d = pull_back(z_t, r, &upstream, params, prob, p);

    let coeff = soft_z[0] * soft_z[1] * (s_t - 1.0) / s_next;
    let d_beta_z1 = coeff * grad_z.dot(&(x_next - &state.x_t));

    Ok(HypergradSet {
        d_gamma: d.d_gamma,
        d_beta_r: [d.d_beta_r1, -d.d_beta_r1],
        d_beta_x: [d.d_beta_x1, -d.d_beta_x1],
        d_beta_z: Some([d_beta_z1, -d_beta_z1]),
    })
}

/// Dispatches on whether `state` carries momentum.
pub fn hypergrad_all(
    state: &SolverState,
    params: &StructuralParams,
    prob: &ProblemInstance,
    p: f64,
) -> Result<HypergradSet> {
    if state.has_momentum() {
        hypergrad_all_fista(state, params, prob, p)
    } else {
        hypergrad_all_ista(state, params, prob, p)
    }
}

pub const FD_DELTA_MIN: f64 = 1e-8;
pub const FD_DELTA_MAX: f64 = 1e-5;
pub const FD_DELTA_DEFAULT: f64 = 1e-6;

/// Central difference of `J̃` after one soft-mode step from the pre-step part
/// of `state`. For β parameters `delta` is the absolute step; for γ the step
/// is `delta · γ`, since γ is typically of order `1e-3`.
pub fn fd_hypergradient(
    param: HyperParam,
    state: &SolverState,
    params: &StructuralParams,
    prob: &ProblemInstance,
    p: f64,
    delta: f64,
) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!("fd step must be positive, got {delta}")));
    }
    if !(FD_DELTA_MIN..=FD_DELTA_MAX).contains(&delta) {
        return Err(Error::InvalidArgument(format!(
            "fd step must lie in [{FD_DELTA_MIN:e}, {FD_DELTA_MAX:e}], got {delta}"
        )));
    }
    let step = match param {
        HyperParam::Gamma => delta * params.gamma,
        _ => delta,
    };
    let mode = ForwardMode::Soft { p };
    let eval = |shift: f64| -> Result<f64> {
        let shifted = param.shifted(params, shift)?;
        let out = as_step(state, &shifted, mode, prob)?;
        surrogate_objective(out.estimate_next()?, prob, p)
    };
    Ok((eval(step)? - eval(-step)?) / (2.0 * step))
}

// ---------------------------------------------------------------------------
// Oracle suite

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub cases: usize,
    pub m: usize,
    pub n: usize,
    pub lambda: f64,
    pub p: f64,
    pub delta: f64,
    pub rel_tol: f64,
    /// Analytic values below this magnitude are compared in absolute terms.
    pub small_cutoff: f64,
    pub abs_tol: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            cases: 100,
            m: 75,
            n: 150,
            lambda: 10.0,
            p: 50.0,
            delta: FD_DELTA_DEFAULT,
            rel_tol: 1e-4,
            small_cutoff: 1e-6,
            abs_tol: 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ParamCheck {
    pub variant: &'static str,
    pub param: &'static str,
    pub cases: usize,
    /// Max relative error over cases with `|analytic| >= small_cutoff`.
    pub max_rel_err: f64,
    /// Max absolute error over the remaining cases.
    pub max_abs_err_small: f64,
    pub failures: usize,
}

impl ParamCheck {
    fn new(variant: &'static str, param: &'static str) -> Self {
        Self {
            variant,
            param,
            cases: 0,
            max_rel_err: 0.0,
            max_abs_err_small: 0.0,
            failures: 0,
        }
    }

    fn record(&mut self, analytic: f64, fd: f64, cfg: &GradcheckConfig) {
        self.cases += 1;
        let err = (analytic - fd).abs();
        let ok = if analytic.abs() < cfg.small_cutoff {
            self.max_abs_err_small = self.max_abs_err_small.max(err);
            err <= cfg.abs_tol
        } else {
            let rel = err / analytic.abs();
            self.max_rel_err = self.max_rel_err.max(rel);
            rel <= cfg.rel_tol
        };
        // NaN never passes
        if !ok || !err.is_finite() {
            self.failures += 1;
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.cases > 0
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct GradcheckReport {
    pub checks: Vec<ParamCheck>,
    /// Every closed-form β pair satisfied `d[1] == -d[0]` bitwise.
    pub negation_exact: bool,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.negation_exact && self.checks.iter().all(ParamCheck::passed)
    }

    pub fn check(&self, variant: &str, param: &str) -> Option<&ParamCheck> {
        self.checks.iter().find(|c| c.variant == variant && c.param == param)
    }
}

/// A randomised pre-step state for the oracle suite.
#[derive(Clone, Debug)]
pub struct RandomCase {
    pub prob: ProblemInstance,
    pub state: SolverState,
    pub params: StructuralParams,
}

fn gauss<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Instance from `rng`, a perturbed ground truth as iterate, γ within ±50 %
/// of `1/s_max²` and β entries uniform on `[-2, 2]`. FISTA cases also draw
/// `s_t` from the first ten momentum scalars (so `s_t = 1` occurs).
pub fn random_case<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &GradcheckConfig,
    momentum: bool,
) -> Result<RandomCase> {
    let matrix_kind = if rng.random_bool(0.5) {
        MatrixKind::IidGaussian
    } else {
        MatrixKind::CorrelatedGaussian { rho: 0.5 }
    };
    let gen = GeneratorConfig {
        m: cfg.m,
        n: cfg.n,
        matrix_kind,
        seed: rng.random(),
        ..GeneratorConfig::default()
    };
    let prob = build_instance(&gen, cfg.lambda)?;
    let gamma = lipschitz_step(&prob)? * rng.random_range(0.5..1.5);
    let mut beta = || [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
    let beta_r = beta();
    let beta_x = beta();
    let beta_z = momentum.then(&mut beta);
    let params = StructuralParams {
        beta_r,
        beta_x,
        beta_z,
        gamma,
    };

    let x_t = &prob.x_star + gauss(rng, cfg.n, 0.3);
    let state = if momentum {
        let mut s = 1.0;
        for _ in 0..rng.random_range(0..10) {
            s = next_momentum_scalar(s);
        }
        SolverState {
            z_t: Some(&x_t + gauss(rng, cfg.n, 0.1)),
            s_t: Some(s),
            ..SolverState::ista(x_t)
        }
    } else {
        SolverState::ista(x_t)
    };
    Ok(RandomCase { prob, state, params })
}

/// Compares every closed-form hypergradient, and the FISTA chain factor,
/// against [`fd_hypergradient`] on `cfg.cases` random states per variant.
/// Closed forms are evaluated on the soft-mode step, which is exactly the
/// map the oracle differentiates.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(cfg.seed);
    let mode = ForwardMode::Soft { p: cfg.p };
    let mut checks = Vec::new();
    let mut negation_exact = true;

    for (variant, momentum, params_list) in [
        ("ista", false, &HyperParam::ISTA[..]),
        ("fista", true, &HyperParam::FISTA[..]),
    ] {
        let mut per_param: Vec<ParamCheck> =
            params_list.iter().map(|hp| ParamCheck::new(variant, hp.name())).collect();
        let mut chain = ParamCheck::new(variant, "chain_factor");

        for _ in 0..cfg.cases {
            let case = random_case(&mut rng, cfg, momentum)?;
            let stepped = as_step(&case.state, &case.params, mode, &case.prob)?;
            let hg = hypergrad_all(&stepped, &case.params, &case.prob, cfg.p)?;

            negation_exact &= hg.d_beta_r[1] == -hg.d_beta_r[0] && hg.d_beta_x[1] == -hg.d_beta_x[0];
            if let Some(dz) = hg.d_beta_z {
                negation_exact &= dz[1] == -dz[0];
            }

            for (check, hp) in per_param.iter_mut().zip(params_list) {
                let analytic = hg.get(*hp).ok_or(Error::MissingState("hypergradient"))?;
                let fd = fd_hypergradient(*hp, &case.state, &case.params, &case.prob, cfg.p, cfg.delta)?;
                check.record(analytic, fd, cfg);
            }

            if momentum {
                let (fd, analytic) = chain_factor_oracle(&stepped, &case.params, &mut rng)?;
                chain.record(analytic, fd, cfg);
            }
        }
        checks.extend(per_param);
        if momentum {
            checks.push(chain);
        }
    }
    Ok(GradcheckReport {
        checks,
        negation_exact,
    })
}

/// Directional finite difference of the `z` update in `x⁺` along a random
/// unit direction, projected back onto that direction, against the closed
/// chain factor. Returns `(fd, analytic)`.
fn chain_factor_oracle<R: Rng + ?Sized>(
    stepped: &SolverState,
    params: &StructuralParams,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let x_next = stepped.x_next.as_ref().ok_or(Error::MissingState("x_next"))?;
    let s_t = stepped.s_t.ok_or(Error::MissingState("s_t"))?;
    let s_next = stepped.s_next.ok_or(Error::MissingState("s_next"))?;
    let w = softmax_weights(params.beta_z.ok_or(Error::MissingState("beta_z"))?);
    let z_of = |x: &DVector<f64>| momentum_point(x, &stepped.x_t, s_t, s_next) * w[0] + x * w[1];
    // z is affine in x⁺, so the difference quotient is exact up to roundoff
    let mut dir = gauss(rng, x_next.len(), 1.0);
    dir /= dir.norm();
    let h = 1e-6;
    let dz = (z_of(&(x_next + &dir * h)) - z_of(&(x_next - &dir * h))) / (2.0 * h);
    Ok((dz.dot(&dir), momentum_chain_factor(w, s_t, s_next)))
}

/// `f(v) - g̃(v)`, exposed for diagnostics.
pub fn branch_gap(v: &DVector<f64>, prob: &ProblemInstance, gamma: f64, p: f64) -> DVector<f64> {
    gradient_step(v, prob, gamma) - g_smooth_step(v, prob, gamma, p)
}
