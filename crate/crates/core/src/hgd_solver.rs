//! Online HGD-AS-ISTA / HGD-AS-FISTA.
//!
//! Every iteration runs one hard-mode architecture-searched step, evaluates
//! the closed-form hypergradients of `J̃` at the new estimate, and moves all
//! parameters simultaneously by `-η · ∂J̃/∂α`. No training data is involved:
//! the parameters adapt while the signal is being recovered.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::arch_forward::{
    as_step, ForwardMode, Pair, SolverState, StepWeights, StructuralParams, SELECT_FIRST,
    SELECT_SECOND,
};
use crate::classic_solvers::{lipschitz_step, ClassicTrace};
use crate::error::{Error, Result};
use crate::hypergrad::{hypergrad_all, HypergradSet};
use crate::problem_gen::ProblemInstance;
use crate::smooth_math::{objective, surrogate_objective, SmoothingConfig};

/// Lower bound applied to γ after each update.
pub const GAMMA_MIN: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Ista,
    Fista,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Ista => "ista",
            Variant::Fista => "fista",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaRates {
    pub eta_r: f64,
    pub eta_x: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_z: Option<f64>,
    pub eta_gamma: f64,
}

impl MetaRates {
    pub const ISTA_DEFAULT: MetaRates = MetaRates {
        eta_r: 1e-1,
        eta_x: 1e-1,
        eta_z: None,
        eta_gamma: 5e-9,
    };

    pub const FISTA_DEFAULT: MetaRates = MetaRates {
        eta_r: 1e-1,
        eta_x: 5e-2,
        eta_z: Some(5e-2),
        eta_gamma: 5e-9,
    };

    pub fn zero(variant: Variant) -> Self {
        Self {
            eta_r: 0.0,
            eta_x: 0.0,
            eta_z: (variant == Variant::Fista).then_some(0.0),
            eta_gamma: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HgdConfig {
    pub variant: Variant,
    pub iterations: usize,
    pub rates: MetaRates,
    pub p: f64,
    pub init_beta_r: Pair,
    pub init_beta_x: Pair,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_beta_z: Option<Pair>,
    /// `None` starts from `1/s_max²` of the instance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_gamma: Option<f64>,
}

impl HgdConfig {
    /// T = 40, p = 50, β initialised to the plain ISTA/FISTA selection and
    /// the default meta learning rates of `variant`.
    pub fn defaults(variant: Variant) -> Self {
        let (rates, init_beta_z) = match variant {
            Variant::Ista => (MetaRates::ISTA_DEFAULT, None),
            Variant::Fista => (MetaRates::FISTA_DEFAULT, Some(SELECT_FIRST)),
        };
        Self {
            variant,
            iterations: 40,
            rates,
            p: 50.0,
            init_beta_r: SELECT_FIRST,
            init_beta_x: SELECT_SECOND,
            init_beta_z,
            init_gamma: None,
        }
    }

    pub fn with_rates(mut self, rates: MetaRates) -> Self {
        self.rates = rates;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        SmoothingConfig::new(self.p)?;
        let r = &self.rates;
        let mut rates = vec![("eta_r", r.eta_r), ("eta_x", r.eta_x), ("eta_gamma", r.eta_gamma)];
        if self.variant == Variant::Fista {
            let eta_z = r
                .eta_z
                .ok_or_else(|| Error::Config("FISTA variant needs eta_z".into()))?;
            rates.push(("eta_z", eta_z));
            if self.init_beta_z.is_none() {
                return Err(Error::Config("FISTA variant needs init_beta_z".into()));
            }
        }
        for (name, v) in rates {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if let Some(g) = self.init_gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::Config(format!("init_gamma must be positive, got {g}")));
            }
        }
        Ok(())
    }

    /// Initial parameter set for `prob`.
    pub fn initial_params(&self, prob: &ProblemInstance) -> Result<StructuralParams> {
        let gamma = match self.init_gamma {
            Some(g) => g,
            None => lipschitz_step(prob)?,
        };
        Ok(self.initial_params_with_gamma(gamma))
    }

    pub fn initial_params_with_gamma(&self, gamma: f64) -> StructuralParams {
        StructuralParams {
            beta_r: self.init_beta_r,
            beta_x: self.init_beta_x,
            beta_z: match self.variant {
                Variant::Ista => None,
                Variant::Fista => self.init_beta_z,
            },
            gamma,
        }
    }
}

/// `α - η·grad`
pub fn hgd_update(alpha: f64, grad: f64, eta: f64) -> Result<f64> {
    if !grad.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite hypergradient {grad}")));
    }
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::InvalidArgument(format!("meta learning rate must be >= 0, got {eta}")));
    }
    Ok(alpha - eta * grad)
}

/// [`hgd_update`] clamped at [`GAMMA_MIN`].
pub fn hgd_update_gamma(gamma: f64, grad: f64, eta: f64) -> Result<f64> {
    Ok(hgd_update(gamma, grad, eta)?.max(GAMMA_MIN))
}

/// Simultaneous update of every parameter from one hypergradient set.
pub fn apply_updates(params: &StructuralParams, grads: &HypergradSet, rates: &MetaRates) -> Result<StructuralParams> {
    let pair = |b: Pair, d: Pair, eta: f64| -> Result<Pair> {
        Ok([hgd_update(b[0], d[0], eta)?, hgd_update(b[1], d[1], eta)?])
    };
    let beta_z = match (params.beta_z, grads.d_beta_z) {
        (Some(b), Some(d)) => {
            let eta = rates.eta_z.ok_or_else(|| Error::Config("missing eta_z".into()))?;
            Some(pair(b, d, eta)?)
        }
        (None, _) => None,
        (Some(_), None) => return Err(Error::MissingState("d_beta_z")),
    };
    Ok(StructuralParams {
        beta_r: pair(params.beta_r, grads.d_beta_r, rates.eta_r)?,
        beta_x: pair(params.beta_x, grads.d_beta_x, rates.eta_x)?,
        beta_z,
        gamma: hgd_update_gamma(params.gamma, grads.d_gamma, rates.eta_gamma)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    /// `‖estimate - x*‖²`; its mean over signals is the reported MSE.
    pub mse: f64,
    pub objective: f64,
    pub surrogate: f64,
}

impl PointRecord {
    fn at(x: &DVector<f64>, prob: &ProblemInstance, p: f64) -> Result<Self> {
        Ok(Self {
            mse: prob.squared_error(x),
            objective: objective(x, prob)?,
            surrogate: surrogate_objective(x, prob, p)?,
        })
    }

    fn is_finite(&self) -> bool {
        self.mse.is_finite() && self.objective.is_finite() && self.surrogate.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotWeights {
    pub r: Pair,
    pub x: Pair,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<Pair>,
}

/// One iteration `t -> t + 1`: parameters and weights used by the step, the
/// resulting estimate's metrics and the hypergradients driving the update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    #[serde(flatten)]
    pub point: PointRecord,
    pub soft: SlotWeights,
    pub hard: SlotWeights,
    pub params: StructuralParams,
    pub hypergrads: Option<HypergradSet>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub variant: Variant,
    /// Metrics of the starting point, before any step.
    pub initial: PointRecord,
    pub records: Vec<IterationRecord>,
    /// Parameters after the last update.
    pub final_params: StructuralParams,
}

impl RunTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Squared errors from the starting point through iteration `T`.
    pub fn mse_curve(&self) -> Vec<f64> {
        std::iter::once(self.initial.mse)
            .chain(self.records.iter().map(|r| r.point.mse))
            .collect()
    }

    /// Expresses a fixed-step run in trace form, with the one-hot selection
    /// that makes the architecture-searched step reduce to it.
    pub fn from_classic(trace: &ClassicTrace, variant: Variant, gamma: f64, prob: &ProblemInstance, p: f64) -> Result<Self> {
        let params = match variant {
            Variant::Ista => StructuralParams::ista(gamma),
            Variant::Fista => StructuralParams::fista(gamma),
        };
        let w = StepWeights::from_params(&params);
        let first = trace.records.first().ok_or(Error::MissingState("classic trace"))?;
        let records = trace
            .records
            .iter()
            .skip(1)
            .map(|rec| {
                Ok(IterationRecord {
                    t: rec.t - 1,
                    point: PointRecord::at(&rec.estimate, prob, p)?,
                    soft: SlotWeights { r: w.soft_r, x: w.soft_x, z: w.soft_z },
                    hard: SlotWeights { r: w.hard_r, x: w.hard_x, z: w.hard_z },
                    params,
                    hypergrads: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            variant,
            initial: PointRecord::at(&first.estimate, prob, p)?,
            records,
            final_params: params,
        })
    }
}

/// Runs the online loop from `x⁰ = 0` with explicit initial parameters.
pub fn hgd_run(prob: &ProblemInstance, cfg: &HgdConfig, init: StructuralParams) -> Result<(DVector<f64>, RunTrace)> {
    cfg.validate()?;
    init.validate()?;
    if init.beta_z.is_some() != (cfg.variant == Variant::Fista) {
        return Err(Error::Config("initial parameters do not match the variant".into()));
    }
    let x0 = DVector::zeros(prob.n());
    let mut state = match cfg.variant {
        Variant::Ista => SolverState::ista(x0),
        Variant::Fista => SolverState::fista(x0),
    };
    let mut params = init;
    let initial = PointRecord::at(state.estimate(), prob, cfg.p)?;
    let mut records = Vec::with_capacity(cfg.iterations);

    for t in 0..cfg.iterations {
        let weights = StepWeights::from_params(&params);
        let stepped = as_step(&state, &params, ForwardMode::Hard, prob)?;
        let estimate = stepped.estimate_next()?;
        let point = PointRecord::at(estimate, prob, cfg.p)?;
        if !point.is_finite() || estimate.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { iteration: t, what: "iterate".into() });
        }

        let grads = hypergrad_all(&stepped, &params, prob, cfg.p)?;
        if !grads.is_finite() {
            return Err(Error::NonFinite { iteration: t, what: "hypergradient".into() });
        }
        let next_params = apply_updates(&params, &grads, &cfg.rates)?;

        records.push(IterationRecord {
            t,
            point,
            soft: SlotWeights { r: weights.soft_r, x: weights.soft_x, z: weights.soft_z },
            hard: SlotWeights { r: weights.hard_r, x: weights.hard_x, z: weights.hard_z },
            params,
            hypergrads: Some(grads),
        });
        params = next_params;
        state = stepped.advance()?;
    }

    let estimate = state.estimate().clone();
    Ok((
        estimate,
        RunTrace {
            variant: cfg.variant,
            initial,
            records,
            final_params: params,
        },
    ))
}

fn expect_variant(cfg: &HgdConfig, variant: Variant) -> Result<()> {
    if cfg.variant != variant {
        return Err(Error::Config(format!(
            "expected the {} variant, got {}",
            variant.name(),
            cfg.variant.name()
        )));
    }
    Ok(())
}

pub fn hgd_as_ista(prob: &ProblemInstance, cfg: &HgdConfig) -> Result<(DVector<f64>, RunTrace)> {
    expect_variant(cfg, Variant::Ista)?;
    hgd_run(prob, cfg, cfg.initial_params(prob)?)
}

pub fn hgd_as_fista(prob: &ProblemInstance, cfg: &HgdConfig) -> Result<(DVector<f64>, RunTrace)> {
    expect_variant(cfg, Variant::Fista)?;
    hgd_run(prob, cfg, cfg.initial_params(prob)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classic_solvers::{fista, ista};
    use crate::problem_gen::{build_instance, GeneratorConfig};

    fn instance(seed: u64) -> ProblemInstance {
        build_instance(&GeneratorConfig { seed, ..GeneratorConfig::default() }, 10.0).unwrap()
    }

    #[test]
    fn update_rule() {
        assert_eq!(hgd_update(0.7, 0.0, 0.1).unwrap(), 0.7);
        assert!((hgd_update(1.0, 2.0, 0.1).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(hgd_update_gamma(1e-3, 1.0, 1.0).unwrap(), GAMMA_MIN);
        assert!(hgd_update(1.0, f64::NAN, 0.1).is_err());
        assert!(hgd_update(1.0, f64::INFINITY, 0.1).is_err());
        assert!(hgd_update(1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn zero_rates_reproduce_fixed_ista() {
        for seed in 0..3 {
            let prob = instance(seed);
            let cfg = HgdConfig::defaults(Variant::Ista).with_rates(MetaRates::zero(Variant::Ista));
            let (x, trace) = hgd_as_ista(&prob, &cfg).unwrap();
            let gamma = lipschitz_step(&prob).unwrap();
            let (xi, classic) = ista(&prob, gamma, 40, &DVector::zeros(prob.n())).unwrap();
            assert!((&x - &xi).amax() <= 1e-12);
            for (rec, c) in trace.records.iter().zip(classic.records.iter().skip(1)) {
                assert!((rec.point.mse - c.squared_error).abs() <= 1e-12 * c.squared_error.max(1.0));
            }
        }
    }

    #[test]
    fn zero_rates_reproduce_fixed_fista() {
        let prob = instance(4);
        let cfg = HgdConfig::defaults(Variant::Fista).with_rates(MetaRates::zero(Variant::Fista));
        let (z, _) = hgd_as_fista(&prob, &cfg).unwrap();
        let gamma = lipschitz_step(&prob).unwrap();
        let (zf, _) = fista(&prob, gamma, 40, &DVector::zeros(prob.n())).unwrap();
        assert!((&z - &zf).amax() <= 1e-12);
    }

    #[test]
    fn single_iteration_trace() {
        let prob = instance(5);
        let cfg = HgdConfig { iterations: 1, ..HgdConfig::defaults(Variant::Ista) };
        let (_, trace) = hgd_as_ista(&prob, &cfg).unwrap();
        assert_eq!(trace.len(), 1);
        let rec = &trace.records[0];
        let expected = apply_updates(&rec.params, rec.hypergrads.as_ref().unwrap(), &cfg.rates).unwrap();
        assert_eq!(trace.final_params, expected);
    }

    #[test]
    fn parameters_evolve_by_exact_updates() {
        let prob = instance(6);
        for variant in [Variant::Ista, Variant::Fista] {
            let cfg = HgdConfig::defaults(variant);
            let (_, trace) = hgd_run(&prob, &cfg, cfg.initial_params(&prob).unwrap()).unwrap();
            for w in trace.records.windows(2) {
                let g = w[0].hypergrads.unwrap();
                let (a, b) = (&w[0].params, &w[1].params);
                assert_eq!(b.beta_r[0], a.beta_r[0] - cfg.rates.eta_r * g.d_beta_r[0]);
                assert_eq!(b.beta_x[1], a.beta_x[1] - cfg.rates.eta_x * g.d_beta_x[1]);
                assert_eq!(b.gamma, (a.gamma - cfg.rates.eta_gamma * g.d_gamma).max(GAMMA_MIN));
                if variant == Variant::Fista {
                    let (bz, az, dz) = (b.beta_z.unwrap(), a.beta_z.unwrap(), g.d_beta_z.unwrap());
                    assert_eq!(bz[0], az[0] - cfg.rates.eta_z.unwrap() * dz[0]);
                }
            }
            for rec in &trace.records {
                for pair in [rec.hard.r, rec.hard.x].into_iter().chain(rec.hard.z) {
                    assert!(pair == [1.0, 0.0] || pair == [0.0, 1.0]);
                }
            }
        }
    }

    #[test]
    fn first_fista_record_has_zero_beta_z_gradient() {
        let prob = instance(7);
        let (_, trace) = hgd_as_fista(&prob, &HgdConfig::defaults(Variant::Fista)).unwrap();
        assert_eq!(trace.records[0].hypergrads.unwrap().d_beta_z.unwrap()[0], 0.0);
    }

    #[test]
    fn variant_mismatch_is_rejected() {
        let prob = instance(8);
        assert!(hgd_as_ista(&prob, &HgdConfig::defaults(Variant::Fista)).is_err());
        assert!(hgd_as_fista(&prob, &HgdConfig::defaults(Variant::Ista)).is_err());
        let cfg = HgdConfig { iterations: 0, ..HgdConfig::defaults(Variant::Ista) };
        assert!(cfg.validate().is_err());
        let cfg = HgdConfig { p: -1.0, ..HgdConfig::defaults(Variant::Ista) };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn runaway_step_size_aborts_with_iteration() {
        let prob = instance(9);
        let cfg = HgdConfig {
            init_gamma: Some(1e300),
            iterations: 5,
            ..HgdConfig::defaults(Variant::Ista)
        };
        match hgd_as_ista(&prob, &cfg) {
            Err(Error::NonFinite { iteration, .. }) => assert_eq!(iteration, 0),
            other => panic!("expected a non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn classic_trace_conversion() {
        let prob = instance(10);
        let gamma = lipschitz_step(&prob).unwrap();
        let (_, classic) = ista(&prob, gamma, 5, &DVector::zeros(prob.n())).unwrap();
        let trace = RunTrace::from_classic(&classic, Variant::Ista, gamma, &prob, 50.0).unwrap();
        assert_eq!(trace.len(), 5);
        assert_eq!(trace.mse_curve().len(), 6);
        assert_eq!(trace.records[0].hard.r, [1.0, 0.0]);
        assert_eq!(trace.records[0].hard.x, [0.0, 1.0]);
    }
}
