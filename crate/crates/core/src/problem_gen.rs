//! Seeded compressed-sensing instances `y = A x* + v`.
//!
//! All randomness flows through [`ChaCha20Rng`] (rand_chacha 0.9). A single
//! 64-bit seed expands into independent sub-streams selected with
//! `set_stream`: stream [`MATRIX_STREAM`] draws `A`, [`SIGNAL_STREAM`] draws
//! `x*` and [`NOISE_STREAM`] draws `v`. Changing the noise level therefore
//! leaves the matrix and signal untouched.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

pub const MATRIX_STREAM: u64 = 0;
pub const SIGNAL_STREAM: u64 = 1;
pub const NOISE_STREAM: u64 = 2;

/// Distribution of the measurement matrix entries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "matrix", rename_all = "snake_case")]
pub enum MatrixKind {
    IidGaussian,
    /// Rows i.i.d. `N(0, Σ)` with Toeplitz `Σ_jl = rho^|j-l|`.
    CorrelatedGaussian { rho: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub m: usize,
    pub n: usize,
    pub nonzero_ratio: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
    #[serde(flatten)]
    pub matrix_kind: MatrixKind,
    #[serde(default)]
    pub seed: u64,
}

impl Default for GeneratorConfig {
    /// The (M, N) = (75, 150) evaluation setting with ρ = 0.5.
    fn default() -> Self {
        Self {
            m: 75,
            n: 150,
            nonzero_ratio: 0.08,
            signal_variance: 1.0,
            noise_variance: 0.1,
            matrix_kind: MatrixKind::CorrelatedGaussian { rho: 0.5 },
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::Config("m and n must be positive".into()));
        }
        if self.m >= self.n {
            return Err(Error::Config(format!(
                "expected m < n, got m = {}, n = {}",
                self.m, self.n
            )));
        }
        if !(self.nonzero_ratio > 0.0 && self.nonzero_ratio < 1.0) {
            return Err(Error::Config(format!(
                "nonzero_ratio must lie in (0, 1), got {}",
                self.nonzero_ratio
            )));
        }
        if !(self.signal_variance > 0.0 && self.signal_variance.is_finite()) {
            return Err(Error::Config("signal_variance must be positive".into()));
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(Error::Config("noise_variance must be nonnegative".into()));
        }
        if let MatrixKind::CorrelatedGaussian { rho } = self.matrix_kind {
            if !(0.0..1.0).contains(&rho) {
                return Err(Error::Config(format!(
                    "correlation rho must lie in [0, 1), got {rho}"
                )));
            }
        }
        Ok(())
    }

    /// Generator for one of the three named sub-streams of `self.seed`.
    pub fn stream(&self, stream: u64) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Generator keyed by a tuple of indices, e.g. `(master_seed, matrix, signal)`.
pub fn keyed_stream(key: [u64; 4], stream: u64) -> ChaCha20Rng {
    let mut seed = [0u8; 32];
    for (chunk, word) in seed.chunks_exact_mut(8).zip(key) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    let mut rng = ChaCha20Rng::from_seed(seed);
    rng.set_stream(stream);
    rng
}

/// One LASSO instance. `y = A x* + noise` holds by construction.
#[derive(Clone, Debug)]
pub struct ProblemInstance {
    pub a: DMatrix<f64>,
    pub y: DVector<f64>,
    pub x_star: DVector<f64>,
    pub noise: DVector<f64>,
    pub lambda: f64,
}

impl ProblemInstance {
    pub fn new(
        a: DMatrix<f64>,
        x_star: DVector<f64>,
        noise: DVector<f64>,
        lambda: f64,
    ) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
        }
        if a.nrows() >= a.ncols() {
            return Err(Error::Config(format!(
                "expected M < N, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        check_len("x_star", a.ncols(), x_star.len())?;
        check_len("noise", a.nrows(), noise.len())?;
        let y = &a * &x_star + &noise;
        Ok(Self {
            a,
            y,
            x_star,
            noise,
            lambda,
        })
    }

    pub fn m(&self) -> usize {
        self.a.nrows()
    }

    pub fn n(&self) -> usize {
        self.a.ncols()
    }

    pub fn check_signal(&self, context: &'static str, x: &DVector<f64>) -> Result<()> {
        check_len(context, self.n(), x.len())
    }

    /// `A x - y`
    pub fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x - &self.y
    }

    /// `Aᵀ(A x - y)`, the gradient of the least-squares term.
    pub fn ls_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.a.tr_mul(&self.residual(x))
    }

    pub fn squared_error(&self, x: &DVector<f64>) -> f64 {
        (x - &self.x_star).norm_squared()
    }
}

/// Bernoulli-Gaussian sparse signal.
pub fn generate_signal<R: Rng + ?Sized>(cfg: &GeneratorConfig, rng: &mut R) -> Result<DVector<f64>> {
    if !(cfg.nonzero_ratio > 0.0 && cfg.nonzero_ratio < 1.0) {
        return Err(Error::Config(format!(
            "nonzero_ratio must lie in (0, 1), got {}",
            cfg.nonzero_ratio
        )));
    }
    let sd = cfg.signal_variance.sqrt();
    Ok(DVector::from_fn(cfg.n, |_, _| {
        let u: f64 = rng.random();
        if u < cfg.nonzero_ratio {
            let g: f64 = rng.sample(StandardNormal);
            sd * g
        } else {
            0.0
        }
    }))
}

/// Symmetric square root of the Toeplitz matrix `Σ_jl = rho^|j-l|`.
pub fn toeplitz_sqrt(n: usize, rho: f64) -> Result<DMatrix<f64>> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Config(format!(
            "correlation rho must lie in [0, 1), got {rho}"
        )));
    }
    let sigma = DMatrix::from_fn(n, n, |j, l| rho.powi(j.abs_diff(l) as i32));
    let eig = SymmetricEigen::new(sigma);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&roots) * v.transpose())
}

/// Measurement matrix. Entries are drawn in column-major order.
pub fn generate_matrix<R: Rng + ?Sized>(cfg: &GeneratorConfig, rng: &mut R) -> Result<DMatrix<f64>> {
    let g = DMatrix::from_fn(cfg.m, cfg.n, |_, _| rng.sample::<f64, _>(StandardNormal));
    match cfg.matrix_kind {
        MatrixKind::IidGaussian => Ok(g),
        MatrixKind::CorrelatedGaussian { rho } => {
            if rho == 0.0 {
                return Ok(g);
            }
            Ok(g * toeplitz_sqrt(cfg.n, rho)?)
        }
    }
}

pub fn generate_noise<R: Rng + ?Sized>(cfg: &GeneratorConfig, rng: &mut R) -> DVector<f64> {
    let sd = cfg.noise_variance.sqrt();
    DVector::from_fn(cfg.m, |_, _| sd * rng.sample::<f64, _>(StandardNormal))
}

/// Full instance from `cfg.seed`, using one sub-stream per component.
pub fn build_instance(cfg: &GeneratorConfig, lambda: f64) -> Result<ProblemInstance> {
    cfg.validate()?;
    let a = generate_matrix(cfg, &mut cfg.stream(MATRIX_STREAM))?;
    let x_star = generate_signal(cfg, &mut cfg.stream(SIGNAL_STREAM))?;
    let noise = generate_noise(cfg, &mut cfg.stream(NOISE_STREAM));
    ProblemInstance::new(a, x_star, noise, lambda)
}
