//! Experiment runner: matrix × signal sweeps, MSE aggregation, trace and
//! heatmap export, timing.
//!
//! Work items are independent and run on a bounded rayon pool. Every random
//! draw is keyed by `(master_seed, matrix, signal)` and results are reduced
//! in index order, so the report payload does not depend on the number of
//! workers. Wall-clock numbers live outside the payload.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::arch_forward::{Pair, SELECT_FIRST, SELECT_SECOND};
use crate::classic_solvers::{fista, ista, spectral_norm_sq};
use crate::error::{Error, Result};
use crate::hgd_solver::{hgd_run, HgdConfig, MetaRates, RunTrace, Variant};
use crate::problem_gen::{
    generate_matrix, generate_noise, generate_signal, keyed_stream, GeneratorConfig, ProblemInstance,
    MATRIX_STREAM, NOISE_STREAM, SIGNAL_STREAM,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    IstaFixed,
    FistaFixed,
    HgdAsIsta,
    HgdAsFista,
}

impl SolverKind {
    pub const ALL: [SolverKind; 4] = [
        SolverKind::IstaFixed,
        SolverKind::FistaFixed,
        SolverKind::HgdAsIsta,
        SolverKind::HgdAsFista,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::IstaFixed => "ista_fixed",
            SolverKind::FistaFixed => "fista_fixed",
            SolverKind::HgdAsIsta => "hgd_as_ista",
            SolverKind::HgdAsFista => "hgd_as_fista",
        }
    }

    pub fn variant(self) -> Variant {
        match self {
            SolverKind::IstaFixed | SolverKind::HgdAsIsta => Variant::Ista,
            SolverKind::FistaFixed | SolverKind::HgdAsFista => Variant::Fista,
        }
    }

    pub fn is_hgd(self) -> bool {
        matches!(self, SolverKind::HgdAsIsta | SolverKind::HgdAsFista)
    }
}

/// Per-variant HGD settings; the iteration count comes from the experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HgdSettings {
    pub p: f64,
    pub rates: MetaRates,
    pub init_beta_r: Pair,
    pub init_beta_x: Pair,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_beta_z: Option<Pair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_gamma: Option<f64>,
}

impl HgdSettings {
    pub fn defaults(variant: Variant) -> Self {
        let d = HgdConfig::defaults(variant);
        Self {
            p: d.p,
            rates: d.rates,
            init_beta_r: d.init_beta_r,
            init_beta_x: d.init_beta_x,
            init_beta_z: d.init_beta_z,
            init_gamma: d.init_gamma,
        }
    }

    pub fn to_config(&self, variant: Variant, iterations: usize) -> HgdConfig {
        HgdConfig {
            variant,
            iterations,
            rates: self.rates,
            p: self.p,
            init_beta_r: self.init_beta_r,
            init_beta_x: self.init_beta_x,
            init_beta_z: self.init_beta_z,
            init_gamma: self.init_gamma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    pub lambda: f64,
    pub iterations: usize,
    pub n_matrices: usize,
    pub n_signals_per_matrix: usize,
    pub master_seed: u64,
    #[serde(deserialize_with = "one_or_many")]
    pub solvers: Vec<SolverKind>,
    /// Also supplies `p` for the surrogate column of `ista_fixed`.
    pub hgd_ista: HgdSettings,
    /// Also supplies `p` for the surrogate column of `fista_fixed`.
    pub hgd_fista: HgdSettings,
    /// Carry adapted HGD parameters from one signal to the next within a
    /// matrix instead of restarting from the initial values.
    pub carry_params: bool,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    /// (M, N, λ, T) = (75, 150, 10, 40) on 20 matrices × 20 signals.
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            lambda: 10.0,
            iterations: 40,
            n_matrices: 20,
            n_signals_per_matrix: 20,
            master_seed: 0,
            solvers: SolverKind::ALL.to_vec(),
            hgd_ista: HgdSettings::defaults(Variant::Ista),
            hgd_fista: HgdSettings::defaults(Variant::Fista),
            carry_params: false,
            output_dir: PathBuf::from("out"),
        }
    }
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<SolverKind>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(SolverKind),
        Many(Vec<SolverKind>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(s) => vec![s],
        OneOrMany::Many(v) => v,
    })
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.n_matrices == 0 || self.n_signals_per_matrix == 0 {
            return Err(Error::Config("n_matrices and n_signals_per_matrix must be >= 1".into()));
        }
        if self.solvers.is_empty() {
            return Err(Error::Config("at least one solver is required".into()));
        }
        for (i, s) in self.solvers.iter().enumerate() {
            if self.solvers[..i].contains(s) {
                return Err(Error::Config(format!("solver {} listed twice", s.name())));
            }
        }
        for kind in &self.solvers {
            if kind.is_hgd() {
                let cfg = self.hgd_config(*kind);
                if self.iterations == 0 {
                    return Err(Error::Config("iterations must be >= 1 for HGD solvers".into()));
                }
                cfg.validate()?;
            }
        }
        Ok(())
    }

    fn settings(&self, variant: Variant) -> &HgdSettings {
        match variant {
            Variant::Ista => &self.hgd_ista,
            Variant::Fista => &self.hgd_fista,
        }
    }

    pub fn hgd_config(&self, kind: SolverKind) -> HgdConfig {
        let v = kind.variant();
        self.settings(v).to_config(v, self.iterations)
    }

    /// SHA-256 of the canonical JSON form, ignoring `output_dir`.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let json = serde_json::to_string(&canonical).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// `key = value` lines, one per leaf, with dotted section prefixes.
    pub fn to_flat(&self) -> String {
        let value = serde_json::to_value(self).expect("config serialises");
        let mut out = String::new();
        flatten_into(&value, "", &mut out);
        out
    }
}

fn flatten_into(value: &Value, prefix: &str, out: &mut String) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(v, &key, out);
            }
        }
        Value::Array(items) => {
            let parts: Vec<String> = items.iter().map(scalar_text).collect();
            let _ = writeln!(out, "{prefix} = {}", parts.join(", "));
        }
        v => {
            let _ = writeln!(out, "{prefix} = {}", scalar_text(v));
        }
    }
}

fn scalar_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn parse_scalar(text: &str) -> Value {
    let t = text.trim();
    if t == "true" || t == "false" {
        return Value::Bool(t == "true");
    }
    if let Ok(i) = t.parse::<i64>() {
        return Value::from(i);
    }
    if let Ok(u) = t.parse::<u64>() {
        return Value::from(u);
    }
    if let Ok(f) = t.parse::<f64>() {
        if f.is_finite() {
            return Value::from(f);
        }
    }
    let unquoted = t
        .strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .unwrap_or(t);
    Value::String(unquoted.to_string())
}

/// Parses either JSON or the flat `key = value` format into a config.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    if text.trim_start().starts_with('{') {
        return Ok(serde_json::from_str(text)?);
    }
    let mut root = Map::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected key = value", lineno + 1)))?;
        let key = key.trim();
        let value = if value.contains(',') {
            Value::Array(
                value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(parse_scalar)
                    .collect(),
            )
        } else {
            parse_scalar(value)
        };
        insert_dotted(&mut root, key, value).map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
    }
    serde_json::from_value(Value::Object(root)).map_err(|e| Error::Parse(e.to_string()))
}

fn insert_dotted(root: &mut Map<String, Value>, key: &str, value: Value) -> std::result::Result<(), String> {
    let parts: Vec<&str> = key.split('.').map(str::trim).collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("malformed key '{key}'"));
    }
    let (last, sections) = parts.split_last().expect("split yields at least one part");
    let mut node = root;
    for section in sections {
        let entry = node
            .entry(section.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
        node = entry
            .as_object_mut()
            .ok_or_else(|| format!("'{section}' is both a value and a section"))?;
    }
    if node.insert(last.to_string(), value).is_some() {
        return Err(format!("duplicate key '{key}'"));
    }
    Ok(())
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

/// Sample config in the flat format with a comment per section.
pub fn sample_config() -> String {
    let cfg = ExperimentConfig::default();
    let mut out = String::from(
        "# hgdas experiment config (key = value; JSON also accepted)\n\
         # generator.matrix: iid_gaussian | correlated_gaussian (the latter needs generator.rho)\n\
         # generator.seed is unused by experiments: instances derive from master_seed\n\
         # solvers: any of ista_fixed, fista_fixed, hgd_as_ista, hgd_as_fista\n\
         # hgd_*.init_gamma may be set to override 1/s_max^2\n",
    );
    out.push_str(&cfg.to_flat());
    out
}

// ---------------------------------------------------------------------------
// Running

#[derive(Clone, Debug)]
enum RunOutcome {
    Done {
        trace: RunTrace,
        estimate: DVector<f64>,
        seconds: f64,
    },
    Failed(String),
}

#[derive(Clone, Debug)]
struct InstanceOutcome {
    matrix: usize,
    signal: usize,
    x_star: DVector<f64>,
    runs: Vec<RunOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverSummary {
    pub solver: SolverKind,
    /// Mean squared error per iteration, starting from the initial point
    /// (length T + 1).
    pub mean_mse: Vec<f64>,
    pub final_mse: Option<f64>,
    pub completed: usize,
    pub failed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub matrix: usize,
    pub signal: usize,
    pub solver: SolverKind,
    pub error: String,
}

/// Everything that must be bit-identical across reruns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportPayload {
    pub config_hash: String,
    pub master_seed: u64,
    pub iterations: usize,
    pub instances: usize,
    pub solvers: Vec<SolverSummary>,
    pub failures: Vec<FailureRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub solver: SolverKind,
    pub mean_ms_per_signal: f64,
    /// Offline training time; no solver here has a training phase.
    pub training_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub config_hash: String,
    pub master_seed: u64,
    pub unix_time: u64,
    pub workers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub payload: ReportPayload,
    pub timing: Vec<TimingRow>,
    pub metadata: ReportMetadata,
}

impl ExperimentReport {
    pub fn summary(&self, kind: SolverKind) -> Option<&SolverSummary> {
        self.payload.solvers.iter().find(|s| s.solver == kind)
    }

    pub fn timing(&self, kind: SolverKind) -> Option<&TimingRow> {
        self.timing.iter().find(|s| s.solver == kind)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub matrix: usize,
    pub signal: usize,
    pub x_star: Vec<f64>,
    /// Raw final iterate per solver, in `solvers` order; `None` for failed runs.
    pub finals: Vec<Option<Vec<f64>>>,
}

/// Raw final iterates for recomputing the reported MSE independently.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    pub solvers: Vec<SolverKind>,
    pub entries: Vec<AuditEntry>,
}

impl Audit {
    /// Arithmetic mean of `‖x - x*‖²` over the completed runs of each solver.
    pub fn recompute_final_mse(&self) -> Vec<(SolverKind, Option<f64>)> {
        self.solvers
            .iter()
            .enumerate()
            .map(|(k, kind)| {
                let mut sum = 0.0;
                let mut count = 0usize;
                for e in &self.entries {
                    if let Some(x) = &e.finals[k] {
                        sum += x.iter().zip(&e.x_star).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                        count += 1;
                    }
                }
                (*kind, (count > 0).then(|| sum / count as f64))
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub report: ExperimentReport,
    /// Completed traces per solver in (matrix, signal) order.
    pub traces: BTreeMap<SolverKind, Vec<RunTrace>>,
    pub audit: Audit,
}

struct MatrixData {
    a: DMatrix<f64>,
    step: f64,
}

fn matrix_data(cfg: &ExperimentConfig, i: usize) -> Result<MatrixData> {
    let mut rng = keyed_stream([cfg.master_seed, i as u64, 0, 1], MATRIX_STREAM);
    let a = generate_matrix(&cfg.generator, &mut rng)?;
    let step = 1.0 / spectral_norm_sq(&a)?;
    Ok(MatrixData { a, step })
}

fn instance(cfg: &ExperimentConfig, i: usize, j: usize, a: &DMatrix<f64>) -> Result<ProblemInstance> {
    let key = [cfg.master_seed, i as u64, j as u64, 0];
    let x_star = generate_signal(&cfg.generator, &mut keyed_stream(key, SIGNAL_STREAM))?;
    let noise = generate_noise(&cfg.generator, &mut keyed_stream(key, NOISE_STREAM));
    ProblemInstance::new(a.clone(), x_star, noise, cfg.lambda)
}

fn run_solver(
    cfg: &ExperimentConfig,
    kind: SolverKind,
    prob: &ProblemInstance,
    step: f64,
    carried: Option<&crate::arch_forward::StructuralParams>,
) -> Result<(RunTrace, DVector<f64>, f64)> {
    let x0 = DVector::zeros(prob.n());
    let p = cfg.settings(kind.variant()).p;
    let start = Instant::now();
    let (estimate, trace) = match kind {
        SolverKind::IstaFixed => {
            let (x, classic) = ista(prob, step, cfg.iterations, &x0)?;
            let seconds = start.elapsed().as_secs_f64();
            let trace = RunTrace::from_classic(&classic, Variant::Ista, step, prob, p)?;
            return Ok((trace, x, seconds));
        }
        SolverKind::FistaFixed => {
            let (z, classic) = fista(prob, step, cfg.iterations, &x0)?;
            let seconds = start.elapsed().as_secs_f64();
            let trace = RunTrace::from_classic(&classic, Variant::Fista, step, prob, p)?;
            return Ok((trace, z, seconds));
        }
        SolverKind::HgdAsIsta | SolverKind::HgdAsFista => {
            let hcfg = cfg.hgd_config(kind);
            let init = match carried {
                Some(params) => *params,
                None => hcfg.initial_params_with_gamma(hcfg.init_gamma.unwrap_or(step)),
            };
            hgd_run(prob, &hcfg, init)?
        }
    };
    Ok((trace, estimate, start.elapsed().as_secs_f64()))
}

fn run_signals(cfg: &ExperimentConfig, i: usize, data: &MatrixData) -> Result<Vec<InstanceOutcome>> {
    let one = |j: usize, carried: &mut [Option<crate::arch_forward::StructuralParams>]| -> Result<InstanceOutcome> {
        let prob = instance(cfg, i, j, &data.a)?;
        let runs = cfg
            .solvers
            .iter()
            .zip(carried.iter_mut())
            .map(|(kind, carry)| match run_solver(cfg, *kind, &prob, data.step, carry.as_ref()) {
                Ok((trace, estimate, seconds)) => {
                    if cfg.carry_params && kind.is_hgd() {
                        *carry = Some(trace.final_params);
                    }
                    RunOutcome::Done { trace, estimate, seconds }
                }
                Err(e) => RunOutcome::Failed(e.to_string()),
            })
            .collect();
        Ok(InstanceOutcome {
            matrix: i,
            signal: j,
            x_star: prob.x_star.clone(),
            runs,
        })
    };
    if cfg.carry_params {
        let mut carried = vec![None; cfg.solvers.len()];
        (0..cfg.n_signals_per_matrix).map(|j| one(j, &mut carried)).collect()
    } else {
        (0..cfg.n_signals_per_matrix)
            .into_par_iter()
            .map(|j| one(j, &mut vec![None; cfg.solvers.len()]))
            .collect()
    }
}

/// Runs every configured solver on every instance using `workers` threads.
pub fn run_experiment(cfg: &ExperimentConfig, workers: usize) -> Result<ExperimentOutput> {
    cfg.validate()?;
    if workers == 0 {
        return Err(Error::InvalidArgument("workers must be >= 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let outcomes: Vec<InstanceOutcome> = pool.install(|| {
        (0..cfg.n_matrices)
            .into_par_iter()
            .map(|i| run_signals(cfg, i, &matrix_data(cfg, i)?))
            .collect::<Result<Vec<_>>>()
    })?
    .into_iter()
    .flatten()
    .collect();
    Ok(reduce(cfg, outcomes, workers))
}

fn reduce(cfg: &ExperimentConfig, outcomes: Vec<InstanceOutcome>, workers: usize) -> ExperimentOutput {
    let hash = cfg.hash();
    let mut summaries = Vec::new();
    let mut timing = Vec::new();
    let mut failures = Vec::new();
    let mut traces = BTreeMap::new();

    for (k, kind) in cfg.solvers.iter().enumerate() {
        let mut sums = vec![0.0; cfg.iterations + 1];
        let mut completed = 0usize;
        let mut seconds = 0.0;
        let mut kept = Vec::new();
        for inst in &outcomes {
            match &inst.runs[k] {
                RunOutcome::Done { trace, seconds: s, .. } => {
                    for (acc, v) in sums.iter_mut().zip(trace.mse_curve()) {
                        *acc += v;
                    }
                    completed += 1;
                    seconds += s;
                    kept.push(trace.clone());
                }
                RunOutcome::Failed(error) => failures.push(FailureRecord {
                    matrix: inst.matrix,
                    signal: inst.signal,
                    solver: *kind,
                    error: error.clone(),
                }),
            }
        }
        let (mean_mse, final_mse) = if completed > 0 {
            let mean: Vec<f64> = sums.iter().map(|s| s / completed as f64).collect();
            let last = mean.last().copied();
            (mean, last)
        } else {
            (Vec::new(), None)
        };
        summaries.push(SolverSummary {
            solver: *kind,
            mean_mse,
            final_mse,
            completed,
            failed: outcomes.len() - completed,
        });
        timing.push(TimingRow {
            solver: *kind,
            mean_ms_per_signal: if completed > 0 { 1e3 * seconds / completed as f64 } else { 0.0 },
            training_ms: None,
        });
        traces.insert(*kind, kept);
    }
    failures.sort_by_key(|f| (f.matrix, f.signal, f.solver));

    let entries = outcomes
        .iter()
        .map(|inst| AuditEntry {
            matrix: inst.matrix,
            signal: inst.signal,
            x_star: inst.x_star.as_slice().to_vec(),
            finals: inst
                .runs
                .iter()
                .map(|r| match r {
                    RunOutcome::Done { estimate, .. } => Some(estimate.as_slice().to_vec()),
                    RunOutcome::Failed(_) => None,
                })
                .collect(),
        })
        .collect();

    let unix_time = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    ExperimentOutput {
        report: ExperimentReport {
            payload: ReportPayload {
                config_hash: hash.clone(),
                master_seed: cfg.master_seed,
                iterations: cfg.iterations,
                instances: outcomes.len(),
                solvers: summaries,
                failures,
            },
            timing,
            metadata: ReportMetadata {
                config_hash: hash,
                master_seed: cfg.master_seed,
                unix_time,
                workers,
            },
        },
        traces,
        audit: Audit {
            solvers: cfg.solvers.clone(),
            entries,
        },
    }
}

/// Mean per-signal wall-clock of each solver, measured on a single worker.
pub fn timing_report(cfg: &ExperimentConfig) -> Result<Vec<TimingRow>> {
    Ok(run_experiment(cfg, 1)?.report.timing)
}

// ---------------------------------------------------------------------------
// CSV export

pub const TRACE_HEADER: &str = "t,mse,objective,surrogate,gamma,w_r1,w_x1,w_z1,beta_r1,beta_x1,beta_z1";

/// One trace row; `w_*` columns hold the hard (rounded) weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: usize,
    pub mse: f64,
    pub objective: f64,
    pub surrogate: f64,
    pub gamma: f64,
    pub w_r1: f64,
    pub w_x1: f64,
    pub w_z1: Option<f64>,
    pub beta_r1: f64,
    pub beta_x1: f64,
    pub beta_z1: Option<f64>,
}

pub fn trace_rows(trace: &RunTrace) -> Vec<TraceRow> {
    trace
        .records
        .iter()
        .map(|rec| TraceRow {
            t: rec.t,
            mse: rec.point.mse,
            objective: rec.point.objective,
            surrogate: rec.point.surrogate,
            gamma: rec.params.gamma,
            w_r1: rec.hard.r[0],
            w_x1: rec.hard.x[0],
            w_z1: rec.hard.z.map(|z| z[0]),
            beta_r1: rec.params.beta_r[0],
            beta_x1: rec.params.beta_x[0],
            beta_z1: rec.params.beta_z.map(|b| b[0]),
        })
        .collect()
}

fn csv_error(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

pub fn trace_csv(trace: &RunTrace) -> Result<String> {
    if trace.is_empty() {
        return Err(Error::InvalidArgument("cannot export an empty trace".into()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in trace_rows(trace) {
        w.serialize(row).map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

pub fn export_trace_csv(trace: &RunTrace, path: &Path) -> Result<()> {
    std::fs::write(path, trace_csv(trace)?)?;
    Ok(())
}

pub fn parse_trace_csv(text: &str) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers().map_err(csv_error)?.iter().map(String::from).collect();
    if header.join(",") != TRACE_HEADER {
        return Err(Error::Parse("unexpected trace header".into()));
    }
    r.deserialize().map(|row| row.map_err(csv_error)).collect()
}

pub fn import_trace_csv(path: &Path) -> Result<Vec<TraceRow>> {
    parse_trace_csv(&std::fs::read_to_string(path)?)
}

/// Hard `w_{·,1}` per slot (rows `r0, x0[, z0], r1, ...`) and trace (columns).
pub fn heatmap_csv(traces: &[RunTrace]) -> Result<String> {
    let first = traces
        .first()
        .ok_or_else(|| Error::InvalidArgument("no traces to render".into()))?;
    for tr in traces {
        if tr.variant != first.variant {
            return Err(Error::InvalidArgument("traces mix ISTA and FISTA variants".into()));
        }
        if tr.len() != first.len() {
            return Err(Error::InvalidArgument("traces have different lengths".into()));
        }
    }
    let mut out = String::from("slot");
    for c in 0..traces.len() {
        let _ = write!(out, ",trace_{c}");
    }
    out.push('\n');
    let slots: &[char] = match first.variant {
        Variant::Ista => &['r', 'x'],
        Variant::Fista => &['r', 'x', 'z'],
    };
    for t in 0..first.len() {
        for &slot in slots {
            let _ = write!(out, "{slot}{t}");
            for tr in traces {
                let hard = &tr.records[t].hard;
                let w = match slot {
                    'r' => hard.r[0],
                    'x' => hard.x[0],
                    _ => hard.z.ok_or(Error::MissingState("z weights"))?[0],
                };
                let _ = write!(out, ",{w}");
            }
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn export_heatmap(traces: &[RunTrace], path: &Path) -> Result<()> {
    std::fs::write(path, heatmap_csv(traces)?)?;
    Ok(())
}

/// Mean MSE curve as `t,mse`.
pub fn mse_csv(summary: &SolverSummary) -> String {
    let mut out = String::from("t,mse\n");
    for (t, v) in summary.mean_mse.iter().enumerate() {
        let _ = writeln!(out, "{t},{v}");
    }
    out
}

/// Writes report, per-solver CSVs, stored traces and the audit file.
pub fn write_outputs(output: &ExperimentOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, body)?;
        written.push(path);
        Ok(())
    };
    put("report.json".into(), serde_json::to_string_pretty(&output.report)?)?;
    put("audit.json".into(), serde_json::to_string(&output.audit)?)?;
    for summary in &output.report.payload.solvers {
        let name = summary.solver.name();
        put(format!("mse_{name}.csv"), mse_csv(summary))?;
        let traces = &output.traces[&summary.solver];
        if let Some(first) = traces.first() {
            if !first.is_empty() {
                put(format!("trace_{name}.csv"), trace_csv(first)?)?;
                put(format!("heatmap_{name}.csv"), heatmap_csv(traces)?)?;
            }
        }
        put(format!("traces_{name}.json"), serde_json::to_string(traces)?)?;
    }
    Ok(written)
}

pub fn load_traces(path: &Path) -> Result<Vec<RunTrace>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// The canonical one-hot initialisation, for building zero-rate configs.
pub fn canonical_settings(variant: Variant, p: f64) -> HgdSettings {
    HgdSettings {
        p,
        rates: MetaRates::zero(variant),
        init_beta_r: SELECT_FIRST,
        init_beta_x: SELECT_SECOND,
        init_beta_z: (variant == Variant::Fista).then_some(SELECT_FIRST),
        init_gamma: None,
    }
}
