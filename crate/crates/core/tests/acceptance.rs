//! Acceptance suite. Runs with `harness = false` so every criterion prints a
//! PASS/FAIL line even when the run succeeds; the process exits non-zero if
//! any criterion fails.

use std::time::{Duration, Instant};

use nalgebra::DVector;

use hgdas::arch_forward::{as_step, ForwardMode, SolverState, StructuralParams};
use hgdas::classic_solvers::{fista, ista, lipschitz_step};
use hgdas::harness::{heatmap_csv, run_experiment, ExperimentConfig, ExperimentOutput, SolverKind};
use hgdas::hgd_solver::{hgd_run, HgdConfig, MetaRates, RunTrace, Variant};
use hgdas::hypergrad::{run_gradcheck, GradcheckConfig};
use hgdas::problem_gen::{build_instance, GeneratorConfig, MatrixKind, ProblemInstance};
use hgdas::smooth_math::{smooth_l1, smooth_soft_threshold, soft_threshold};

const T: usize = 40;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn instance(seed: u64) -> ProblemInstance {
    let kind = if seed.is_multiple_of(2) {
        MatrixKind::CorrelatedGaussian { rho: 0.5 }
    } else {
        MatrixKind::IidGaussian
    };
    let cfg = GeneratorConfig { seed: 1000 + seed, matrix_kind: kind, ..GeneratorConfig::default() };
    build_instance(&cfg, 10.0).expect("instance")
}

fn oracle_suite() -> Outcome {
    let start = Instant::now();
    let report = match run_gradcheck(&GradcheckConfig::default()) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let elapsed = start.elapsed();
    let worst = report
        .checks
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("checks");
    let all = report.checks.iter().all(|c| c.passed());
    outcome(
        all && elapsed < Duration::from_secs(30),
        format!(
            "{} checks x 100 states, worst rel err {:.2e} ({} {}), {:.1}s",
            report.checks.len(),
            worst.max_rel_err,
            worst.variant,
            worst.param,
            elapsed.as_secs_f64()
        ),
    )
}

fn exact_negation(sweep: &ExperimentOutput) -> Outcome {
    let report = match run_gradcheck(&GradcheckConfig::default()) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    // also every update applied during the online sweep
    let mut pairs = 0usize;
    let mut bad = 0usize;
    for kind in [SolverKind::HgdAsIsta, SolverKind::HgdAsFista] {
        for trace in &sweep.traces[&kind] {
            for rec in &trace.records {
                let g = rec.hypergrads.expect("hgd records carry hypergradients");
                for d in [Some(g.d_beta_r), Some(g.d_beta_x), g.d_beta_z].into_iter().flatten() {
                    pairs += 1;
                    if d[1] != -d[0] {
                        bad += 1;
                    }
                }
            }
        }
    }
    outcome(
        report.negation_exact && bad == 0,
        format!("oracle states exact: {}; online sweep {bad}/{pairs} pairs off", report.negation_exact),
    )
}

fn baseline_equivalence() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let prob = instance(seed);
        let gamma = lipschitz_step(&prob).expect("step");
        let x0 = DVector::zeros(prob.n());
        for (params, state, reference) in [
            (StructuralParams::ista(gamma), SolverState::ista(x0.clone()), ista(&prob, gamma, T, &x0)),
            (StructuralParams::fista(gamma), SolverState::fista(x0.clone()), fista(&prob, gamma, T, &x0)),
        ] {
            let (_, classic) = reference.expect("classic run");
            let mut state = state;
            for t in 0..T {
                let stepped = as_step(&state, &params, ForwardMode::Hard, &prob).expect("step");
                let diff = (stepped.estimate_next().expect("estimate") - &classic.records[t + 1].estimate).amax();
                worst = worst.max(diff);
                state = stepped.advance().expect("advance");
            }
        }
    }
    outcome(worst <= 1e-12, format!("max abs iterate diff {worst:.1e} over 20 instances, T={T}"))
}

fn zero_rate_reduction() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let prob = instance(seed);
        let gamma = lipschitz_step(&prob).expect("step");
        let x0 = DVector::zeros(prob.n());
        for variant in [Variant::Ista, Variant::Fista] {
            let (_, classic) = match variant {
                Variant::Ista => ista(&prob, gamma, T, &x0),
                Variant::Fista => fista(&prob, gamma, T, &x0),
            }
            .expect("classic run");
            // every prefix length, so the whole trajectory is compared
            for len in 1..=T {
                let cfg = HgdConfig {
                    iterations: len,
                    ..HgdConfig::defaults(variant).with_rates(MetaRates::zero(variant))
                };
                let init = cfg.initial_params(&prob).expect("init");
                let (x, _) = hgd_run(&prob, &cfg, init).expect("hgd run");
                worst = worst.max((x - &classic.records[len].estimate).amax());
            }
        }
    }
    outcome(worst <= 1e-12, format!("max abs iterate diff {worst:.1e} over 20 instances x 2 variants"))
}

fn finite_trace(trace: &RunTrace) -> bool {
    trace.initial.mse.is_finite()
        && trace.records.iter().all(|r| {
            r.point.mse.is_finite()
                && r.point.objective.is_finite()
                && r.point.surrogate.is_finite()
                && r.params.gamma.is_finite()
                && r.params.beta_r.iter().chain(&r.params.beta_x).all(|b| b.is_finite())
                && r.params.beta_z.is_none_or(|b| b.iter().all(|v| v.is_finite()))
                && r.hypergrads.is_none_or(|g| g.is_finite())
        })
}

fn fig1_ordering(sweep: &ExperimentOutput, elapsed: Duration) -> Outcome {
    let payload = &sweep.report.payload;
    let final_of = |k| sweep.report.summary(k).and_then(|s| s.final_mse).unwrap_or(f64::NAN);
    let (fi, ff, hi, hf) = (
        final_of(SolverKind::IstaFixed),
        final_of(SolverKind::FistaFixed),
        final_of(SolverKind::HgdAsIsta),
        final_of(SolverKind::HgdAsFista),
    );
    let finite = sweep.traces.values().flatten().all(finite_trace);
    let audit_ok = sweep.audit.recompute_final_mse().into_iter().all(|(kind, mse)| {
        let reported = final_of(kind);
        mse.is_some_and(|m| (m - reported).abs() <= 1e-12 * reported.max(1.0))
    });
    outcome(
        hi < fi && hf < ff && finite && payload.failures.is_empty() && audit_ok && elapsed < Duration::from_secs(300),
        format!(
            "final MSE ista {fi:.4} > hgd_as_ista {hi:.4}; fista {ff:.4} > hgd_as_fista {hf:.4}; \
             {} instances, finite {finite}, audit {audit_ok}, {:.1}s",
            payload.instances,
            elapsed.as_secs_f64()
        ),
    )
}

fn ista_monotone() -> Outcome {
    let mut worst = f64::NEG_INFINITY;
    for seed in 0..20 {
        let prob = instance(seed);
        let gamma = lipschitz_step(&prob).expect("step");
        let (_, trace) = ista(&prob, gamma, T, &DVector::zeros(prob.n())).expect("ista");
        for w in trace.records.windows(2) {
            worst = worst.max(w[1].objective - w[0].objective);
        }
    }
    outcome(worst <= 1e-10, format!("max objective increase {worst:.2e}"))
}

fn smoothing_envelope() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let mut ok = true;
    let mut worst_l1: f64 = 0.0;
    let mut worst_st: f64 = 0.0;
    for p in [10.0, 50.0, 200.0] {
        for scale in [1e-3, 0.1, 1.0, 10.0] {
            let x = DVector::from_fn(201, |i, _| scale * (i as f64 - 100.0) / 100.0);
            let gap = x.lp_norm(1) - smooth_l1(&x, p);
            worst_l1 = worst_l1.max(gap * p / (2.0 * x.len() as f64 * ln2));
            ok &= gap >= 0.0 && gap <= 2.0 * x.len() as f64 * ln2 / p;
        }
        for tau in [0.0, 0.05, 1.0] {
            for i in 0..=4000 {
                let q = -5.0 + i as f64 * 10.0 / 4000.0;
                let d = (smooth_soft_threshold(q, tau, p) - soft_threshold(q, tau)).abs();
                worst_st = worst_st.max(d * p / (2.0 * ln2));
                ok &= d <= 2.0 * ln2 / p;
            }
        }
    }
    outcome(
        ok,
        format!("worst gap / bound: l1 {worst_l1:.3}, threshold {worst_st:.3} at p in {{10, 50, 200}}"),
    )
}

fn timing_claims(sweep: &ExperimentOutput) -> Outcome {
    let row = |k| sweep.report.timing(k).expect("timing row");
    let (fi, ff, hi, hf) = (
        row(SolverKind::IstaFixed),
        row(SolverKind::FistaFixed),
        row(SolverKind::HgdAsIsta),
        row(SolverKind::HgdAsFista),
    );
    let slower = hi.mean_ms_per_signal > fi.mean_ms_per_signal && hf.mean_ms_per_signal > ff.mean_ms_per_signal;
    let no_training = hi.training_ms.unwrap_or(0.0) == 0.0 && hf.training_ms.unwrap_or(0.0) == 0.0;
    outcome(
        slower && no_training,
        format!(
            "ms/signal ista {:.3} < hgd {:.3}; fista {:.3} < hgd {:.3}; hgd training time none",
            fi.mean_ms_per_signal, hi.mean_ms_per_signal, ff.mean_ms_per_signal, hf.mean_ms_per_signal
        ),
    )
}

fn determinism(cfg: &ExperimentConfig, one_worker: &ExperimentOutput) -> Outcome {
    let eight = match run_experiment(cfg, 8) {
        Ok(o) => o,
        Err(e) => return outcome(false, e.to_string()),
    };
    let a = serde_json::to_string(&one_worker.report.payload).expect("json");
    let b = serde_json::to_string(&eight.report.payload).expect("json");
    outcome(a == b, format!("payload {} bytes, 1 vs 8 workers identical: {}", a.len(), a == b))
}

fn heatmaps(sweep: &ExperimentOutput) -> Outcome {
    let mut ok = true;
    let ista_map = heatmap_csv(&sweep.traces[&SolverKind::IstaFixed]).expect("heatmap");
    let rows: Vec<&str> = ista_map.lines().skip(1).collect();
    ok &= rows.len() == 2 * T;
    for (i, row) in rows.iter().enumerate() {
        let want = if i % 2 == 0 { "1" } else { "0" };
        ok &= row.split(',').skip(1).all(|v| v == want);
    }
    let mut cells = 0usize;
    for kind in [SolverKind::HgdAsIsta, SolverKind::HgdAsFista] {
        let map = heatmap_csv(&sweep.traces[&kind]).expect("heatmap");
        for row in map.lines().skip(1) {
            for v in row.split(',').skip(1) {
                cells += 1;
                ok &= v == "0" || v == "1";
            }
        }
        for trace in &sweep.traces[&kind] {
            for rec in &trace.records {
                for w in [Some(rec.hard.r), Some(rec.hard.x), rec.hard.z].into_iter().flatten() {
                    ok &= w == [1.0, 0.0] || w == [0.0, 1.0];
                }
            }
        }
    }
    outcome(ok, format!("fixed ISTA alternates over {} rows; {cells} HGD cells one-hot", rows.len()))
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();

    let cfg = ExperimentConfig::default();
    let start = Instant::now();
    let sweep = run_experiment(&cfg, 1).expect("desk-scale sweep");
    let sweep_time = start.elapsed();

    results.push(("1 hypergradient oracle suite", oracle_suite()));
    results.push(("2 exact negation identity", exact_negation(&sweep)));
    results.push(("3 baseline equivalence", baseline_equivalence()));
    results.push(("4 zero-rate reduction", zero_rate_reduction()));
    results.push(("5 MSE ordering at desk scale", fig1_ordering(&sweep, sweep_time)));
    results.push(("6 ISTA monotone descent", ista_monotone()));
    results.push(("7 smoothing envelope", smoothing_envelope()));
    results.push(("8 timing structure", timing_claims(&sweep)));
    results.push(("9 determinism across workers", determinism(&cfg, &sweep)));
    results.push(("10 heatmap construction", heatmaps(&sweep)));

    let mut failed = 0;
    for (name, o) in &results {
        println!("{} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.passed);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
