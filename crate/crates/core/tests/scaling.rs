//! Wall-clock scaling checks. Each measurement keeps the fastest of several
//! repetitions to damp scheduler noise.

use std::time::Instant;

use hgdas::hgd_solver::{hgd_run, HgdConfig, Variant};
use hgdas::hypergrad::hypergrad_all;
use hgdas::arch_forward::{as_step, ForwardMode, SolverState};
use hgdas::problem_gen::{build_instance, GeneratorConfig, ProblemInstance};
use nalgebra::DVector;

fn instance(m: usize, n: usize) -> ProblemInstance {
    build_instance(&GeneratorConfig { m, n, seed: 3, ..GeneratorConfig::default() }, 10.0).unwrap()
}

fn fastest<F: FnMut()>(reps: usize, mut f: F) -> f64 {
    (0..reps)
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed().as_secs_f64()
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn per_signal_time_is_linear_in_iterations() {
    let prob = instance(75, 150);
    for variant in [Variant::Ista, Variant::Fista] {
        let time = |iterations| {
            let cfg = HgdConfig { iterations, ..HgdConfig::defaults(variant) };
            let init = cfg.initial_params(&prob).unwrap();
            fastest(15, || {
                for _ in 0..10 {
                    hgd_run(&prob, &cfg, init).unwrap();
                }
            })
        };
        let ratio = time(40) / time(20);
        assert!((1.6..=2.4).contains(&ratio), "{variant:?}: T=40 / T=20 = {ratio}");
    }
}

#[test]
fn hypergradient_cost_is_linear_in_n() {
    let time = |n: usize| {
        let prob = instance(n / 2, n);
        let params = HgdConfig::defaults(Variant::Fista).initial_params(&prob).unwrap();
        let state = SolverState::fista(DVector::from_element(n, 0.1));
        let stepped = as_step(&state, &params, ForwardMode::Hard, &prob).unwrap();
        fastest(15, || {
            for _ in 0..20 {
                hypergrad_all(&stepped, &params, &prob, 50.0).unwrap();
            }
        })
    };
    // M grows with N, so O(MN) means x4 per doubling and O(N²·M) would be x8
    let ratio = time(800) / time(400);
    assert!(ratio < 6.0, "doubling M and N scaled time by {ratio}");

    let fixed_m = |n: usize| {
        let prob = instance(100, n);
        let params = HgdConfig::defaults(Variant::Ista).initial_params(&prob).unwrap();
        let state = SolverState::ista(DVector::from_element(n, 0.1));
        let stepped = as_step(&state, &params, ForwardMode::Hard, &prob).unwrap();
        fastest(15, || {
            for _ in 0..20 {
                hypergrad_all(&stepped, &params, &prob, 50.0).unwrap();
            }
        })
    };
    let ratio = fixed_m(1600) / fixed_m(800);
    assert!((1.4..=3.0).contains(&ratio), "doubling N scaled time by {ratio}");
}
