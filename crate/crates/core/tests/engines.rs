mod common;

use common::{random_matrix, rng};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use regmvst::dec::{DecParams, TimeVector};
use regmvst::engine::{
    check_convergence, default_init, fit, fit_with_restarts, random_init, DelayModel, EngineKind, FitConfig, Init,
};
use regmvst::model::{observed_loglik, Dataset, Subject, Theta};
use regmvst::simgen::{simulate, Scheme, SchemeConfig};

fn scheme1(n: usize, seed: u64) -> (Dataset, Theta) {
    simulate(&SchemeConfig::new(Scheme::S1s2, n, seed)).unwrap()
}

fn config(engine: EngineKind, k: usize, max_iter: u64) -> FitConfig {
    FitConfig { engine, workers_k: k, max_iter, trace_theta: true, ..FitConfig::default() }
}

fn max_trace_gap(a: &[Theta], b: &[Theta]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y).unwrap()).fold(0.0, f64::max)
}

#[test]
fn convergence_rule() {
    let truth = regmvst::simgen::reference_theta();
    assert!(check_convergence(&truth, &truth, 1e-300).unwrap());
    let mut moved = truth.clone();
    moved.beta[(1, 0)] += 2e-7;
    assert!(!check_convergence(&truth, &moved, 1e-7).unwrap());
    let stepped = Theta { dec: DecParams { rho1: 0.8, ..truth.dec }, ..truth.clone() };
    assert!(!check_convergence(&truth, &stepped, 1e-7).unwrap());
    let narrow = Theta::new(DMatrix::zeros(3, 1), DVector::zeros(1), DMatrix::identity(1, 1), 5.0, truth.dec).unwrap();
    assert!(check_convergence(&truth, &narrow, 1.0).is_err());
}

fn linear_dataset(noise: f64, seed: u64) -> (Dataset, DMatrix<f64>) {
    let mut r = rng(seed);
    let b = DMatrix::from_row_slice(2, 2, &[1.0, -0.5, 0.25, 2.0]);
    let subjects = (0..30)
        .map(|i| {
            let n = r.random_range(2..6);
            let x = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { r.random_range(-2.0..2.0) });
            let y = if noise > 0.0 { &x * &b + random_matrix(&mut r, n, 2, noise) } else { &x * &b };
            let t = TimeVector::new((0..n).map(|j| j as f64 + 0.5).collect()).unwrap();
            Subject::new(format!("L{i}"), y, x, t).unwrap()
        })
        .collect();
    (Dataset::new(subjects).unwrap(), b)
}

#[test]
fn default_start_is_pooled_least_squares() {
    let (data, b) = linear_dataset(0.0, 1);
    let (theta, ridge) = default_init(&data, 4).unwrap();
    assert!(!ridge);
    assert!((&theta.beta - &b).amax() < 1e-10);
    assert_eq!((theta.nu, theta.dec.rho1, theta.dec.rho2), (10.0, 0.5, 0.5));
    assert!(theta.a_row.iter().all(|a| a.abs() == 0.01));
    assert_eq!(default_init(&data, 4).unwrap(), (theta.clone(), false));

    let (jittered, _) = random_init(&data, 4).unwrap();
    assert!((3.0..=30.0).contains(&jittered.nu));
    assert!((&jittered.beta - &theta.beta).amax() > 0.0);
}

#[test]
fn start_scale_is_spd_on_random_data() {
    let mut r = rng(2);
    for seed in 0..20 {
        let (data, _) = linear_dataset(r.random_range(0.1..3.0), seed);
        let (theta, _) = default_init(&data, seed).unwrap();
        assert!(theta.psi.clone().cholesky().is_some());
    }
}

#[test]
fn collinear_covariates_use_a_ridge() {
    let (data, _) = linear_dataset(0.5, 3);
    let doubled = Dataset::new(
        data.subjects
            .iter()
            .map(|s| {
                let x = DMatrix::from_fn(s.n_rows(), 2, |i, _| s.x[(i, 1)]);
                Subject::new(s.id.clone(), s.y.clone(), x, s.t.clone()).unwrap()
            })
            .collect(),
    )
    .unwrap();
    assert!(default_init(&doubled, 0).unwrap().1);
}

#[test]
fn near_noiseless_data_recover_coefficients() {
    let (data, b) = linear_dataset(1e-6, 5);
    let (mut start, _) = default_init(&data, 0).unwrap();
    start.a_row.fill(0.0);
    let res = fit(&data, &FitConfig { max_iter: 200, init: Init::Explicit(start), ..FitConfig::default() }).unwrap();
    assert!((&res.theta_hat.beta - &b).amax() < 1e-5, "{}", res.theta_hat.beta);
}

#[test]
fn serial_fit_is_deterministic() {
    let (data, _) = scheme1(40, 3);
    let cfg = config(EngineKind::Ecme, 1, 15);
    let a = fit(&data, &cfg).unwrap();
    let b = fit(&data, &cfg).unwrap();
    assert_eq!(a.theta_trace, b.theta_trace);
    assert_eq!(a.theta_hat, b.theta_hat);
}

#[test]
fn single_worker_parallel_fit_replays_serial_fit() {
    let (data, _) = scheme1(40, 4);
    let serial = fit(&data, &config(EngineKind::Ecme, 1, 25)).unwrap();
    let parallel = fit(&data, &config(EngineKind::Pecme, 1, 25)).unwrap();
    assert_eq!(serial.theta_trace, parallel.theta_trace);
}

#[test]
fn parallel_iterates_match_serial_iterates() {
    let (data, _) = scheme1(60, 5);
    let serial = fit(&data, &config(EngineKind::Ecme, 1, 40)).unwrap();
    for k in [2, 4, 7] {
        let parallel = fit(&data, &config(EngineKind::Pecme, k, 40)).unwrap();
        assert!(max_trace_gap(&serial.theta_trace, &parallel.theta_trace) < 1e-10, "k = {k}");
        assert_eq!(parallel.comm_rounds, 5 * parallel.iterations);
    }
}

#[test]
fn serial_engine_does_not_exchange_messages() {
    let (data, _) = scheme1(30, 6);
    let res = fit(&data, &config(EngineKind::Ecme, 4, 10)).unwrap();
    assert_eq!(res.comm_rounds, 0);
    assert_eq!(res.iteration_timings.len() as u64, res.iterations);
}

#[test]
fn asynchronous_engine_exchanges_once_per_iteration() {
    let (data, _) = scheme1(60, 7);
    let cfg = FitConfig { gamma: 0.5, zeta: 0.2, seed: 9, ..config(EngineKind::Adecme, 4, 60) };
    let res = fit(&data, &cfg).unwrap();
    assert_eq!(res.comm_rounds, res.iterations);
    assert!(res.flags.full_sync_iterations >= 1);
}

#[test]
fn asynchronous_engine_reports_staleness_under_delays() {
    let (data, _) = scheme1(80, 8);
    let cfg = FitConfig {
        gamma: 0.5,
        delay: DelayModel::Uniform { min_ms: 0.0, max_ms: 4.0 },
        trace_loglik: true,
        ..config(EngineKind::Adecme, 4, 80)
    };
    let res = fit(&data, &cfg).unwrap();
    let hist = &res.flags.stale_lag_histogram;
    let stale: u64 = hist.iter().filter(|(lag, _)| **lag > 0).map(|(_, n)| n).sum();
    assert!(stale > 0, "{hist:?}");
    assert_eq!(*hist.keys().max().unwrap(), res.flags.max_stale_lag);
    assert!(res.flags.max_stale_lag < regmvst::engine::WATCHDOG_ITERATIONS);
    let last = *res.loglik_trace.last().unwrap();
    assert!(last >= res.loglik_initial.unwrap());
}

#[test]
fn zero_tolerance_runs_to_the_iteration_cap() {
    let (data, _) = scheme1(12, 9);
    for engine in [EngineKind::Ecme, EngineKind::Pecme, EngineKind::Adecme] {
        let res = fit(&data, &FitConfig { epsilon: 0.0, ..config(engine, 3, 7) }).unwrap();
        assert_eq!(res.iterations, 7);
        assert!(!res.converged);
    }
}

#[test]
fn serial_loglik_trace_is_nondecreasing() {
    let (data, _) = scheme1(80, 10);
    let res = fit(&data, &FitConfig { trace_loglik: true, ..config(EngineKind::Ecme, 1, 60) }).unwrap();
    let mut prev = res.loglik_initial.unwrap();
    for &ll in &res.loglik_trace {
        assert!(ll >= prev - 1e-8, "{ll} < {prev}");
        prev = ll;
    }
    assert_eq!(res.loglik_trace.len() as u64, res.iterations);
}

#[test]
fn restarts_keep_the_best_final_loglik() {
    let (data, _) = scheme1(40, 11);
    let out = fit_with_restarts(&data, &config(EngineKind::Ecme, 1, 30), 3).unwrap();
    assert_eq!(out.final_logliks.len(), 3);
    let best = out.final_logliks.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.final_logliks[out.chosen], best);
    assert_eq!(observed_loglik(&data, &out.best.theta_hat).unwrap(), best);
}

#[test]
fn explicit_start_is_used_verbatim() {
    let (data, truth) = scheme1(20, 12);
    let res = fit(&data, &FitConfig { init: Init::Explicit(truth.clone()), ..config(EngineKind::Ecme, 1, 2) }).unwrap();
    assert_eq!(res.theta_init, truth);
    let wrong = Theta::new(DMatrix::zeros(2, 2), DVector::zeros(2), DMatrix::identity(2, 2), 5.0, truth.dec).unwrap();
    assert!(fit(&data, &FitConfig { init: Init::Explicit(wrong), ..FitConfig::default() }).is_err());
}

#[test]
fn invalid_configurations_are_rejected() {
    let (data, _) = scheme1(5, 13);
    let base = FitConfig::default();
    for bad in [
        FitConfig { gamma: 0.0, ..base.clone() },
        FitConfig { zeta: 1.0, ..base.clone() },
        FitConfig { workers_k: 0, ..base.clone() },
        FitConfig { max_iter: 0, ..base.clone() },
        FitConfig { epsilon: f64::NAN, ..base.clone() },
        FitConfig { delay: DelayModel::Uniform { min_ms: 3.0, max_ms: 1.0 }, ..base.clone() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
    assert!(fit(&data, &FitConfig { engine: EngineKind::Pecme, workers_k: 6, ..base.clone() }).is_err());
    assert_eq!(FitConfig { workers_k: 8, gamma: 0.875, ..base }.wait_count(), 7);
}
