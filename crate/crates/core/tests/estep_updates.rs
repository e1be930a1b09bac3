mod common;

use common::{integrate_half_line, random_matrix, random_spd, random_vector, rng};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use regmvst::cm::{
    nu_equation, select_dec, select_rho, solve_nu, update_a, update_beta, update_psi, AggregateStats, NU_UPPER,
};
use regmvst::dec::{dec_correlation, dec_factor, DecParams, TimeVector, GRID};
use regmvst::estep::{
    estep_refresh_a_stats, estep_refresh_psi_stats, estep_subject, grid_loglik_partition, GridAxis, GridLoglik,
    GridMode, Partition, PartitionStats,
};
use regmvst::model::{observed_loglik, Dataset, Subject, Theta};
use regmvst::mvst::{gig_moments, GigParams};
use regmvst::special::ln_gamma;

fn random_times(r: &mut impl Rng, n: usize) -> TimeVector {
    let mut t: Vec<f64> = (0..n).map(|_| r.random_range(0.0..4.0)).collect();
    t.sort_by(f64::total_cmp);
    TimeVector::new(t).unwrap()
}

fn random_subject(r: &mut impl Rng, id: usize, n: usize, p: usize, q: usize) -> Subject {
    Subject::new(format!("S{id}"), random_matrix(r, n, p, 3.0), random_matrix(r, n, q, 1.5), random_times(r, n)).unwrap()
}

fn random_theta(r: &mut impl Rng, p: usize, q: usize) -> Theta {
    let dec = DecParams::new(GRID[r.random_range(1..10)], GRID[r.random_range(1..10)]).unwrap();
    Theta::new(random_matrix(r, q, p, 1.0), random_vector(r, p, 2.0), random_spd(r, p), r.random_range(3.0..20.0), dec)
        .unwrap()
}

/// δ, ρ and the residual with plain dense inverses.
fn dense_forms(s: &Subject, theta: &Theta) -> (f64, f64, DMatrix<f64>, DMatrix<f64>) {
    let sigma_inv = dec_correlation(&s.t, &theta.dec).try_inverse().unwrap();
    let psi_inv = theta.psi.clone().try_inverse().unwrap();
    let resid = &s.y - &s.x * &theta.beta;
    let ones = DMatrix::from_element(s.n_rows(), 1, 1.0);
    let delta = (&psi_inv * resid.transpose() * &sigma_inv * &resid).trace();
    let rho = (ones.transpose() * &sigma_inv * &ones)[(0, 0)] * theta.a_row.dot(&(&psi_inv * &theta.a_row));
    (delta, rho, resid, sigma_inv)
}

#[test]
fn correlation_matches_power_law_reference() {
    let c = dec_correlation(&TimeVector::new(vec![1.0, 3.0]).unwrap(), &DecParams::new(0.9, 0.5).unwrap());
    // 0.9^√2 to 20 digits
    assert!((c[(0, 1)] - 0.861_567_158_982_550_263_29).abs() < 1e-15);
    assert_eq!(c[(0, 0)], 1.0);
}

#[test]
fn correlation_factor_is_valid_over_the_grid() {
    let mut r = rng(12);
    for _ in 0..20 {
        let n = r.random_range(1..12);
        let t = random_times(&mut r, n);
        for &a in &GRID {
            for &b in &GRID {
                let p = DecParams::new(a, b).unwrap();
                let f = dec_factor(&t, &p).unwrap();
                let back = &f.lower * f.lower.transpose();
                let corr = dec_correlation(&t, &p);
                let tol = if f.jittered { 1e-9 } else { 1e-10 };
                assert!((back - corr).amax() < tol);
            }
        }
    }
}

#[test]
fn tied_times_use_a_small_gap() {
    let t = TimeVector::new(vec![1.0, 1.0, 2.0]).unwrap();
    assert!(t.has_ties());
    let p = DecParams::new(0.5, 1e-5).unwrap();
    let c = dec_correlation(&t, &p);
    assert!(c[(0, 1)] < 1.0);
    assert!(dec_factor(&t, &p).is_ok());
}

#[test]
fn latent_moments_equal_gig_moments() {
    let mut r = rng(70);
    for i in 0..100 {
        let (n, p, q) = (r.random_range(1..8), r.random_range(1..4), r.random_range(1..4));
        let s = random_subject(&mut r, i, n, p, q);
        let theta = random_theta(&mut r, p, q);
        let (delta, rho, _, _) = dense_forms(&s, &theta);
        let lambda = -0.5 * (theta.nu + (n * p) as f64);
        let want = gig_moments(&GigParams::new(rho, delta + theta.nu, lambda).unwrap()).unwrap();
        let got = estep_subject(&s, &theta).unwrap();
        for (g, w, what) in [(got.a, want.e_w, "a"), (got.b, want.e_inv_w, "b"), (got.c, want.e_log_w, "c")] {
            assert!((g - w).abs() <= 1e-10 * w.abs().max(1.0), "subject {i} {what}: {g} vs {w}");
        }
        assert!(got.a * got.b >= 1.0 - 1e-12);
    }
}

#[test]
fn latent_moments_match_posterior_quadrature() {
    // posterior of W ∝ N(vec Y; vec(Xβ + W 1𝒜), W Ψ⊗Σ) · InvGamma(ν/2, ν/2)
    let mut r = rng(71);
    let s = random_subject(&mut r, 0, 2, 2, 2);
    let theta = random_theta(&mut r, 2, 2);
    let sigma = dec_correlation(&s.t, &theta.dec);
    let cov = theta.psi.kronecker(&sigma);
    let cov_inv = cov.clone().try_inverse().unwrap();
    let resid: DVector<f64> = DVector::from_column_slice((&s.y - &s.x * &theta.beta).as_slice());
    let shift = DVector::from_column_slice(DMatrix::from_fn(2, 2, |_, j| theta.a_row[j]).as_slice());
    let nu = theta.nu;
    let log_post = |w: f64| {
        let e = &resid - &shift * w;
        -0.5 * (4.0 * w.ln() + e.dot(&(&cov_inv * &e)) / w) + 0.5 * nu * (0.5 * nu).ln()
            - ln_gamma(0.5 * nu)
            - (0.5 * nu + 1.0) * w.ln()
            - 0.5 * nu / w
    };
    let got = estep_subject(&s, &theta).unwrap();
    let peak = log_post(got.a);
    let mass = |f: &dyn Fn(f64) -> f64| integrate_half_line(|w| f(w) * (log_post(w) - peak).exp(), 1e-13);
    let z = mass(&|_| 1.0);
    let e_w = mass(&|w| w) / z;
    let e_inv = mass(&|w| 1.0 / w) / z;
    let e_log = mass(&|w| w.ln()) / z;
    assert!((got.a - e_w).abs() < 1e-6 * e_w.max(1.0), "{} vs {e_w}", got.a);
    assert!((got.b - e_inv).abs() < 1e-6 * e_inv.max(1.0), "{} vs {e_inv}", got.b);
    assert!((got.c - e_log).abs() < 1e-6, "{} vs {e_log}", got.c);
}

#[test]
fn sufficient_statistics_match_dense_algebra() {
    let mut r = rng(72);
    for i in 0..20 {
        let (n, p, q) = (r.random_range(1..7), r.random_range(1..4), r.random_range(1..4));
        let s = random_subject(&mut r, i, n, p, q);
        let theta = random_theta(&mut r, p, q);
        let (_, _, resid, si) = dense_forms(&s, &theta);
        let st = estep_subject(&s, &theta).unwrap();
        let big_a = DMatrix::from_fn(n, p, |_, j| theta.a_row[j]);
        let ones = DVector::from_element(n, 1.0);
        let xs = s.x.transpose() * &si;
        let close = |g: &DMatrix<f64>, w: &DMatrix<f64>| (g - w).amax() <= 1e-9 * w.amax().max(1.0);
        assert!(close(&st.s_beta1, &(&xs * &s.x * st.b)));
        assert!(close(&st.s_beta2, &(-(&xs * &big_a) + &xs * &s.y * st.b)));
        let u = resid.transpose() * &si * &ones;
        assert!(close(&DMatrix::from_column_slice(p, 1, st.s_a1.as_slice()), &DMatrix::from_column_slice(p, 1, u.as_slice())));
        assert!((st.s_a2 - st.a * ones.dot(&(&si * &ones))).abs() < 1e-9);
        let cross = big_a.transpose() * &si * &resid;
        let psi = resid.transpose() * &si * &resid * st.b - &cross - cross.transpose()
            + big_a.transpose() * &si * &big_a * st.a;
        assert!(close(&st.s_psi, &psi));
        assert_eq!(st.s_nu, st.b + st.c);
        assert_eq!((st.s_beta1.shape(), st.s_beta2.shape(), st.s_psi.shape()), ((q, q), (q, p), (p, p)));
    }
}

#[test]
fn refreshed_statistics() {
    let mut r = rng(73);
    let s = random_subject(&mut r, 0, 4, 2, 3);
    let theta = random_theta(&mut r, 2, 3);
    let st = estep_subject(&s, &theta).unwrap();
    let (u, a2) = estep_refresh_a_stats(&s, &theta, st.a).unwrap();
    assert_eq!((u, a2), (st.s_a1.clone(), st.s_a2));
    assert!((estep_refresh_psi_stats(&s, &theta, st.a, st.b).unwrap() - &st.s_psi).amax() < 1e-12);

    // responses exactly on the regression surface
    let exact = Subject::new("E", &s.x * &theta.beta, s.x.clone(), s.t.clone()).unwrap();
    let (u, _) = estep_refresh_a_stats(&exact, &theta, 1.3).unwrap();
    assert!(u.amax() < 1e-10);
    let mut no_skew = theta.clone();
    no_skew.a_row = DVector::zeros(2);
    assert!(estep_refresh_psi_stats(&exact, &no_skew, 1.3, 0.7).unwrap().amax() < 1e-10);

    let moved = Theta { beta: &theta.beta * 0.5, ..theta.clone() };
    let psi = estep_refresh_psi_stats(&s, &moved, st.a, st.b).unwrap();
    assert!((&psi - psi.transpose()).amax() < 1e-12);
}

fn random_dataset(r: &mut impl Rng, n: usize, p: usize, q: usize) -> Dataset {
    let subjects = (0..n)
        .map(|i| {
            let rows = r.random_range(1..6);
            random_subject(r, i, rows, p, q)
        })
        .collect();
    Dataset::new(subjects).unwrap()
}

fn assert_stats_identical(a: &PartitionStats, b: &PartitionStats) {
    assert_eq!(a.s_beta1.value(), b.s_beta1.value());
    assert_eq!(a.s_beta2.value(), b.s_beta2.value());
    assert_eq!(a.s_nu.value(), b.s_nu.value());
    assert_eq!(a.s_a1.value(), b.s_a1.value());
    assert_eq!(a.s_a2.value(), b.s_a2.value());
    assert_eq!(a.s_psi.value(), b.s_psi.value());
    assert_eq!((a.total_rows, a.subject_count), (b.total_rows, b.subject_count));
    let (ga, gb) = (a.grid.as_ref().unwrap().values(), b.grid.as_ref().unwrap().values());
    assert_eq!(ga, gb);
}

#[test]
fn partition_sums_are_exactly_additive() {
    let mut r = rng(74);
    let data = random_dataset(&mut r, 40, 2, 2);
    let theta = random_theta(&mut r, 2, 2);
    let whole = Partition::new(data.subjects.clone()).estep(&theta, 0, true).unwrap();
    for cuts in [vec![13, 27], vec![1, 2, 39], vec![20]] {
        let mut merged = PartitionStats::empty(2, 2, 0);
        let bounds: Vec<usize> = [0].into_iter().chain(cuts).chain([40]).collect();
        for w in bounds.windows(2) {
            let part = Partition::new(data.subjects[w[0]..w[1]].to_vec()).estep(&theta, 0, true).unwrap();
            merged.merge(&part);
        }
        assert_stats_identical(&whole, &merged);
    }
    let mut reversed = data.subjects.clone();
    reversed.reverse();
    assert_stats_identical(&whole, &Partition::new(reversed).estep(&theta, 0, true).unwrap());
}

#[test]
fn grid_values_are_observed_logliks() {
    let mut r = rng(75);
    let data = random_dataset(&mut r, 15, 2, 1);
    let theta = random_theta(&mut r, 2, 1);
    let grid = grid_loglik_partition(&data.subjects, &theta, GridMode::Stale).unwrap();
    for (i, &g) in GRID.iter().enumerate() {
        let at = Theta { dec: DecParams { rho1: g, ..theta.dec }, ..theta.clone() };
        let want = observed_loglik(&data, &at).unwrap();
        assert!((grid.rho1_values[i] - want).abs() < 1e-9 * want.abs());
    }
    let fresh = grid_loglik_partition(&data.subjects, &theta, GridMode::Fresh { rho1: 0.3 }).unwrap();
    let mut part = Partition::new(data.subjects.clone());
    let direct: Vec<f64> =
        part.grid(&theta, GridAxis::Rho2 { rho1: 0.3 }).unwrap().iter().map(|s| s.value()).collect();
    assert_eq!(fresh.rho2_values, direct);
    assert_eq!(fresh.rho1_values, grid.rho1_values);
}

#[test]
fn refresh_before_estep_is_an_error() {
    let mut r = rng(76);
    let data = random_dataset(&mut r, 3, 1, 1);
    let theta = random_theta(&mut r, 1, 1);
    let mut part = Partition::new(data.subjects);
    assert!(part.refresh_a(&theta).is_err());
    part.estep(&theta, 1, false).unwrap();
    assert!(part.refresh_psi(&theta).is_ok());
}

fn aggregate(p: usize, q: usize) -> AggregateStats {
    AggregateStats {
        s_beta1: DMatrix::identity(q, q),
        s_beta2: DMatrix::zeros(q, p),
        s_nu: 0.0,
        s_a1: DVector::zeros(p),
        s_a2: 1.0,
        s_psi: DMatrix::identity(p, p),
        total_rows: 1,
        n_subjects: 1,
    }
}

#[test]
fn beta_update_solves_normal_equations() {
    let mut r = rng(77);
    let s1 = random_spd(&mut r, 3);
    let b = random_matrix(&mut r, 3, 2, 2.0);
    let agg = AggregateStats { s_beta1: s1.clone(), s_beta2: &s1 * &b, ..aggregate(2, 3) };
    assert!((update_beta(&agg).unwrap() - b).amax() < 1e-12);
    let scalar = AggregateStats { s_beta1: DMatrix::from_element(1, 1, 4.0), s_beta2: DMatrix::from_element(1, 1, 3.0), ..aggregate(1, 1) };
    assert_eq!(update_beta(&scalar).unwrap()[(0, 0)], 0.75);
    let singular = AggregateStats { s_beta1: DMatrix::zeros(3, 3), ..agg };
    assert!(update_beta(&singular).is_err());
}

#[test]
fn nu_root_reference_values() {
    // 50-digit bisection references
    for (target, want) in [(1.2, 5.309_701_931_116_706_168_1), (1.05, 20.327_644_582_774_497_772)] {
        let u = solve_nu(target).unwrap();
        assert!(!u.clamped);
        assert!((u.nu - want).abs() < 1e-8 * want, "{} vs {want}", u.nu);
        assert!(nu_equation(u.nu, target).unwrap().abs() < 1e-8);
    }
    let target = nu_equation(5.0, 0.0).unwrap();
    assert!((solve_nu(target).unwrap().nu - 5.0).abs() < 1e-8);
}

#[test]
fn nu_root_clamps_outside_the_bracket() {
    let high = solve_nu(1.0).unwrap();
    assert!(high.clamped && high.nu == NU_UPPER);
    let low = solve_nu(50.0).unwrap();
    assert!(low.clamped && low.nu == regmvst::cm::NU_LOWER);
    assert!(solve_nu(f64::NAN).is_err());
}

#[test]
fn skewness_and_scale_updates() {
    let agg = AggregateStats { s_a1: DVector::from_vec(vec![3.0, -3.0]), s_a2: 1.5, ..aggregate(2, 1) };
    assert_eq!(update_a(&agg).unwrap().as_slice(), &[2.0, -2.0]);
    assert!(update_a(&AggregateStats { s_a2: 0.0, ..agg.clone() }).is_err());

    let psi = update_psi(&AggregateStats { s_psi: DMatrix::identity(2, 2) * 2.0, total_rows: 4, ..agg.clone() }).unwrap();
    assert_eq!(psi.psi, DMatrix::identity(2, 2) * 0.5);
    assert!(!psi.projected);

    let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
    let fixed = update_psi(&AggregateStats { s_psi: indefinite, ..agg.clone() }).unwrap();
    assert!(fixed.projected);
    assert!(fixed.psi.clone().cholesky().is_some());
    assert!(update_psi(&AggregateStats { s_psi: -DMatrix::identity(2, 2), ..agg.clone() }).is_err());
    assert!(update_psi(&AggregateStats { total_rows: 0, ..agg }).is_err());
}

#[test]
fn grid_selection_rules() {
    let mut v = vec![0.0; 11];
    v[9] = 5.0;
    assert_eq!(select_rho(&v).unwrap(), 0.9);
    let mut tie = vec![-1.0; 11];
    tie[2] = 3.0;
    tie[3] = 3.0;
    assert_eq!(select_rho(&tie).unwrap(), 0.2);
    let mut holes = vec![f64::NEG_INFINITY; 11];
    holes[4] = f64::NAN;
    holes[6] = -1e9;
    assert_eq!(select_rho(&holes).unwrap(), 0.6);
    assert!(select_rho(&[f64::NEG_INFINITY; 11]).is_err());
    assert!(select_rho(&[0.0; 10]).is_err());
    let grid = GridLoglik { rho1_values: v.clone(), rho2_values: tie };
    let dec = select_dec(&grid).unwrap();
    assert_eq!((dec.rho1, dec.rho2), (0.9, 0.2));
}

proptest! {
    #[test]
    fn grid_selection_ignores_constant_shifts(values in prop::collection::vec(-1e3f64..1e3, 11), c in -1e3f64..1e3) {
        let shifted: Vec<f64> = values.iter().map(|v| v + c).collect();
        let a = select_rho(&values).unwrap();
        let b = select_rho(&shifted).unwrap();
        // shifting can merge near-ties through rounding; otherwise the choice is unchanged
        let i = GRID.iter().position(|&g| g == a).unwrap();
        let j = GRID.iter().position(|&g| g == b).unwrap();
        prop_assert!(a == b || (values[i] - values[j]).abs() < 1e-9);
    }

    #[test]
    fn nu_root_is_a_root(target in 1.0005f64..3.0) {
        let u = solve_nu(target).unwrap();
        if !u.clamped {
            prop_assert!(nu_equation(u.nu, target).unwrap().abs() < 1e-8);
        }
    }
}
