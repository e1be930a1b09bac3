use regmvst::bootstrap::{percentile_intervals, quantile_inclusive, resample_indices, BootstrapConfig};
use regmvst::io::{parse_dataset, theta_from_json, theta_to_json, write_dataset};
use regmvst::model::{standardized_residuals, residual_table, Theta};
use regmvst::simgen::{binary_mean, gen_scheme12, gen_scheme3, reference_theta, simulate, Scheme, SchemeConfig};

fn scheme(scheme: Scheme, n: usize, seed: u64) -> regmvst::model::Dataset {
    simulate(&SchemeConfig::new(scheme, n, seed)).unwrap().0
}

#[test]
fn simulated_design_has_the_reference_shape() {
    let data = scheme(Scheme::S1s2, 2000, 1);
    assert_eq!((data.p, data.q, data.len()), (2, 3, 2000));
    let mean_rows = data.total_rows() as f64 / data.len() as f64;
    // Poisson(8) + 2 rows: mean 10, sd of the mean √8/√2000 ≈ 0.063
    assert!((mean_rows - 10.0).abs() < 0.25, "{mean_rows}");
    assert!(data.subjects.iter().all(|s| s.n_rows() >= 2));
    for s in &data.subjects {
        let t = s.t.as_slice();
        assert!(t.windows(2).all(|w| w[0] <= w[1]) && t[0] > 0.0);
        assert!(s.x.column(2).iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(s.x.column(0).iter().all(|&v| v >= 0.0));
    }
    assert_eq!(data.subjects[0].id, "S00001");
}

#[test]
fn binary_covariate_probability() {
    assert!((binary_mean(1.0) - 1.0).abs() < 1e-15);
    assert!((binary_mean(0.0) - 0.317_310_507_862_914_15).abs() < 1e-12);
    assert_eq!(binary_mean(10.0), 1.0);
}

#[test]
fn simulation_is_deterministic_and_seed_sensitive() {
    let a = scheme(Scheme::S1s2, 50, 7);
    assert_eq!(a, scheme(Scheme::S1s2, 50, 7));
    assert_ne!(a, scheme(Scheme::S1s2, 50, 8));
    // subjects depend only on (seed, index)
    let longer = scheme(Scheme::S1s2, 60, 7);
    assert_eq!(a.subjects[..], longer.subjects[..50]);
    assert_ne!(scheme(Scheme::S3, 50, 7), a);
}

#[test]
fn scheme_generators_check_their_scheme() {
    assert!(gen_scheme12(&SchemeConfig::new(Scheme::S3, 5, 1)).is_err());
    assert!(gen_scheme3(&SchemeConfig::new(Scheme::S1s2, 5, 1)).is_err());
    assert!(gen_scheme3(&SchemeConfig::new(Scheme::S3, 5, 1)).is_ok());
    assert!(simulate(&SchemeConfig::new(Scheme::S1s2, 0, 1)).is_err());
}

#[test]
fn csv_round_trip_is_bit_exact() {
    let data = scheme(Scheme::S3, 40, 3);
    let mut buf = Vec::new();
    write_dataset(&data, &mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("subject_id,time,y_1,y_2,x_1,x_2,x_3\n"));
    assert_eq!(parse_dataset(&buf[..]).unwrap(), data);
}

#[test]
fn csv_rows_are_sorted_by_time_within_subject() {
    let text = "subject_id,time,y_1,x_1\nA,2.0,1.0,0.5\nA,1.0,3.0,0.1\nB,0.5,2.0,1.0\n";
    let data = parse_dataset(text.as_bytes()).unwrap();
    assert_eq!(data.subjects[0].t.as_slice(), &[1.0, 2.0]);
    assert_eq!(data.subjects[0].y[(0, 0)], 3.0);
    assert_eq!(data.subjects[0].x[(1, 0)], 0.5);
}

#[test]
fn csv_errors_name_the_subject() {
    let ragged = "subject_id,time,y_1,x_1\nA,1.0,1.0,0.5\nB,1.0,2.0\n";
    let err = parse_dataset(ragged.as_bytes()).unwrap_err().to_string();
    assert!(err.contains("subject B") && err.contains("3 fields"), "{err}");

    let split = "subject_id,time,y_1,x_1\nA,1,1,1\nB,1,1,1\nA,2,1,1\n";
    assert!(parse_dataset(split.as_bytes()).unwrap_err().to_string().contains("not contiguous"));

    let bad = "subject_id,time,y_1,x_1\nA,1,abc,1\n";
    let err = parse_dataset(bad.as_bytes()).unwrap_err().to_string();
    assert!(err.contains("subject A") && err.contains("y_1"), "{err}");

    for header in ["time,subject_id,y_1,x_1\n", "subject_id,time,x_1,y_1\n", "subject_id,time,y_1\n"] {
        assert!(parse_dataset(header.as_bytes()).is_err(), "{header}");
    }
    assert!(parse_dataset("subject_id,time,y_1,x_1\n".as_bytes()).is_err());
}

#[test]
fn theta_json_round_trip() {
    let theta = reference_theta();
    let text = theta_to_json(&theta).unwrap();
    assert_eq!(theta_from_json(&text).unwrap(), theta);
    assert!(theta_from_json("{\"beta\": 1}").is_err());
    let mut broken: serde_json::Value = serde_json::from_str(&text).unwrap();
    broken["nu"] = serde_json::json!(-1.0);
    assert!(theta_from_json(&broken.to_string()).is_err());
}

#[test]
fn standardized_residuals_are_roughly_unit_scale_at_the_truth() {
    let data = scheme(Scheme::S1s2, 400, 5);
    let truth = reference_theta();
    let res = standardized_residuals(&data, &truth).unwrap();
    let all: Vec<f64> = res.iter().flat_map(|m| m.iter().copied()).collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64;
    assert!(mean.abs() < 0.1, "{mean}");
    assert!((0.5..2.0).contains(&var), "{var}");
    let table = residual_table(&data, &res);
    assert_eq!(table.len(), data.total_rows());
    assert_eq!(table[0].residuals.len(), 2);
    assert_eq!(table[0].subject_id, "S00001");
}

#[test]
fn inclusive_quantiles() {
    let v = [1.0, 2.0, 3.0, 4.0, 5.0];
    assert_eq!(quantile_inclusive(&v, 0.0), 1.0);
    assert_eq!(quantile_inclusive(&v, 1.0), 5.0);
    assert_eq!(quantile_inclusive(&v, 0.5), 3.0);
    assert!((quantile_inclusive(&v, 0.05) - 1.2).abs() < 1e-15);
    assert_eq!(quantile_inclusive(&[7.0], 0.3), 7.0);
}

#[test]
fn identical_replicates_give_zero_width_intervals() {
    let theta = reference_theta();
    let names = Theta::param_names(3, 2);
    let point = theta.flatten();
    let intervals = percentile_intervals(&names, &point, &[point.clone(), point.clone()], 0.9);
    assert_eq!(intervals.len(), names.len());
    for (iv, p) in intervals.iter().zip(&point) {
        assert_eq!((iv.lo, iv.hi, iv.point), (*p, *p, *p));
    }
}

#[test]
fn intervals_are_ordered() {
    let names = vec!["a".to_string(), "b".to_string()];
    let reps: Vec<Vec<f64>> = (0..37).map(|i| vec![(i as f64 * 1.7).sin(), -(i as f64)]).collect();
    for iv in percentile_intervals(&names, &[0.0, 0.0], &reps, 0.8) {
        assert!(iv.lo <= iv.hi);
    }
}

#[test]
fn resampling_is_reproducible_per_replicate() {
    let a = resample_indices(100, 5, 3);
    assert_eq!(a, resample_indices(100, 5, 3));
    assert_ne!(a, resample_indices(100, 5, 4));
    assert!(a.iter().all(|&i| i < 100));
}

#[test]
fn bootstrap_config_validation() {
    let ok = BootstrapConfig::default();
    assert!(ok.validate().is_ok());
    assert!(BootstrapConfig { replicates: 1, ..ok.clone() }.validate().is_err());
    assert!(BootstrapConfig { level: 1.0, ..ok }.validate().is_err());
}
