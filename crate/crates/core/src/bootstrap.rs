//! Subject-level nonparametric bootstrap with percentile intervals.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{fit, FitConfig, FitResult, Init};
use crate::error::{Error, Result};
use crate::model::{Dataset, Theta};
use crate::rng::{rng_from, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub level: f64,
    pub fit: FitConfig,
    pub seed: u64,
    /// Start each replicate fit at the full-data estimate instead of `fit.init`.
    pub warm_start: bool,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { replicates: 100, level: 0.90, fit: FitConfig::default(), seed: 0, warm_start: true }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates < 2 {
            return Err(Error::Config(format!("at least 2 replicates are required, got {}", self.replicates)));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!("level must lie in (0, 1), got {}", self.level)));
        }
        self.fit.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub param: String,
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub intervals: Vec<Interval>,
    pub level: f64,
    pub requested: usize,
    pub used: usize,
    pub dropped: usize,
    /// Flattened estimates of the retained replicates, in replicate order.
    pub replicates: Vec<Vec<f64>>,
    pub full_fit: FitResult,
}

/// Quantile by linear interpolation between order statistics at position
/// (n − 1)·prob, for sorted input.
pub fn quantile_inclusive(sorted: &[f64], prob: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let h = (sorted.len() - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile intervals per coordinate from flattened replicate estimates.
pub fn percentile_intervals(names: &[String], point: &[f64], replicates: &[Vec<f64>], level: f64) -> Vec<Interval> {
    let alpha = 1.0 - level;
    names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let mut column: Vec<f64> = replicates.iter().map(|r| r[j]).collect();
            column.sort_by(f64::total_cmp);
            Interval {
                param: name.clone(),
                point: point[j],
                lo: quantile_inclusive(&column, alpha / 2.0),
                hi: quantile_inclusive(&column, 1.0 - alpha / 2.0),
            }
        })
        .collect()
}

pub fn resample_indices(n: usize, seed: u64, replicate: usize) -> Vec<usize> {
    let mut rng = rng_from(seed, &[stream::BOOTSTRAP, replicate as u64]);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

fn replicate_fit(data: &Dataset, cfg: &BootstrapConfig, start: &Theta, b: usize) -> Result<Option<Vec<f64>>> {
    let sample = data.resample(&resample_indices(data.len(), cfg.seed, b))?;
    let mut fit_cfg = cfg.fit.clone();
    fit_cfg.seed = crate::rng::derive_seed(cfg.seed, &[stream::REPLICATE, b as u64]);
    fit_cfg.trace_loglik = false;
    fit_cfg.trace_theta = false;
    if cfg.warm_start {
        fit_cfg.init = Init::Explicit(start.clone());
    }
    let res = fit(&sample, &fit_cfg)?;
    Ok(res.converged.then(|| res.theta_hat.flatten()))
}

pub fn bootstrap_ci(data: &Dataset, cfg: &BootstrapConfig) -> Result<BootstrapResult> {
    cfg.validate()?;
    let full_fit = fit(data, &cfg.fit)?;
    let start = full_fit.theta_hat.clone();
    let outcomes: Vec<Result<Option<Vec<f64>>>> =
        (0..cfg.replicates).into_par_iter().map(|b| replicate_fit(data, cfg, &start, b)).collect();
    let mut replicates = Vec::new();
    let mut failures = Vec::new();
    for (b, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(Some(v)) => replicates.push(v),
            Ok(None) => failures.push(format!("replicate {b}: did not converge")),
            Err(e) => failures.push(format!("replicate {b}: {e}")),
        }
    }
    if failures.len() * 2 > cfg.replicates {
        return Err(Error::Estimation(format!(
            "{} of {} bootstrap replicates failed; first failures: {}",
            failures.len(),
            cfg.replicates,
            failures.iter().take(3).cloned().collect::<Vec<_>>().join("; ")
        )));
    }
    for f in &failures {
        log::warn!("dropped {f}");
    }
    let names = Theta::param_names(data.q, data.p);
    let intervals = percentile_intervals(&names, &start.flatten(), &replicates, cfg.level);
    Ok(BootstrapResult {
        intervals,
        level: cfg.level,
        requested: cfg.replicates,
        used: replicates.len(),
        dropped: failures.len(),
        replicates,
        full_fit,
    })
}
