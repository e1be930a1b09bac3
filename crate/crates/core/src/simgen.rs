//! Synthetic longitudinal data from the skew-t regression model and from a
//! generalized-hyperbolic mixture, using fixed reference parameters.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Bernoulli, Distribution, Exp1, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dec::{dec_correlation, DecParams, TimeVector};
use crate::error::{Error, Result};
use crate::model::{Dataset, Subject, Theta};
use crate::mvst::{GigParams, GigSampler, MvstParams, MvstSampler};
use crate::rng::{rng_from, stream, Rng};
use crate::special::normal_cdf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Inverse-gamma mixing: data follow the fitted model.
    S1s2,
    /// GIG(ω, ω, λ) mixing with ω = λ = 1: a misspecified heavy-tailed alternative.
    S3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeConfig {
    pub scheme: Scheme,
    pub n_subjects: usize,
    pub seed: u64,
    pub truth: Theta,
}

impl SchemeConfig {
    pub fn new(scheme: Scheme, n_subjects: usize, seed: u64) -> Self {
        Self { scheme, n_subjects, seed, truth: reference_theta() }
    }
}

/// Mean number of extra observations per subject beyond the minimum of two.
const EXTRA_ROWS_MEAN: f64 = 8.0;
const GH_OMEGA: f64 = 1.0;
const GH_LAMBDA: f64 = 1.0;

pub fn reference_theta() -> Theta {
    Theta {
        beta: DMatrix::from_row_slice(3, 2, &[0.5, 0.5, 1.5, 1.5, -0.5, -0.5]),
        a_row: DVector::from_vec(vec![2.0, -2.0]),
        psi: DMatrix::from_row_slice(2, 2, &[1.0, -0.5, -0.5, 1.0]),
        nu: 5.0,
        dec: DecParams { rho1: 0.9, rho2: 0.8 },
    }
}

/// Success probability of the binary covariate, clamped into [0, 1].
pub fn binary_mean(t: f64) -> f64 {
    (2.0 * normal_cdf(t.abs() - 1.0)).clamp(0.0, 1.0)
}

fn positive_half_normal(rng: &mut Rng) -> f64 {
    loop {
        let z: f64 = rng.sample::<f64, _>(StandardNormal).abs();
        if z > 0.0 {
            return z;
        }
    }
}

fn design(rng: &mut Rng, q: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if q != 3 {
        return Err(Error::Config(format!("the reference design has 3 covariates, the supplied truth has {q}")));
    }
    let poisson = Poisson::new(EXTRA_ROWS_MEAN).expect("valid Poisson mean");
    let n = poisson.sample(rng) as usize + 2;
    let mut times: Vec<f64> = (0..n).map(|_| positive_half_normal(rng)).collect();
    times.sort_by(f64::total_cmp);
    let mut x = DMatrix::zeros(n, 3);
    for (j, &t) in times.iter().enumerate() {
        x[(j, 0)] = rng.sample::<f64, _>(Exp1);
        x[(j, 1)] = rng.sample::<f64, _>(StandardNormal);
        let coin = Bernoulli::new(binary_mean(t)).expect("probability in [0, 1]");
        x[(j, 2)] = if coin.sample(rng) { 1.0 } else { 0.0 };
    }
    Ok((times, x))
}

fn subject(cfg: &SchemeConfig, index: usize) -> Result<Subject> {
    let theta = &cfg.truth;
    let mut rng = rng_from(cfg.seed, &[stream::SUBJECT, index as u64]);
    let (times, x) = design(&mut rng, theta.q())?;
    let n = times.len();
    let t = TimeVector::new(times)?;
    let sigma = dec_correlation(&t, &theta.dec);
    let a = DMatrix::from_fn(n, theta.p(), |_, j| theta.a_row[j]);
    let params = MvstParams::new(&x * &theta.beta, a, sigma, theta.psi.clone(), theta.nu)?;
    let sampler = MvstSampler::new(&params)?;
    let w = match cfg.scheme {
        Scheme::S1s2 => sampler.draw_mixing(&mut rng),
        Scheme::S3 => GigSampler::new(GigParams::new(GH_OMEGA, GH_OMEGA, GH_LAMBDA)?)?.sample(&mut rng),
    };
    let y = sampler.sample_given_mixing(w, &mut rng);
    Subject::new(format!("S{:05}", index + 1), y, x, t)
}

fn generate(cfg: &SchemeConfig) -> Result<(Dataset, Theta)> {
    if cfg.n_subjects == 0 {
        return Err(Error::Config("at least one subject is required".into()));
    }
    let subjects = (0..cfg.n_subjects)
        .into_par_iter()
        .map(|i| subject(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    Ok((Dataset::new(subjects)?, cfg.truth.clone()))
}

pub fn gen_scheme12(cfg: &SchemeConfig) -> Result<(Dataset, Theta)> {
    if cfg.scheme != Scheme::S1s2 {
        return Err(Error::Config("gen_scheme12 requires the inverse-gamma scheme".into()));
    }
    generate(cfg)
}

pub fn gen_scheme3(cfg: &SchemeConfig) -> Result<(Dataset, Theta)> {
    if cfg.scheme != Scheme::S3 {
        return Err(Error::Config("gen_scheme3 requires the generalized-hyperbolic scheme".into()));
    }
    generate(cfg)
}

pub fn simulate(cfg: &SchemeConfig) -> Result<(Dataset, Theta)> {
    generate(cfg)
}
