//! Damped exponential correlation for irregularly timed repeated measures.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gap used in place of an exact tie between two observation times.
pub const TIE_GAP: f64 = 1e-6;
const JITTER: f64 = 1e-10;

pub const GRID: [f64; 11] = [1e-5, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0 - 1e-5];

pub fn dec_grid() -> Vec<f64> {
    GRID.to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecParams {
    pub rho1: f64,
    pub rho2: f64,
}

impl DecParams {
    pub fn new(rho1: f64, rho2: f64) -> Result<Self> {
        for (name, v) in [("rho1", rho1), ("rho2", rho2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::domain(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        Ok(Self { rho1, rho2 })
    }

    pub(crate) fn key(&self) -> (u64, u64) {
        (self.rho1.to_bits(), self.rho2.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeVector {
    times: Vec<f64>,
}

impl TimeVector {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::Data("a subject needs at least one observation time".into()));
        }
        if let Some(bad) = times.iter().find(|t| !t.is_finite()) {
            return Err(Error::Data(format!("non-finite observation time {bad}")));
        }
        Ok(Self { times })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.times
    }

    pub fn has_ties(&self) -> bool {
        let t = &self.times;
        (0..t.len()).any(|j| (0..j).any(|k| t[j] == t[k]))
    }
}

pub fn dec_correlation(t: &TimeVector, p: &DecParams) -> DMatrix<f64> {
    let times = t.as_slice();
    let n = times.len();
    let mut m = DMatrix::identity(n, n);
    for j in 0..n {
        for k in 0..j {
            let gap = (times[j] - times[k]).abs();
            let gap = if gap == 0.0 { TIE_GAP } else { gap };
            let v = p.rho1.powf(gap.powf(p.rho2));
            m[(j, k)] = v;
            m[(k, j)] = v;
        }
    }
    m
}

/// Cholesky factor of a correlation matrix, retrying once with a small
/// diagonal jitter when the plain factorization fails.
#[derive(Debug, Clone)]
pub struct DecFactor {
    pub lower: DMatrix<f64>,
    pub log_det: f64,
    pub jittered: bool,
}

pub fn dec_factor(t: &TimeVector, p: &DecParams) -> Result<DecFactor> {
    let corr = dec_correlation(t, p);
    let n = corr.nrows();
    let (chol, jittered) = match nalgebra::Cholesky::new(corr.clone()) {
        Some(c) => (c, false),
        None => {
            let bumped = corr + DMatrix::identity(n, n) * JITTER;
            let c = nalgebra::Cholesky::new(bumped).ok_or_else(|| Error::Decomposition {
                matrix: "DEC correlation".into(),
                context: format!(" at rho1={}, rho2={}", p.rho1, p.rho2),
            })?;
            (c, true)
        }
    };
    let lower = chol.unpack();
    let log_det = 2.0 * lower.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(DecFactor { lower, log_det, jittered })
}
