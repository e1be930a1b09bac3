//! Conditional-maximization updates computed from aggregated E-step statistics.

use nalgebra::{DMatrix, DVector};

use crate::dec::{DecParams, GRID};
use crate::error::{Error, Result};
use crate::estep::{GridLoglik, PartitionStats};
use crate::numeric::symmetrize;
use crate::special::digamma;

pub const NU_LOWER: f64 = 0.05;
pub const NU_UPPER: f64 = 500.0;
const PSI_EIGEN_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateStats {
    pub s_beta1: DMatrix<f64>,
    pub s_beta2: DMatrix<f64>,
    pub s_nu: f64,
    pub s_a1: DVector<f64>,
    pub s_a2: f64,
    pub s_psi: DMatrix<f64>,
    pub total_rows: usize,
    pub n_subjects: usize,
}

impl AggregateStats {
    pub fn from_partition(stats: &PartitionStats) -> Self {
        Self {
            s_beta1: stats.s_beta1.value(),
            s_beta2: stats.s_beta2.value(),
            s_nu: stats.s_nu.value(),
            s_a1: stats.s_a1.vector(),
            s_a2: stats.s_a2.value(),
            s_psi: stats.s_psi.value(),
            total_rows: stats.total_rows,
            n_subjects: stats.subject_count,
        }
    }
}

pub fn update_beta(agg: &AggregateStats) -> Result<DMatrix<f64>> {
    let chol = nalgebra::Cholesky::new(symmetrize(&agg.s_beta1)).ok_or_else(|| {
        Error::Estimation(
            "the weighted covariate cross-product is singular; add subjects or rescale covariates".into(),
        )
    })?;
    Ok(chol.solve(&agg.s_beta2))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NuUpdate {
    pub nu: f64,
    /// The root fell outside [NU_LOWER, NU_UPPER] and the nearer endpoint was returned.
    pub clamped: bool,
}

/// ln(ν/2) + 1 − ψ(ν/2) − target, strictly decreasing in ν.
pub fn nu_equation(nu: f64, target: f64) -> Result<f64> {
    Ok((0.5 * nu).ln() + 1.0 - digamma(0.5 * nu)? - target)
}

pub fn solve_nu(target: f64) -> Result<NuUpdate> {
    if !target.is_finite() {
        return Err(Error::Estimation(format!("degrees-of-freedom statistic is not finite ({target})")));
    }
    let (mut lo, mut hi) = (NU_LOWER, NU_UPPER);
    if nu_equation(lo, target)? < 0.0 {
        return Ok(NuUpdate { nu: lo, clamped: true });
    }
    if nu_equation(hi, target)? > 0.0 {
        return Ok(NuUpdate { nu: hi, clamped: true });
    }
    while hi - lo > 1e-9 {
        let mid = 0.5 * (lo + hi);
        let g = nu_equation(mid, target)?;
        if g.abs() < 1e-10 {
            return Ok(NuUpdate { nu: mid, clamped: false });
        }
        if g > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(NuUpdate { nu: 0.5 * (lo + hi), clamped: false })
}

pub fn update_nu(agg: &AggregateStats) -> Result<NuUpdate> {
    solve_nu(agg.s_nu / agg.n_subjects as f64)
}

pub fn update_a(agg: &AggregateStats) -> Result<DVector<f64>> {
    if !(agg.s_a2 > 0.0) {
        return Err(Error::Estimation(format!("skewness denominator must be positive, got {}", agg.s_a2)));
    }
    Ok(&agg.s_a1 / agg.s_a2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsiUpdate {
    pub psi: DMatrix<f64>,
    /// Eigenvalues were floored to restore positive definiteness.
    pub projected: bool,
}

pub fn update_psi(agg: &AggregateStats) -> Result<PsiUpdate> {
    if agg.total_rows == 0 {
        return Err(Error::Estimation("no observations for the column scale update".into()));
    }
    let psi = symmetrize(&(&agg.s_psi / agg.total_rows as f64));
    if psi.iter().any(|v| !v.is_finite()) {
        return Err(Error::Estimation("column scale update is not finite".into()));
    }
    if nalgebra::Cholesky::new(psi.clone()).is_some() {
        return Ok(PsiUpdate { psi, projected: false });
    }
    let eig = psi.symmetric_eigen();
    let top = eig.eigenvalues.max();
    if !(top > 0.0) {
        return Err(Error::Estimation("column scale update has no positive eigenvalue".into()));
    }
    let floor = PSI_EIGEN_FLOOR * top;
    let clipped = eig.eigenvalues.map(|v| v.max(floor));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    Ok(PsiUpdate { psi: symmetrize(&rebuilt), projected: true })
}

/// Grid value at the first maximum of `values`; −∞ and NaN entries are skipped.
pub fn select_rho(values: &[f64]) -> Result<f64> {
    if values.len() != GRID.len() {
        return Err(Error::Estimation(format!("grid has {} values, expected {}", values.len(), GRID.len())));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if v.is_nan() || v == f64::NEG_INFINITY {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| GRID[i])
        .ok_or_else(|| Error::Estimation("every correlation grid point failed".into()))
}

pub fn select_dec(grid: &GridLoglik) -> Result<DecParams> {
    Ok(DecParams { rho1: select_rho(&grid.rho1_values)?, rho2: select_rho(&grid.rho2_values)? })
}
