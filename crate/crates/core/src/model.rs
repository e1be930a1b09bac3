//! Regression model: parameters, subjects, observed-data log-likelihood and residuals.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dec::{dec_factor, DecParams, TimeVector};
use crate::error::{Error, Result};
use crate::mvst::DensityParts;
use crate::numeric::{
    cholesky_lower, exact_sum, from_lower_triangle, log_det_from_cholesky, lower_triangle, solve_lower,
    symmetrize,
};
use crate::special::{bessel_k_ratio, digamma, dlog_bessel_k_dorder};

/// Full parameter set: coefficients, skewness row, column scale, degrees of
/// freedom and the two correlation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ThetaRecord", try_from = "ThetaRecord")]
pub struct Theta {
    /// q×p coefficients
    pub beta: DMatrix<f64>,
    /// length-p skewness row shared by every observation
    pub a_row: DVector<f64>,
    /// p×p column scale
    pub psi: DMatrix<f64>,
    pub nu: f64,
    pub dec: DecParams,
}

impl Theta {
    pub fn new(beta: DMatrix<f64>, a_row: DVector<f64>, psi: DMatrix<f64>, nu: f64, dec: DecParams) -> Result<Self> {
        let p = beta.ncols();
        if a_row.len() != p || psi.shape() != (p, p) {
            return Err(Error::domain(format!(
                "parameter shapes disagree: beta {:?}, skewness {}, psi {:?}",
                beta.shape(),
                a_row.len(),
                psi.shape()
            )));
        }
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(Error::domain(format!("degrees of freedom must be positive, got {nu}")));
        }
        cholesky_lower(&psi, "Psi")?;
        DecParams::new(dec.rho1, dec.rho2)?;
        Ok(Self { beta, a_row, psi, nu, dec })
    }

    pub fn p(&self) -> usize {
        self.beta.ncols()
    }

    pub fn q(&self) -> usize {
        self.beta.nrows()
    }

    /// Flattened as β row-major, 𝒜, Ψ lower triangle (row-wise), ν, ρ₁, ρ₂.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..self.q() {
            out.extend(self.beta.row(i).iter());
        }
        out.extend(self.a_row.iter());
        out.extend(lower_triangle(&self.psi));
        out.extend([self.nu, self.dec.rho1, self.dec.rho2]);
        out
    }

    /// Labels matching [`Theta::flatten`].
    pub fn param_names(q: usize, p: usize) -> Vec<String> {
        let mut out = Vec::new();
        for i in 1..=q {
            for j in 1..=p {
                out.push(format!("beta_{i}_{j}"));
            }
        }
        for j in 1..=p {
            out.push(format!("a_{j}"));
        }
        for i in 1..=p {
            for j in 1..=i {
                out.push(format!("psi_{i}_{j}"));
            }
        }
        out.extend(["nu".into(), "rho1".into(), "rho2".into()]);
        out
    }

    pub fn max_abs_diff(&self, other: &Theta) -> Result<f64> {
        let (a, b) = (self.flatten(), other.flatten());
        if a.len() != b.len() || self.q() != other.q() {
            return Err(Error::Estimation("cannot compare parameter sets of different shapes".into()));
        }
        Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ThetaRecord {
    q: usize,
    p: usize,
    beta: Vec<f64>,
    a: Vec<f64>,
    psi: Vec<f64>,
    nu: f64,
    rho1: f64,
    rho2: f64,
}

impl From<Theta> for ThetaRecord {
    fn from(t: Theta) -> Self {
        let mut beta = Vec::new();
        for i in 0..t.q() {
            beta.extend(t.beta.row(i).iter());
        }
        ThetaRecord {
            q: t.q(),
            p: t.p(),
            beta,
            a: t.a_row.iter().copied().collect(),
            psi: lower_triangle(&t.psi),
            nu: t.nu,
            rho1: t.dec.rho1,
            rho2: t.dec.rho2,
        }
    }
}

impl TryFrom<ThetaRecord> for Theta {
    type Error = Error;

    fn try_from(r: ThetaRecord) -> Result<Self> {
        if r.beta.len() != r.q * r.p || r.a.len() != r.p {
            return Err(Error::Data(format!(
                "parameter record has {} coefficients and {} skewness entries for q={}, p={}",
                r.beta.len(),
                r.a.len(),
                r.q,
                r.p
            )));
        }
        Theta::new(
            DMatrix::from_row_slice(r.q, r.p, &r.beta),
            DVector::from_vec(r.a),
            from_lower_triangle(&r.psi, r.p)?,
            r.nu,
            DecParams::new(r.rho1, r.rho2)?,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    /// nᵢ×p responses
    pub y: DMatrix<f64>,
    /// nᵢ×q covariates
    pub x: DMatrix<f64>,
    pub t: TimeVector,
}

impl Subject {
    pub fn new(id: impl Into<String>, y: DMatrix<f64>, x: DMatrix<f64>, t: TimeVector) -> Result<Self> {
        let id = id.into();
        let n = t.len();
        if y.nrows() != n || x.nrows() != n {
            return Err(Error::Data(format!(
                "subject {id}: {} times, {} response rows, {} covariate rows",
                n,
                y.nrows(),
                x.nrows()
            )));
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("subject {id}: non-finite response or covariate")));
        }
        Ok(Self { id, y, x, t })
    }

    pub fn n_rows(&self) -> usize {
        self.t.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub subjects: Vec<Subject>,
    pub p: usize,
    pub q: usize,
}

impl Dataset {
    pub fn new(subjects: Vec<Subject>) -> Result<Self> {
        let first = subjects.first().ok_or_else(|| Error::Data("dataset has no subjects".into()))?;
        let (p, q) = (first.y.ncols(), first.x.ncols());
        if p == 0 {
            return Err(Error::Data("dataset has no response columns".into()));
        }
        if let Some(bad) = subjects.iter().find(|s| s.y.ncols() != p || s.x.ncols() != q) {
            return Err(Error::Data(format!(
                "subject {} has {} responses and {} covariates, expected {p} and {q}",
                bad.id,
                bad.y.ncols(),
                bad.x.ncols()
            )));
        }
        let tied = subjects.iter().filter(|s| s.t.has_ties()).count();
        if tied > 0 {
            log::warn!("{tied} subject(s) have tied observation times; ties use a gap of {}", crate::dec::TIE_GAP);
        }
        Ok(Self { subjects, p, q })
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn total_rows(&self) -> usize {
        self.subjects.iter().map(Subject::n_rows).sum()
    }

    /// Dataset made of the listed subjects (repeats allowed).
    pub fn resample(&self, indices: &[usize]) -> Result<Self> {
        Dataset::new(indices.iter().map(|&i| self.subjects[i].clone()).collect())
    }
}

/// Whitened cross-products of one subject for fixed correlation parameters:
/// everything the likelihood and E step need, independent of β, 𝒜, Ψ, ν.
#[derive(Debug, Clone)]
pub struct SubjectGram {
    pub n_rows: usize,
    pub log_det: f64,
    /// 1ᵀΣ⁻¹1
    pub one_s_one: f64,
    /// XᵀΣ⁻¹1
    pub xs1: DVector<f64>,
    /// YᵀΣ⁻¹1
    pub ys1: DVector<f64>,
    /// XᵀΣ⁻¹X
    pub xsx: DMatrix<f64>,
    /// XᵀΣ⁻¹Y
    pub xsy: DMatrix<f64>,
    /// YᵀΣ⁻¹Y
    pub ysy: DMatrix<f64>,
}

impl SubjectGram {
    pub fn new(s: &Subject, dec: &DecParams) -> Result<Self> {
        let f = dec_factor(&s.t, dec).map_err(|e| e.for_subject(&s.id))?;
        let n = s.n_rows();
        let zx = solve_lower(&f.lower, &s.x);
        let zy = solve_lower(&f.lower, &s.y);
        let w = solve_lower(&f.lower, &DMatrix::from_element(n, 1, 1.0)).column(0).into_owned();
        Ok(Self {
            n_rows: n,
            log_det: f.log_det,
            one_s_one: w.norm_squared(),
            xs1: zx.tr_mul(&w),
            ys1: zy.tr_mul(&w),
            xsx: symmetrize(&zx.tr_mul(&zx)),
            xsy: zx.tr_mul(&zy),
            ysy: symmetrize(&zy.tr_mul(&zy)),
        })
    }

    /// (RᵀΣ⁻¹1, RᵀΣ⁻¹R) for R = Y − Xβ.
    pub fn residual_forms(&self, beta: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let u = &self.ys1 - beta.tr_mul(&self.xs1);
        let t = beta.tr_mul(&self.xsy);
        let g = &self.ysy - &t - t.transpose() + beta.tr_mul(&(&self.xsx * beta));
        (u, symmetrize(&g))
    }
}

/// Quantities derived from Θ once per evaluation round.
#[derive(Debug, Clone)]
pub struct ThetaContext {
    pub theta: Theta,
    pub psi_inv: DMatrix<f64>,
    pub log_det_psi: f64,
    /// Ψ⁻¹𝒜ᵀ
    pub psi_inv_a: DVector<f64>,
    /// 𝒜Ψ⁻¹𝒜ᵀ
    pub a_psi_a: f64,
}

impl ThetaContext {
    pub fn new(theta: &Theta) -> Result<Self> {
        let l = cholesky_lower(&theta.psi, "Psi")?;
        let psi_inv = symmetrize(&nalgebra::Cholesky::new(theta.psi.clone()).expect("checked above").inverse());
        let psi_inv_a = &psi_inv * &theta.a_row;
        Ok(Self {
            theta: theta.clone(),
            log_det_psi: log_det_from_cholesky(&l),
            a_psi_a: theta.a_row.dot(&psi_inv_a),
            psi_inv,
            psi_inv_a,
        })
    }

    pub(crate) fn density_parts(&self, gram: &SubjectGram, u: &DVector<f64>, g: &DMatrix<f64>) -> DensityParts {
        DensityParts {
            delta: self.psi_inv.component_mul(g).sum().max(0.0),
            rho: gram.one_s_one * self.a_psi_a,
            cross: u.dot(&self.psi_inv_a),
            log_det_sigma: gram.log_det,
            log_det_psi: self.log_det_psi,
            n: gram.n_rows,
            p: self.theta.p(),
            nu: self.theta.nu,
        }
    }

    pub fn subject_loglik(&self, gram: &SubjectGram) -> Result<f64> {
        let (u, g) = gram.residual_forms(&self.theta.beta);
        self.density_parts(gram, &u, &g).log_density()
    }
}

/// Conditional moments (E W, E 1/W, E ln W) of the latent scale given one subject.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentMoments {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

pub(crate) fn latent_moments(parts: &DensityParts) -> Result<LatentMoments> {
    let np = (parts.n * parts.p) as f64;
    let shape = parts.nu + np;
    let dn = parts.delta + parts.nu;
    if parts.is_symmetric() {
        // Inverse-gamma((ν+np)/2, (δ+ν)/2) limit.
        if shape <= 2.0 {
            return Err(Error::domain(format!("latent mean undefined for nu + n p = {shape} <= 2")));
        }
        return Ok(LatentMoments {
            a: dn / (shape - 2.0),
            b: shape / dn,
            c: (0.5 * dn).ln() - digamma(0.5 * shape)?,
        });
    }
    let kappa = (parts.rho * dn).sqrt();
    let lambda = -0.5 * shape;
    let ratio = bessel_k_ratio(lambda, kappa)?;
    Ok(LatentMoments {
        a: (dn / parts.rho).sqrt() * ratio,
        b: (parts.rho / dn).sqrt() * ratio + shape / dn,
        c: 0.5 * (dn / parts.rho).ln() + dlog_bessel_k_dorder(lambda, kappa)?,
    })
}

pub fn observed_loglik(data: &Dataset, theta: &Theta) -> Result<f64> {
    let ctx = ThetaContext::new(theta)?;
    let terms = data
        .subjects
        .iter()
        .map(|s| {
            let gram = SubjectGram::new(s, &theta.dec)?;
            ctx.subject_loglik(&gram).map_err(|e| e.for_subject(&s.id))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(exact_sum(terms))
}

/// Σᵢ^{-1/2}(Yᵢ − Xᵢβ − wᵢ 1𝒜)Ψ^{-1/2}/√wᵢ with wᵢ = E(Wᵢ | Yᵢ), using Cholesky square roots.
pub fn standardized_residuals(data: &Dataset, theta: &Theta) -> Result<Vec<DMatrix<f64>>> {
    let ctx = ThetaContext::new(theta)?;
    let l_psi = cholesky_lower(&theta.psi, "Psi")?;
    data.subjects
        .iter()
        .map(|s| {
            let run = || -> Result<DMatrix<f64>> {
                let gram = SubjectGram::new(s, &theta.dec)?;
                let (u, g) = gram.residual_forms(&theta.beta);
                let w = latent_moments(&ctx.density_parts(&gram, &u, &g))?.a;
                let f = dec_factor(&s.t, &theta.dec)?;
                let n = s.n_rows();
                let centered = &s.y - &s.x * &theta.beta
                    - DMatrix::from_fn(n, theta.p(), |_, j| w * theta.a_row[j]);
                let left = solve_lower(&f.lower, &centered);
                let both = solve_lower(&l_psi, &left.transpose()).transpose();
                Ok(both / w.sqrt())
            };
            run().map_err(|e| e.for_subject(&s.id))
        })
        .collect()
}

/// One row per observation: subject id, time, standardized residual columns.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualRow {
    pub subject_id: String,
    pub time: f64,
    pub residuals: Vec<f64>,
}

pub fn residual_table(data: &Dataset, residuals: &[DMatrix<f64>]) -> Vec<ResidualRow> {
    data.subjects
        .iter()
        .zip(residuals)
        .flat_map(|(s, r)| {
            s.t.as_slice().iter().enumerate().map(move |(j, &time)| ResidualRow {
                subject_id: s.id.clone(),
                time,
                residuals: r.row(j).iter().copied().collect(),
            })
        })
        .collect()
}
