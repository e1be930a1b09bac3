//! E step: conditional moments of the latent scale, sufficient statistics and
//! grid log-likelihoods, per subject and per data partition.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::dec::{DecParams, GRID};
use crate::error::{Error, Result};
use crate::model::{latent_moments, LatentMoments, Subject, SubjectGram, Theta, ThetaContext};
use crate::numeric::{symmetrize, ExactSum, MatrixSum};

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectStats {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub s_beta1: DMatrix<f64>,
    pub s_beta2: DMatrix<f64>,
    pub s_nu: f64,
    pub s_a1: DVector<f64>,
    pub s_a2: f64,
    pub s_psi: DMatrix<f64>,
    pub n_rows: usize,
}

fn skew_psi_stat(
    gram: &SubjectGram,
    a_row: &DVector<f64>,
    u: &DVector<f64>,
    g: &DMatrix<f64>,
    latent: &LatentMoments,
) -> DMatrix<f64> {
    // b RᵀΣ⁻¹R − AᵀΣ⁻¹R − RᵀΣ⁻¹A + a AᵀΣ⁻¹A with A = 1𝒜
    let cross = a_row * u.transpose();
    let raw = g * latent.b - &cross - cross.transpose()
        + a_row * a_row.transpose() * (latent.a * gram.one_s_one);
    symmetrize(&raw)
}

fn subject_stats(gram: &SubjectGram, ctx: &ThetaContext) -> Result<SubjectStats> {
    let theta = &ctx.theta;
    let (u, g) = gram.residual_forms(&theta.beta);
    let latent = latent_moments(&ctx.density_parts(gram, &u, &g))?;
    Ok(SubjectStats {
        a: latent.a,
        b: latent.b,
        c: latent.c,
        s_beta1: &gram.xsx * latent.b,
        s_beta2: &gram.xsy * latent.b - &gram.xs1 * theta.a_row.transpose(),
        s_nu: latent.b + latent.c,
        s_a2: latent.a * gram.one_s_one,
        s_psi: skew_psi_stat(gram, &theta.a_row, &u, &g, &latent),
        s_a1: u,
        n_rows: gram.n_rows,
    })
}

pub fn estep_subject(s: &Subject, theta: &Theta) -> Result<SubjectStats> {
    let gram = SubjectGram::new(s, &theta.dec)?;
    subject_stats(&gram, &ThetaContext::new(theta)?).map_err(|e| e.for_subject(&s.id))
}

/// Skewness statistics recomputed at an updated β, reusing the E-step moment `a`.
pub fn estep_refresh_a_stats(s: &Subject, theta_partial: &Theta, a: f64) -> Result<(DVector<f64>, f64)> {
    let gram = SubjectGram::new(s, &theta_partial.dec)?;
    let (u, _) = gram.residual_forms(&theta_partial.beta);
    Ok((u, a * gram.one_s_one))
}

/// Column-scale statistic recomputed at updated β and 𝒜, reusing the E-step moments.
pub fn estep_refresh_psi_stats(s: &Subject, theta_partial: &Theta, a: f64, b: f64) -> Result<DMatrix<f64>> {
    let gram = SubjectGram::new(s, &theta_partial.dec)?;
    let (u, g) = gram.residual_forms(&theta_partial.beta);
    Ok(skew_psi_stat(&gram, &theta_partial.a_row, &u, &g, &LatentMoments { a, b, c: 0.0 }))
}

/// Observed log-likelihood over the correlation grid, one axis at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct GridLoglik {
    pub rho1_values: Vec<f64>,
    pub rho2_values: Vec<f64>,
}

/// Which parameter a grid pass varies; the other is held at the given value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GridAxis {
    Rho1 { rho2: f64 },
    Rho2 { rho1: f64 },
}

impl GridAxis {
    fn point(&self, g: f64) -> DecParams {
        match *self {
            GridAxis::Rho1 { rho2 } => DecParams { rho1: g, rho2 },
            GridAxis::Rho2 { rho1 } => DecParams { rho1, rho2: g },
        }
    }
}

/// How the ρ₂ pass picks its ρ₁.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GridMode {
    /// Both passes at the supplied Θ (asynchronous engine).
    Stale,
    /// ρ₂ pass at a freshly selected ρ₁.
    Fresh { rho1: f64 },
}

/// Exact partial sums of grid log-likelihoods.
#[derive(Debug, Clone)]
pub struct GridSums {
    pub rho1: Vec<ExactSum>,
    pub rho2: Vec<ExactSum>,
}

impl GridSums {
    pub fn merge(&mut self, other: &GridSums) {
        for (a, b) in self.rho1.iter_mut().zip(&other.rho1) {
            a.merge(b);
        }
        for (a, b) in self.rho2.iter_mut().zip(&other.rho2) {
            a.merge(b);
        }
    }

    pub fn values(&self) -> GridLoglik {
        GridLoglik {
            rho1_values: self.rho1.iter().map(ExactSum::value).collect(),
            rho2_values: self.rho2.iter().map(ExactSum::value).collect(),
        }
    }
}

/// Aggregated statistics of one partition, kept as exact partial sums so that
/// merging partitions reproduces the serial totals bit for bit.
#[derive(Debug, Clone)]
pub struct PartitionStats {
    pub s_beta1: MatrixSum,
    pub s_beta2: MatrixSum,
    pub s_nu: ExactSum,
    pub s_a1: MatrixSum,
    pub s_a2: ExactSum,
    pub s_psi: MatrixSum,
    pub total_rows: usize,
    pub subject_count: usize,
    pub stamp: u64,
    pub grid: Option<GridSums>,
}

impl PartitionStats {
    pub fn empty(q: usize, p: usize, stamp: u64) -> Self {
        Self {
            s_beta1: MatrixSum::zeros(q, q),
            s_beta2: MatrixSum::zeros(q, p),
            s_nu: ExactSum::new(),
            s_a1: MatrixSum::zeros(p, 1),
            s_a2: ExactSum::new(),
            s_psi: MatrixSum::zeros(p, p),
            total_rows: 0,
            subject_count: 0,
            stamp,
            grid: None,
        }
    }

    pub fn add(&mut self, s: &SubjectStats) {
        self.s_beta1.add(&s.s_beta1);
        self.s_beta2.add(&s.s_beta2);
        self.s_nu.add(s.s_nu);
        self.s_a1.add_vector(&s.s_a1);
        self.s_a2.add(s.s_a2);
        self.s_psi.add(&s.s_psi);
        self.total_rows += s.n_rows;
        self.subject_count += 1;
    }

    pub fn merge(&mut self, other: &PartitionStats) {
        let was_empty = self.subject_count == 0;
        self.s_beta1.merge(&other.s_beta1);
        self.s_beta2.merge(&other.s_beta2);
        self.s_nu.merge(&other.s_nu);
        self.s_a1.merge(&other.s_a1);
        self.s_a2.merge(&other.s_a2);
        self.s_psi.merge(&other.s_psi);
        self.total_rows += other.total_rows;
        self.subject_count += other.subject_count;
        match (&mut self.grid, &other.grid) {
            (Some(a), Some(b)) => a.merge(b),
            (None, Some(b)) if was_empty => self.grid = Some(b.clone()),
            _ => {}
        }
    }
}

const CACHE_CAPACITY: usize = 32;

type GramSet = Arc<Vec<std::result::Result<SubjectGram, String>>>;

/// Per-partition cache of subject Gram blocks keyed by the correlation parameters.
#[derive(Debug, Default)]
struct GramCache {
    map: HashMap<(u64, u64), GramSet>,
    order: VecDeque<(u64, u64)>,
}

impl GramCache {
    fn get(&mut self, subjects: &[Subject], dec: &DecParams) -> GramSet {
        let key = dec.key();
        if let Some(hit) = self.map.get(&key) {
            return hit.clone();
        }
        let set: GramSet = Arc::new(
            subjects
                .iter()
                .map(|s| SubjectGram::new(s, dec).map_err(|e| e.to_string()))
                .collect(),
        );
        if self.order.len() == CACHE_CAPACITY {
            if let Some(old) = self.order.pop_front() {
                self.map.remove(&old);
            }
        }
        self.order.push_back(key);
        self.map.insert(key, set.clone());
        set
    }
}

/// A disjoint block of subjects together with its caches and the latent
/// moments of its most recent E step.
#[derive(Debug)]
pub struct Partition {
    subjects: Vec<Subject>,
    cache: GramCache,
    latent: Vec<LatentMoments>,
}

impl Partition {
    pub fn new(subjects: Vec<Subject>) -> Self {
        Self { subjects, cache: GramCache::default(), latent: Vec::new() }
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

    fn grams(&mut self, dec: &DecParams) -> Result<GramSet> {
        let set = self.cache.get(&self.subjects, dec);
        if let Some((s, Err(msg))) = self.subjects.iter().zip(set.iter()).find(|(_, g)| g.is_err()) {
            return Err(Error::Estimation(format!("{msg} (subject {})", s.id)));
        }
        Ok(set)
    }

    /// Full E step at Θ. With `with_grid`, both grid passes are evaluated at Θ as well.
    pub fn estep(&mut self, theta: &Theta, stamp: u64, with_grid: bool) -> Result<PartitionStats> {
        let ctx = ThetaContext::new(theta)?;
        let grams = self.grams(&theta.dec)?;
        let mut out = PartitionStats::empty(theta.q(), theta.p(), stamp);
        self.latent.clear();
        for (s, gram) in self.subjects.iter().zip(grams.iter()) {
            let gram = gram.as_ref().expect("checked in grams()");
            let stats = subject_stats(gram, &ctx).map_err(|e| e.for_subject(&s.id))?;
            self.latent.push(LatentMoments { a: stats.a, b: stats.b, c: stats.c });
            out.add(&stats);
        }
        if with_grid {
            out.grid = Some(GridSums {
                rho1: self.grid_pass(&ctx, GridAxis::Rho1 { rho2: theta.dec.rho2 })?,
                rho2: self.grid_pass(&ctx, GridAxis::Rho2 { rho1: theta.dec.rho1 })?,
            });
        }
        Ok(out)
    }

    fn latent(&self) -> Result<&[LatentMoments]> {
        if self.latent.len() != self.subjects.len() {
            return Err(Error::Estimation("statistics refresh requested before an E step".into()));
        }
        Ok(&self.latent)
    }

    /// (Σ 1ᵀΣ⁻¹(Y−Xβ), Σ a 1ᵀΣ⁻¹1) at the supplied β.
    pub fn refresh_a(&mut self, theta: &Theta) -> Result<(MatrixSum, ExactSum)> {
        let grams = self.grams(&theta.dec)?;
        let latent = self.latent()?;
        let mut s_a1 = MatrixSum::zeros(theta.p(), 1);
        let mut s_a2 = ExactSum::new();
        for (gram, m) in grams.iter().zip(latent) {
            let gram = gram.as_ref().expect("checked in grams()");
            let (u, _) = gram.residual_forms(&theta.beta);
            s_a1.add_vector(&u);
            s_a2.add(m.a * gram.one_s_one);
        }
        Ok((s_a1, s_a2))
    }

    /// Σ of the column-scale statistic at the supplied β and 𝒜.
    pub fn refresh_psi(&mut self, theta: &Theta) -> Result<MatrixSum> {
        let grams = self.grams(&theta.dec)?;
        let latent = self.latent()?;
        let mut s_psi = MatrixSum::zeros(theta.p(), theta.p());
        for (gram, m) in grams.iter().zip(latent) {
            let gram = gram.as_ref().expect("checked in grams()");
            let (u, g) = gram.residual_forms(&theta.beta);
            s_psi.add(&skew_psi_stat(gram, &theta.a_row, &u, &g, m));
        }
        Ok(s_psi)
    }

    /// Partition log-likelihood at every grid value of one axis, all else at Θ.
    pub fn grid(&mut self, theta: &Theta, axis: GridAxis) -> Result<Vec<ExactSum>> {
        let ctx = ThetaContext::new(theta)?;
        self.grid_pass(&ctx, axis)
    }

    fn grid_pass(&mut self, ctx: &ThetaContext, axis: GridAxis) -> Result<Vec<ExactSum>> {
        let mut sums = Vec::with_capacity(GRID.len());
        for &g in &GRID {
            let grams = self.cache.get(&self.subjects, &axis.point(g));
            let mut acc = ExactSum::new();
            for (s, gram) in self.subjects.iter().zip(grams.iter()) {
                match gram {
                    Ok(gram) => acc.add(ctx.subject_loglik(gram).map_err(|e| e.for_subject(&s.id))?),
                    Err(_) => {
                        acc.add(f64::NEG_INFINITY);
                        break;
                    }
                }
            }
            sums.push(acc);
        }
        Ok(sums)
    }
}

pub fn grid_loglik_partition(subjects: &[Subject], theta: &Theta, mode: GridMode) -> Result<GridLoglik> {
    let mut part = Partition::new(subjects.to_vec());
    let rho1 = part.grid(theta, GridAxis::Rho1 { rho2: theta.dec.rho2 })?;
    let fixed = match mode {
        GridMode::Stale => theta.dec.rho1,
        GridMode::Fresh { rho1 } => rho1,
    };
    let rho2 = part.grid(theta, GridAxis::Rho2 { rho1: fixed })?;
    Ok(GridSums { rho1, rho2 }.values())
}
