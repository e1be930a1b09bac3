//! Scores and information matrices for the vectorized skew-t regression with a
//! common row scale, plus the EM rate and speed matrices derived from them.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mvst::{MvstParams, MvstSampler};
use crate::numeric::{cholesky_lower, duplication, spd_inverse, symmetrize, vec_of, ExactSum};
use crate::rng::{rng_from, stream};
use crate::special::{digamma, dlog_bessel_k_dorder, log_bessel_k, trigamma};

/// Generic d-variate skew-t parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SkewTParams {
    pub mu: DVector<f64>,
    pub gamma: DVector<f64>,
    pub omega: DMatrix<f64>,
    pub nu: f64,
}

/// Regression parameters of vec(Y) = (I_p ⊗ X) vec(β) + e with a shared n×n row scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VecSkewTParams {
    /// vec(β), length pq
    pub b_vec: DVector<f64>,
    /// skewness row, length p
    pub a_vec: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub nu: f64,
    /// n×q design
    pub x: DMatrix<f64>,
}

impl VecSkewTParams {
    pub fn new(
        b_vec: DVector<f64>,
        a_vec: DVector<f64>,
        sigma: DMatrix<f64>,
        psi: DMatrix<f64>,
        nu: f64,
        x: DMatrix<f64>,
    ) -> Result<Self> {
        let p = Self { b_vec, a_vec, sigma, psi, nu, x };
        p.validate()?;
        if !(p.nu > 4.0) {
            return Err(Error::domain(format!("information matrices need nu > 4, got {}", p.nu)));
        }
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        let (n, q) = self.x.shape();
        let p = self.a_vec.len();
        if self.b_vec.len() != p * q || self.sigma.shape() != (n, n) || self.psi.shape() != (p, p) {
            return Err(Error::domain(format!(
                "inconsistent dimensions: b {} a {} Sigma {:?} Psi {:?} X {:?}",
                self.b_vec.len(),
                p,
                self.sigma.shape(),
                self.psi.shape(),
                self.x.shape()
            )));
        }
        cholesky_lower(&self.sigma, "Sigma")?;
        cholesky_lower(&self.psi, "Psi")?;
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.a_vec.len()
    }

    pub fn q(&self) -> usize {
        self.x.ncols()
    }

    /// pq + p + n(n+1)/2 + p(p+1)/2 + 1
    pub fn dim(&self) -> usize {
        let (n, p, q) = (self.n(), self.p(), self.q());
        p * q + p + n * (n + 1) / 2 + p * (p + 1) / 2 + 1
    }

    /// Position of Σ₁₁ in the parameter vector.
    pub fn sigma11_index(&self) -> usize {
        self.p() * self.q() + self.p()
    }

    pub fn beta(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.q(), self.p(), self.b_vec.as_slice())
    }

    /// I_p ⊗ X
    pub fn x_tilde(&self) -> DMatrix<f64> {
        DMatrix::identity(self.p(), self.p()).kronecker(&self.x)
    }

    /// I_p ⊗ 1_n
    fn ones_tilde(&self) -> DMatrix<f64> {
        DMatrix::identity(self.p(), self.p()).kronecker(&DMatrix::from_element(self.n(), 1, 1.0))
    }

    pub fn as_skewt(&self) -> SkewTParams {
        SkewTParams {
            mu: self.x_tilde() * &self.b_vec,
            gamma: self.ones_tilde() * &self.a_vec,
            omega: self.psi.kronecker(&self.sigma),
            nu: self.nu,
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let (n, p, q) = (self.n(), self.p(), self.q());
        let mut names = Vec::with_capacity(self.dim());
        for j in 0..p {
            for i in 0..q {
                names.push(format!("beta_{}_{}", i + 1, j + 1));
            }
        }
        names.extend((1..=p).map(|j| format!("a_{j}")));
        for (m, d) in [("sigma", n), ("psi", p)] {
            for j in 0..d {
                for i in j..d {
                    names.push(format!("{m}_{}_{}", i + 1, j + 1));
                }
            }
        }
        names.push("nu".into());
        names
    }
}

/// Score pieces with the scale gradient kept as a full symmetric matrix G,
/// so that d log f = tr(G dΩ).
struct ScoreParts {
    mu: DVector<f64>,
    gamma: DVector<f64>,
    omega: DMatrix<f64>,
    nu: f64,
}

/// Gap below which γᵀΩ⁻¹γ is treated as zero and symmetric-t limits are used.
const SYMMETRIC_SKEW: f64 = 1e-12;

fn score_parts(y: &DVector<f64>, p: &SkewTParams) -> Result<ScoreParts> {
    let d = y.len();
    if p.mu.len() != d || p.gamma.len() != d || p.omega.shape() != (d, d) {
        return Err(Error::domain("inconsistent skew-t dimensions"));
    }
    if !(p.nu > 0.0 && p.nu.is_finite()) {
        return Err(Error::domain(format!("degrees of freedom must be positive, got {}", p.nu)));
    }
    let omega_inv = spd_inverse(&p.omega, "Omega")?;
    let r = y - &p.mu;
    let oi_r = &omega_inv * &r;
    let oi_g = &omega_inv * &p.gamma;
    let big_a = p.nu + r.dot(&oi_r);
    let g = p.gamma.dot(&oi_g);
    let lambda = 0.5 * (p.nu + d as f64);

    // coefficients of dA and dg in d log f, and ∂ν of the Bessel part
    let (alpha_a, alpha_g, nu_bessel) = if g <= SYMMETRIC_SKEW * big_a {
        (-lambda / big_a, big_a / (4.0 * (lambda - 1.0)), 0.5 * digamma(lambda)? + 0.5 * 2f64.ln() - 0.5 * big_a.ln())
    } else {
        let s = (big_a * g).sqrt();
        let log_k = log_bessel_k(lambda, s)?;
        let kappa = -0.5
            * ((log_bessel_k(lambda - 1.0, s)? - log_k).exp() + (log_bessel_k(lambda + 1.0, s)? - log_k).exp());
        (
            kappa * g / (2.0 * s) - lambda / (2.0 * big_a),
            kappa * big_a / (2.0 * s) + lambda / (2.0 * g),
            0.5 * dlog_bessel_k_dorder(lambda, s)? - 0.25 * (big_a / g).ln(),
        )
    };
    let mu = -(&oi_r * (2.0 * alpha_a)) - &oi_g;
    let gamma = &oi_g * (2.0 * alpha_g) + &oi_r;
    let rg = &r * p.gamma.transpose();
    let c = -(&r * r.transpose()) * alpha_a - &p.gamma * p.gamma.transpose() * alpha_g
        - (&rg + rg.transpose()) * 0.5
        - &p.omega * 0.5;
    let omega = symmetrize(&(&omega_inv * c * &omega_inv));
    let half_nu = 0.5 * p.nu;
    let nu = 0.5 * half_nu.ln() + 0.5 - 0.5 * digamma(half_nu)? + alpha_a + nu_bessel;
    Ok(ScoreParts { mu, gamma, omega, nu })
}

/// Gradient of the skew-t log density over (μ, γ, vech Ω, ν).
pub fn skewt_score(y: &DVector<f64>, p: &SkewTParams) -> Result<DVector<f64>> {
    let parts = score_parts(y, p)?;
    let d = y.len();
    let omega_vech = duplication(d).transpose() * vec_of(&parts.omega);
    let mut out = Vec::with_capacity(2 * d + omega_vech.len() + 1);
    out.extend(parts.mu.iter());
    out.extend(parts.gamma.iter());
    out.extend(omega_vech.iter());
    out.push(parts.nu);
    Ok(DVector::from_vec(out))
}

/// Score of the regression parameters (vec β, 𝒜, vech Σ, vech Ψ, ν) at one vec(Y).
pub fn regression_score(y_vec: &DVector<f64>, p: &VecSkewTParams) -> Result<DVector<f64>> {
    let (n, pp) = (p.n(), p.p());
    let parts = score_parts(y_vec, &p.as_skewt())?;
    let grad_b = p.x_tilde().transpose() * &parts.mu;
    let grad_a = p.ones_tilde().transpose() * &parts.gamma;
    // d log f = tr(G (dΨ ⊗ Σ)) + tr(G (Ψ ⊗ dΣ)) with G split into n×n blocks
    let block = |i: usize, j: usize| parts.omega.view((i * n, j * n), (n, n)).into_owned();
    let mut d_psi = DMatrix::zeros(pp, pp);
    let mut d_sigma = DMatrix::zeros(n, n);
    for i in 0..pp {
        for j in 0..pp {
            let gij = block(i, j);
            d_psi[(i, j)] = (&gij * &p.sigma).trace();
            d_sigma += gij * p.psi[(i, j)];
        }
    }
    let grad_sigma = duplication(n).transpose() * vec_of(&symmetrize(&d_sigma));
    let grad_psi = duplication(pp).transpose() * vec_of(&symmetrize(&d_psi));
    let mut out = Vec::with_capacity(p.dim());
    out.extend(grad_b.iter());
    out.extend(grad_a.iter());
    out.extend(grad_sigma.iter());
    out.extend(grad_psi.iter());
    out.push(parts.nu);
    Ok(DVector::from_vec(out))
}

/// Expected complete-data information for one observation of the regression.
pub fn complete_info(p: &VecSkewTParams) -> Result<DMatrix<f64>> {
    p.validate()?;
    if !(p.nu > 2.0) {
        return Err(Error::domain(format!("complete-data information needs nu > 2, got {}", p.nu)));
    }
    let (n, pp, q) = (p.n(), p.p(), p.q());
    let sigma_inv = spd_inverse(&p.sigma, "Sigma")?;
    let psi_inv = spd_inverse(&p.psi, "Psi")?;
    let xt = p.x_tilde();
    let ones = DVector::from_element(n, 1.0);
    let s1 = &sigma_inv * &ones;
    let one_s_one = ones.dot(&s1);

    let nb = pp * q;
    let na = pp;
    let ns = n * (n + 1) / 2;
    let np = pp * (pp + 1) / 2;
    let (ib, ia, is, ip, inu) = (0, nb, nb + na, nb + na + ns, nb + na + ns + np);
    let mut info = DMatrix::zeros(inu + 1, inu + 1);

    let w = psi_inv.kronecker(&sigma_inv);
    let bb = xt.transpose() * &w * &xt;
    let ba = xt.transpose() * psi_inv.kronecker(&DMatrix::from_column_slice(n, 1, s1.as_slice()));
    let aa = &psi_inv * (p.nu / (p.nu - 2.0) * one_s_one);
    let dn = duplication(n);
    let dp = duplication(pp);
    let ss = dn.transpose() * sigma_inv.kronecker(&sigma_inv) * &dn * (0.5 * pp as f64);
    let pp_block = dp.transpose() * psi_inv.kronecker(&psi_inv) * &dp * (0.5 * n as f64);
    let sp = dn.transpose() * vec_of(&sigma_inv) * vec_of(&psi_inv).transpose() * &dp * 0.5;
    let nu_nu = 0.25 * trigamma(0.5 * p.nu)? - 0.5 / p.nu;

    info.view_mut((ib, ib), (nb, nb)).copy_from(&bb);
    info.view_mut((ib, ia), (nb, na)).copy_from(&ba);
    info.view_mut((ia, ib), (na, nb)).copy_from(&ba.transpose());
    info.view_mut((ia, ia), (na, na)).copy_from(&aa);
    info.view_mut((is, is), (ns, ns)).copy_from(&ss);
    info.view_mut((is, ip), (ns, np)).copy_from(&sp);
    info.view_mut((ip, is), (np, ns)).copy_from(&sp.transpose());
    info.view_mut((ip, ip), (np, np)).copy_from(&pp_block);
    info[(inu, inu)] = nu_nu;
    Ok(info)
}

/// Monte-Carlo estimate of the observed-data information with per-entry standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedInfo {
    pub matrix: DMatrix<f64>,
    pub standard_errors: DMatrix<f64>,
    /// Largest per-entry standard error.
    pub se_max: f64,
    pub draws: usize,
}

const MC_CHUNK: usize = 256;

pub fn observed_info_mc(p: &VecSkewTParams, draws: usize, seed: u64) -> Result<ObservedInfo> {
    p.validate()?;
    if !(p.nu > 4.0) {
        return Err(Error::domain(format!("observed information needs nu > 4, got {}", p.nu)));
    }
    if draws < 1000 {
        return Err(Error::Config(format!("at least 1000 draws are required, got {draws}")));
    }
    let d = p.dim();
    let n = p.n();
    let mvst = MvstParams::new(
        &p.x * p.beta(),
        DMatrix::from_fn(n, p.p(), |_, j| p.a_vec[j]),
        p.sigma.clone(),
        p.psi.clone(),
        p.nu,
    )?;
    let chunks: Vec<(Vec<ExactSum>, Vec<ExactSum>)> = (0..draws.div_ceil(MC_CHUNK))
        .into_par_iter()
        .map(|c| -> Result<_> {
            let sampler = MvstSampler::new(&mvst)?;
            let mut first = vec![ExactSum::new(); d * d];
            let mut second = vec![ExactSum::new(); d * d];
            for i in c * MC_CHUNK..((c + 1) * MC_CHUNK).min(draws) {
                let mut rng = rng_from(seed, &[stream::INFO, i as u64]);
                let y = sampler.sample(&mut rng);
                let s = regression_score(&vec_of(&y), p)?;
                for a in 0..d {
                    for b in 0..d {
                        let v = s[a] * s[b];
                        first[a + b * d].add(v);
                        second[a + b * d].add(v * v);
                    }
                }
            }
            Ok((first, second))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut first = vec![ExactSum::new(); d * d];
    let mut second = vec![ExactSum::new(); d * d];
    for (f, s) in &chunks {
        first.iter_mut().zip(f).for_each(|(a, b)| a.merge(b));
        second.iter_mut().zip(s).for_each(|(a, b)| a.merge(b));
    }
    let m = draws as f64;
    let mean = DMatrix::from_fn(d, d, |a, b| first[a + b * d].value() / m);
    let se = DMatrix::from_fn(d, d, |a, b| {
        let mu = mean[(a, b)];
        ((second[a + b * d].value() / m - mu * mu).max(0.0) / (m - 1.0)).sqrt()
    });
    let se_max = se.max();
    Ok(ObservedInfo { matrix: symmetrize(&mean), standard_errors: se, se_max, draws })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateMatrices {
    pub i_complete: DMatrix<f64>,
    pub i_observed: DMatrix<f64>,
    /// I_c⁻¹ I_o
    pub speed: DMatrix<f64>,
    /// I − speed
    pub rate: DMatrix<f64>,
    pub r_max: f64,
    pub s_min: f64,
}

pub fn rate_matrices(i_c: &DMatrix<f64>, i_o: &DMatrix<f64>) -> Result<RateMatrices> {
    if !i_c.is_square() || i_c.shape() != i_o.shape() {
        return Err(Error::domain(format!(
            "information matrices must be square and equal-sized, got {:?} and {:?}",
            i_c.shape(),
            i_o.shape()
        )));
    }
    let d = i_c.nrows();
    let chol = nalgebra::Cholesky::new(symmetrize(i_c)).ok_or_else(|| Error::Decomposition {
        matrix: "complete-data information".into(),
        context: "; pin unidentified coordinates before computing rates".into(),
    })?;
    let speed = chol.solve(i_o);
    let rate = DMatrix::identity(d, d) - &speed;
    // L⁻¹ I_o L⁻ᵀ has the spectrum of I_c⁻¹ I_o
    let l = chol.l();
    let half = l.solve_lower_triangular(i_o).expect("positive diagonal");
    let similar = symmetrize(&l.solve_lower_triangular(&half.transpose()).expect("positive diagonal"));
    let eig = similar.symmetric_eigenvalues();
    let s_min = eig.min();
    Ok(RateMatrices { i_complete: i_c.clone(), i_observed: i_o.clone(), speed, rate, r_max: 1.0 - s_min, s_min })
}

/// Removes the listed rows and columns.
pub fn drop_coordinates(m: &DMatrix<f64>, drop: &[usize]) -> DMatrix<f64> {
    let keep: Vec<usize> = (0..m.nrows()).filter(|i| !drop.contains(i)).collect();
    DMatrix::from_fn(keep.len(), keep.len(), |i, j| m[(keep[i], keep[j])])
}
