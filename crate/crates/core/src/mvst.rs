//! Matrix-variate skew-t and generalized inverse Gaussian primitives.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::numeric::{cholesky_lower, log_det_from_cholesky, solve_lower};
use crate::rng::{rng_from, Rng};
use crate::special::{bessel_k_ratio, dlog_bessel_k_dorder, ln_gamma, log_bessel_k};

/// Below this fraction of (δ+ν) the skewness quadratic form is treated as zero
/// and the symmetric matrix-t density is used.
pub(crate) const SYMMETRIC_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct MvstParams {
    pub m: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub nu: f64,
}

impl MvstParams {
    pub fn new(
        m: DMatrix<f64>,
        a: DMatrix<f64>,
        sigma: DMatrix<f64>,
        psi: DMatrix<f64>,
        nu: f64,
    ) -> Result<Self> {
        let (n, p) = m.shape();
        if a.shape() != (n, p) || sigma.shape() != (n, n) || psi.shape() != (p, p) {
            return Err(Error::domain(format!(
                "inconsistent dimensions: M {:?}, A {:?}, Sigma {:?}, Psi {:?}",
                m.shape(),
                a.shape(),
                sigma.shape(),
                psi.shape()
            )));
        }
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(Error::domain(format!("degrees of freedom must be positive, got {nu}")));
        }
        Ok(Self { m, a, sigma, psi, nu })
    }

    pub fn nrows(&self) -> usize {
        self.m.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.m.ncols()
    }

    fn factors(&self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        Ok((cholesky_lower(&self.sigma, "Sigma")?, cholesky_lower(&self.psi, "Psi")?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadForms {
    pub delta: f64,
    pub rho: f64,
}

/// Scalar ingredients of the log density.
#[derive(Debug, Clone, Copy)]
pub(crate) struct DensityParts {
    pub delta: f64,
    pub rho: f64,
    /// tr(Σ⁻¹(Y−M)Ψ⁻¹Aᵀ)
    pub cross: f64,
    pub log_det_sigma: f64,
    pub log_det_psi: f64,
    pub n: usize,
    pub p: usize,
    pub nu: f64,
}

impl DensityParts {
    pub fn is_symmetric(&self) -> bool {
        self.rho < SYMMETRIC_THRESHOLD * (self.delta + self.nu)
    }

    pub fn log_density(&self) -> Result<f64> {
        let (n, p) = (self.n as f64, self.p as f64);
        let nu = self.nu;
        let np = n * p;
        let base = -0.5 * p * self.log_det_sigma - 0.5 * n * self.log_det_psi - ln_gamma(0.5 * nu);
        if self.is_symmetric() {
            return Ok(base + ln_gamma(0.5 * (nu + np))
                - 0.5 * np * (nu * PI).ln()
                - 0.5 * (nu + np) * (self.delta / nu).ln_1p());
        }
        let dn = self.delta + nu;
        let bessel = log_bessel_k(-0.5 * (nu + np), (self.rho * dn).sqrt())?;
        Ok(base + 2f64.ln() + 0.5 * nu * (0.5 * nu).ln() + self.cross
            - 0.5 * np * (2.0 * PI).ln()
            - 0.25 * (nu + np) * (dn / self.rho).ln()
            + bessel)
    }
}

struct Whitened {
    /// Lσ⁻¹ (Y−M) Lψ⁻ᵀ
    resid: DMatrix<f64>,
    /// Lσ⁻¹ A Lψ⁻ᵀ
    skew: DMatrix<f64>,
    log_det_sigma: f64,
    log_det_psi: f64,
}

fn whiten(y: &DMatrix<f64>, params: &MvstParams) -> Result<Whitened> {
    if y.shape() != params.m.shape() {
        return Err(Error::domain(format!(
            "observation is {:?} but the location is {:?}",
            y.shape(),
            params.m.shape()
        )));
    }
    let (ls, lp) = params.factors()?;
    let right = |m: DMatrix<f64>| solve_lower(&lp, &solve_lower(&ls, &m).transpose()).transpose();
    Ok(Whitened {
        resid: right(y - &params.m),
        skew: right(params.a.clone()),
        log_det_sigma: log_det_from_cholesky(&ls),
        log_det_psi: log_det_from_cholesky(&lp),
    })
}

pub fn quad_forms(y: &DMatrix<f64>, params: &MvstParams) -> Result<QuadForms> {
    let w = whiten(y, params)?;
    Ok(QuadForms { delta: w.resid.norm_squared(), rho: w.skew.norm_squared() })
}

pub fn mvst_logpdf(y: &DMatrix<f64>, params: &MvstParams) -> Result<f64> {
    let w = whiten(y, params)?;
    DensityParts {
        delta: w.resid.norm_squared(),
        rho: w.skew.norm_squared(),
        cross: w.resid.dot(&w.skew),
        log_det_sigma: w.log_det_sigma,
        log_det_psi: w.log_det_psi,
        n: params.nrows(),
        p: params.ncols(),
        nu: params.nu,
    }
    .log_density()
}

/// Draws Y = M + W A + √W Lσ Z Lψᵀ for a supplied mixing variable W.
pub struct MvstSampler<'a> {
    params: &'a MvstParams,
    l_sigma: DMatrix<f64>,
    l_psi: DMatrix<f64>,
    mixing: Gamma<f64>,
}

impl<'a> MvstSampler<'a> {
    pub fn new(params: &'a MvstParams) -> Result<Self> {
        let (l_sigma, l_psi) = params.factors()?;
        let mixing = Gamma::new(0.5 * params.nu, 2.0 / params.nu)
            .map_err(|e| Error::domain(format!("inverse-gamma mixing: {e}")))?;
        Ok(Self { params, l_sigma, l_psi, mixing })
    }

    pub fn draw_mixing(&self, rng: &mut Rng) -> f64 {
        1.0 / self.mixing.sample(rng)
    }

    pub fn sample_given_mixing(&self, w: f64, rng: &mut Rng) -> DMatrix<f64> {
        let (n, p) = self.params.m.shape();
        let z = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let v = &self.l_sigma * z * self.l_psi.transpose();
        &self.params.m + &self.params.a * w + v * w.sqrt()
    }

    pub fn sample(&self, rng: &mut Rng) -> DMatrix<f64> {
        let w = self.draw_mixing(rng);
        self.sample_given_mixing(w, rng)
    }
}

pub fn mvst_sample(params: &MvstParams, rng_seed: u64) -> Result<DMatrix<f64>> {
    let sampler = MvstSampler::new(params)?;
    Ok(sampler.sample(&mut rng_from(rng_seed, &[])))
}

/// GIG(a, b, λ) with density ∝ x^{λ−1} exp(−(a x + b/x)/2).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GigParams {
    pub a: f64,
    pub b: f64,
    pub lambda: f64,
}

impl GigParams {
    pub fn new(a: f64, b: f64, lambda: f64) -> Result<Self> {
        let finite = a.is_finite() && b.is_finite() && lambda.is_finite();
        let valid = finite
            && a >= 0.0
            && b >= 0.0
            && ((a > 0.0 && b > 0.0) || (a > 0.0 && lambda > 0.0) || (b > 0.0 && lambda < 0.0));
        if !valid {
            return Err(Error::domain(format!("invalid GIG parameters a={a}, b={b}, lambda={lambda}")));
        }
        Ok(Self { a, b, lambda })
    }

    fn require_interior(&self) -> Result<()> {
        if self.a > 0.0 && self.b > 0.0 {
            Ok(())
        } else {
            Err(Error::domain(format!("GIG needs a > 0 and b > 0, got a={}, b={}", self.a, self.b)))
        }
    }
}

pub fn gig_logpdf(x: f64, p: &GigParams) -> Result<f64> {
    if !(x > 0.0 && x.is_finite()) {
        return Err(Error::domain(format!("GIG density needs x > 0, got {x}")));
    }
    let GigParams { a, b, lambda } = *p;
    if b == 0.0 {
        // Gamma(λ, rate a/2)
        return Ok(lambda * (0.5 * a).ln() - ln_gamma(lambda) + (lambda - 1.0) * x.ln() - 0.5 * a * x);
    }
    if a == 0.0 {
        // Inverse-gamma(−λ, scale b/2)
        return Ok(-lambda * (0.5 * b).ln() - ln_gamma(-lambda) + (lambda - 1.0) * x.ln() - 0.5 * b / x);
    }
    Ok(0.5 * lambda * (a / b).ln() + (lambda - 1.0) * x.ln()
        - 2f64.ln()
        - log_bessel_k(lambda, (a * b).sqrt())?
        - 0.5 * (a * x + b / x))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GigMoments {
    pub e_w: f64,
    pub e_inv_w: f64,
    pub e_log_w: f64,
}

pub fn gig_moments(p: &GigParams) -> Result<GigMoments> {
    p.require_interior()?;
    let GigParams { a, b, lambda } = *p;
    let omega = (a * b).sqrt();
    let ratio = bessel_k_ratio(lambda, omega)?;
    Ok(GigMoments {
        e_w: (b / a).sqrt() * ratio,
        e_inv_w: (a / b).sqrt() * ratio - 2.0 * lambda / b,
        e_log_w: 0.5 * (b / a).ln() + dlog_bessel_k_dorder(lambda, omega)?,
    })
}

fn gig_mode(lambda: f64, omega: f64) -> f64 {
    if lambda >= 1.0 {
        (((lambda - 1.0).powi(2) + omega * omega).sqrt() + (lambda - 1.0)) / omega
    } else {
        omega / (((1.0 - lambda).powi(2) + omega * omega).sqrt() + (1.0 - lambda))
    }
}

/// Exact GIG sampler: ratio-of-uniforms with or without mode shift, and a
/// three-piece rejection hat for small λ and ω.
#[derive(Debug, Clone)]
pub struct GigSampler {
    params: GigParams,
    proposals: u64,
    accepted: u64,
}

impl GigSampler {
    pub fn new(params: GigParams) -> Result<Self> {
        params.require_interior()?;
        Ok(Self { params, proposals: 0, accepted: 0 })
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            return 1.0;
        }
        self.accepted as f64 / self.proposals as f64
    }

    pub fn sample(&mut self, rng: &mut Rng) -> f64 {
        let GigParams { a, b, lambda } = self.params;
        let omega = (a * b).sqrt();
        let scale = (b / a).sqrt();
        let l = lambda.abs();
        let y = if l > 2.0 || omega > 3.0 {
            self.rou_shifted(l, omega, rng)
        } else if l >= 1.0 - 2.25 * omega * omega || omega > 0.2 {
            self.rou_plain(l, omega, rng)
        } else {
            self.three_piece(l, omega, rng)
        };
        self.accepted += 1;
        if lambda < 0.0 {
            scale / y
        } else {
            scale * y
        }
    }

    fn rou_plain(&mut self, l: f64, omega: f64, rng: &mut Rng) -> f64 {
        let t = 0.5 * (l - 1.0);
        let s = 0.25 * omega;
        let xm = gig_mode(l, omega);
        let nc = t * xm.ln() - s * (xm + 1.0 / xm);
        let ym = ((l + 1.0) + ((l + 1.0).powi(2) + omega * omega).sqrt()) / omega;
        let um = (0.5 * (l + 1.0) * ym.ln() - s * (ym + 1.0 / ym) - nc).exp();
        loop {
            self.proposals += 1;
            let u = um * rng.random::<f64>();
            let v: f64 = rng.random();
            let x = u / v;
            if x > 0.0 && x.is_finite() && v.ln() <= t * x.ln() - s * (x + 1.0 / x) - nc {
                return x;
            }
        }
    }

    fn rou_shifted(&mut self, l: f64, omega: f64, rng: &mut Rng) -> f64 {
        let t = 0.5 * (l - 1.0);
        let s = 0.25 * omega;
        let xm = gig_mode(l, omega);
        let nc = t * xm.ln() - s * (xm + 1.0 / xm);
        // Roots of the cubic bounding the shifted ratio-of-uniforms region.
        let ca = -(2.0 * (l + 1.0) / omega + xm);
        let cb = 2.0 * (l - 1.0) * xm / omega - 1.0;
        let cc = xm;
        let p = cb - ca * ca / 3.0;
        let q = 2.0 * ca.powi(3) / 27.0 - ca * cb / 3.0 + cc;
        let fi = (-q / (2.0 * (-(p * p * p) / 27.0).sqrt())).clamp(-1.0, 1.0).acos();
        let fak = 2.0 * (-p / 3.0).sqrt();
        let y1 = fak * (fi / 3.0).cos() - ca / 3.0;
        let y2 = fak * (fi / 3.0 + 4.0 / 3.0 * PI).cos() - ca / 3.0;
        let uplus = (y1 - xm) * (t * y1.ln() - s * (y1 + 1.0 / y1) - nc).exp();
        let uminus = (y2 - xm) * (t * y2.ln() - s * (y2 + 1.0 / y2) - nc).exp();
        loop {
            self.proposals += 1;
            let u = uminus + rng.random::<f64>() * (uplus - uminus);
            let v: f64 = rng.random();
            let x = u / v + xm;
            if x > 0.0 && x.is_finite() && v.ln() <= t * x.ln() - s * (x + 1.0 / x) - nc {
                return x;
            }
        }
    }

    fn three_piece(&mut self, l: f64, omega: f64, rng: &mut Rng) -> f64 {
        let xm = gig_mode(l, omega);
        let x0 = omega / (1.0 - l);
        let k0 = ((l - 1.0) * xm.ln() - 0.5 * omega * (xm + 1.0 / xm)).exp();
        let area0 = k0 * x0;
        let (k1, area1, k2, area2) = if x0 >= 2.0 / omega {
            let k2 = x0.powf(l - 1.0);
            (0.0, 0.0, k2, k2 * 2.0 * (-omega * x0 / 2.0).exp() / omega)
        } else {
            let k1 = (-omega).exp();
            let area1 = if l == 0.0 {
                k1 * (2.0 / (omega * omega)).ln()
            } else {
                k1 / l * ((2.0 / omega).powf(l) - x0.powf(l))
            };
            let k2 = (2.0 / omega).powf(l - 1.0);
            (k1, area1, k2, k2 * 2.0 * (-1.0f64).exp() / omega)
        };
        let total = area0 + area1 + area2;
        let tail_start = x0.max(2.0 / omega);
        loop {
            self.proposals += 1;
            let mut v = total * rng.random::<f64>();
            let (x, hat) = if v <= area0 {
                (x0 * v / area0, k0)
            } else {
                v -= area0;
                if v <= area1 {
                    if l == 0.0 {
                        let x = omega * (omega.exp() * v).exp();
                        (x, k1 / x)
                    } else {
                        let x = (x0.powf(l) + l / k1 * v).powf(1.0 / l);
                        (x, k1 * x.powf(l - 1.0))
                    }
                } else {
                    v -= area1;
                    let x = -2.0 / omega * ((-omega / 2.0 * tail_start).exp() - omega / (2.0 * k2) * v).ln();
                    (x, k2 * (-omega / 2.0 * x).exp())
                }
            };
            let u = rng.random::<f64>() * hat;
            if x > 0.0 && x.is_finite() && u.ln() <= (l - 1.0) * x.ln() - omega / 2.0 * (x + 1.0 / x) {
                return x;
            }
        }
    }
}

pub fn gig_sample(p: &GigParams, rng_seed: u64) -> Result<f64> {
    let mut sampler = GigSampler::new(*p)?;
    Ok(sampler.sample(&mut rng_from(rng_seed, &[])))
}

/// Log density of the d-variate skew-t with location μ, skewness γ, scale Ω and ν degrees of freedom.
pub fn vec_skewt_logpdf(
    y: &DVector<f64>,
    mu: &DVector<f64>,
    gamma: &DVector<f64>,
    omega: &DMatrix<f64>,
    nu: f64,
) -> Result<f64> {
    let d = y.len();
    if mu.len() != d || gamma.len() != d || omega.shape() != (d, d) {
        return Err(Error::domain("inconsistent skew-t dimensions"));
    }
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(Error::domain(format!("degrees of freedom must be positive, got {nu}")));
    }
    let l = cholesky_lower(omega, "Omega")?;
    let r = l.solve_lower_triangular(&(y - mu)).expect("positive diagonal");
    let g = l.solve_lower_triangular(gamma).expect("positive diagonal");
    let delta = r.norm_squared();
    let rho = g.norm_squared();
    let cross = r.dot(&g);
    let half_log_det = 0.5 * log_det_from_cholesky(&l);
    let df = d as f64;
    let h = 0.5 * (nu + df);
    if rho < SYMMETRIC_THRESHOLD * (delta + nu) {
        return Ok(ln_gamma(h) - ln_gamma(0.5 * nu) - 0.5 * df * (PI * nu).ln() - half_log_det
            - h * (delta / nu).ln_1p());
    }
    let s = ((nu + delta) * rho).sqrt();
    Ok((1.0 - h) * 2f64.ln() - ln_gamma(0.5 * nu) - 0.5 * df * (PI * nu).ln() - half_log_det
        + log_bessel_k(h, s)?
        + cross
        + h * s.ln()
        - h * (delta / nu).ln_1p())
}
