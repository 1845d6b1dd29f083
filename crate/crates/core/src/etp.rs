//! Extended multivariate t-distribution (EMTD) with second parameter `ν - 1`,
//! the per-site derivatives used by the latent mode search, and sampling.
//!
//! For a single site with residual `S = y - m - τ` and `c = 2(ν-1)σ²` the
//! log-density in `τ` is
//!
//! ```text
//! g(τ) = -½ log(2π(ν-1)σ²) + lnΓ(ν+½) - lnΓ(ν) - (ν+½) log(1 + S²/c)
//! g'   = (1+2ν) S / (c + S²)
//! g''  = (1+2ν) (S² - c) / (c + S²)²
//! ```

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::linalg::cholesky_jittered;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtpParams {
    pub nu: f64,
    pub sigma2: f64,
}

impl EtpParams {
    pub fn new(nu: f64, sigma2: f64) -> Result<Self> {
        let p = EtpParams { nu, sigma2 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 1.0) || !self.nu.is_finite() {
            return Err(Error::Parameter(format!("nu must be > 1, got {}", self.nu)));
        }
        if !(self.sigma2 > 0.0) || !self.sigma2.is_finite() {
            return Err(Error::Parameter(format!("sigma2 must be > 0, got {}", self.sigma2)));
        }
        Ok(())
    }

    /// `c = 2(ν-1)σ²`.
    #[inline]
    pub fn scale(&self) -> f64 {
        2.0 * (self.nu - 1.0) * self.sigma2
    }

    /// Supremum of `|g'|` over all residuals, attained at `S = ±√c`.
    pub fn score_bound(&self) -> f64 {
        (1.0 + 2.0 * self.nu) / (2.0 * self.scale().sqrt())
    }
}

/// Log-density of the EMTD at `z` with location `h` and scale `σ² I_n`.
pub fn emtd_logpdf(z: &[f64], h: &[f64], params: &EtpParams) -> Result<f64> {
    params.validate()?;
    if z.len() != h.len() {
        return Err(Error::Dimension {
            expected: z.len(),
            found: h.len(),
        });
    }
    if z.is_empty() {
        return Err(Error::Parameter("EMTD needs n >= 1".into()));
    }
    let n = z.len() as f64;
    let nu = params.nu;
    let c = params.scale();
    let q: f64 = z.iter().zip(h).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(-0.5 * n * (LN_2PI + ((nu - 1.0) * params.sigma2).ln()) + ln_gamma(0.5 * n + nu)
        - ln_gamma(nu)
        - (0.5 * n + nu) * (q / c).ln_1p())
}

/// `(g', g'')` at residual `S`.
pub fn g_derivs(s: f64, params: &EtpParams) -> Result<(f64, f64)> {
    params.validate()?;
    Ok(t_g1_g2(s, params))
}

#[inline]
fn t_g1_g2(s: f64, params: &EtpParams) -> (f64, f64) {
    let a = 1.0 + 2.0 * params.nu;
    let c = params.scale();
    let q = c + s * s;
    (a * s / q, a * (s * s - c) / (q * q))
}

pub fn gaussian_logpdf(z: &[f64], h: &[f64], sigma2: f64) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::Parameter(format!("sigma2 must be > 0, got {sigma2}")));
    }
    if z.len() != h.len() {
        return Err(Error::Dimension {
            expected: z.len(),
            found: h.len(),
        });
    }
    let n = z.len() as f64;
    let q: f64 = z.iter().zip(h).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(-0.5 * n * (LN_2PI + sigma2.ln()) - 0.5 * q / sigma2)
}

/// Draws one ETP vector: `r ~ InvGamma(ν, ν-1)`, then `N(0, r·cov)`.
pub fn sample_etp<R: Rng + ?Sized>(
    params: &EtpParams,
    cov: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    params.validate()?;
    let chol = cholesky_jittered(cov)?;
    let gamma = Gamma::new(params.nu, 1.0 / (params.nu - 1.0))
        .map_err(|e| Error::Parameter(e.to_string()))?;
    let r = 1.0 / gamma.sample(rng);
    let n = cov.nrows();
    let xi = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)));
    Ok(chol.l() * xi * r.sqrt())
}

/// Everything the latent-mode search and the scores need about one site.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SiteTerms {
    pub log_density: f64,
    /// `∂g/∂τ`
    pub g1: f64,
    /// `∂²g/∂τ²`
    pub g2: f64,
    /// `∂d/∂τ` with `d = -g''`; equal to `∂d/∂m` for the site mean `m`.
    pub dd_dtau: f64,
    pub dlog_dsigma2: f64,
    pub dg1_dsigma2: f64,
    pub dd_dsigma2: f64,
    pub dlog_dnu: f64,
    pub dg1_dnu: f64,
    pub dd_dnu: f64,
}

/// Observation model for a single site given the latent value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Likelihood {
    StudentT(EtpParams),
    Gaussian { sigma2: f64 },
}

impl Likelihood {
    pub fn sigma2(&self) -> f64 {
        match self {
            Likelihood::StudentT(p) => p.sigma2,
            Likelihood::Gaussian { sigma2 } => *sigma2,
        }
    }

    pub fn nu(&self) -> Option<f64> {
        match self {
            Likelihood::StudentT(p) => Some(p.nu),
            Likelihood::Gaussian { .. } => None,
        }
    }

    pub fn with_sigma2(&self, sigma2: f64) -> Self {
        match *self {
            Likelihood::StudentT(p) => Likelihood::StudentT(EtpParams { sigma2, ..p }),
            Likelihood::Gaussian { .. } => Likelihood::Gaussian { sigma2 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Likelihood::StudentT(p) => p.validate(),
            Likelihood::Gaussian { sigma2 } if *sigma2 > 0.0 && sigma2.is_finite() => Ok(()),
            Likelihood::Gaussian { sigma2 } => {
                Err(Error::Parameter(format!("sigma2 must be > 0, got {sigma2}")))
            }
        }
    }

    /// Site log-density at residual `s`.
    pub fn log_density(&self, s: f64) -> f64 {
        match self {
            Likelihood::StudentT(p) => {
                let c = p.scale();
                -0.5 * (LN_2PI + ((p.nu - 1.0) * p.sigma2).ln()) + ln_gamma(p.nu + 0.5)
                    - ln_gamma(p.nu)
                    - (p.nu + 0.5) * (s * s / c).ln_1p()
            }
            Likelihood::Gaussian { sigma2 } => -0.5 * (LN_2PI + sigma2.ln()) - 0.5 * s * s / sigma2,
        }
    }

    /// `(g', g'')` at residual `s`.
    #[inline]
    pub fn g_derivs(&self, s: f64) -> (f64, f64) {
        match self {
            Likelihood::StudentT(p) => t_g1_g2(s, p),
            Likelihood::Gaussian { sigma2 } => (s / sigma2, -1.0 / sigma2),
        }
    }

    pub fn site_terms(&self, s: f64) -> SiteTerms {
        match *self {
            Likelihood::StudentT(p) => {
                let nu = p.nu;
                let a = 1.0 + 2.0 * nu;
                let c = p.scale();
                let s2 = s * s;
                let q = c + s2;
                let q2 = q * q;
                let q3 = q2 * q;
                let dd_dc = a * (3.0 * s2 - c) / q3;
                SiteTerms {
                    log_density: self.log_density(s),
                    g1: a * s / q,
                    g2: a * (s2 - c) / q2,
                    // d = -g'', ∂S/∂τ = -1
                    dd_dtau: 2.0 * a * s * (3.0 * c - s2) / q3,
                    dlog_dsigma2: -0.5 / p.sigma2 + a * (nu - 1.0) * s2 / (c * q),
                    dg1_dsigma2: -a * s * 2.0 * (nu - 1.0) / q2,
                    dd_dsigma2: dd_dc * 2.0 * (nu - 1.0),
                    dlog_dnu: -0.5 / (nu - 1.0) + digamma(nu + 0.5) - digamma(nu)
                        - (s2 / c).ln_1p()
                        + (nu + 0.5) * s2 * 2.0 * p.sigma2 / (c * q),
                    dg1_dnu: 2.0 * s / q - a * s * 2.0 * p.sigma2 / q2,
                    dd_dnu: -2.0 * (s2 - c) / q2 + dd_dc * 2.0 * p.sigma2,
                }
            }
            Likelihood::Gaussian { sigma2 } => SiteTerms {
                log_density: self.log_density(s),
                g1: s / sigma2,
                g2: -1.0 / sigma2,
                dd_dtau: 0.0,
                dlog_dsigma2: -0.5 / sigma2 + 0.5 * s * s / (sigma2 * sigma2),
                dg1_dsigma2: -s / (sigma2 * sigma2),
                dd_dsigma2: -1.0 / (sigma2 * sigma2),
                dlog_dnu: 0.0,
                dg1_dnu: 0.0,
                dd_dnu: 0.0,
            },
        }
    }
}
