//! Posterior predictive mean and variance of a fitted curve at new times.
//!
//! With `k*` the cross-covariance between the query and the curve's training
//! inputs and `a = K⁻¹k*`:
//!
//! * mean = `z_iᵀβ(t*) + aᵀτ̂`
//! * variance = `aᵀΩa + σ*² + σ²`, where `σ*² = k(u*, u*) - k*ᵀK⁻¹k*`
//!   and `Ω = (K⁻¹ + D)⁻¹` is the latent posterior covariance.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::bspline::eval_beta;
use crate::dataset::design_vector;
use crate::error::{Error, Result};
use crate::estimation::ModelFit;
use crate::kernels::{cross_kernel, eval_kernel, KernelParams};
use crate::linalg::cholesky_jittered;

static CLAMPED: AtomicUsize = AtomicUsize::new(0);

/// Number of times a negative `σ*²` has been clamped to zero in this process.
pub fn clamped_variance_count() -> usize {
    CLAMPED.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionResult {
    pub mean: f64,
    pub variance: f64,
    /// `z_iᵀβ(t*)`
    pub mean_structure: f64,
    /// `aᵀτ̂`
    pub random_effect: f64,
    /// `aᵀΩa`
    pub latent_variance: f64,
    /// `σ*²`
    pub conditional_variance: f64,
    /// `σ²`
    pub noise_variance: f64,
}

struct LatentState {
    kernel: KernelParams,
    times: Vec<f64>,
    covariates: DMatrix<f64>,
    k_chol: Cholesky<f64, Dyn>,
    mode: DVector<f64>,
    r: DMatrix<f64>,
}

/// Everything needed to predict one curve, factorized once.
struct CurvePredictor<'a> {
    fit: &'a ModelFit,
    level: usize,
    latent: Option<LatentState>,
    /// Kernel used for an unseen curve (prior only).
    prior: Option<KernelParams>,
}

impl<'a> CurvePredictor<'a> {
    fn fitted(fit: &'a ModelFit, id: &str) -> Result<Self> {
        let idx = fit.curve_index(id).ok_or_else(|| Error::UnknownCurve(id.to_string()))?;
        let cf = &fit.curves[idx];
        let latent = match (&cf.kernel, &cf.posterior) {
            (Some(kernel), Some(post)) => Some(LatentState {
                kernel: kernel.clone(),
                times: cf.curve.times.clone(),
                covariates: cf.curve.covariates.clone(),
                k_chol: cholesky_jittered(&post.k)?,
                mode: post.mode.clone(),
                r: post.r_matrix(),
            }),
            (Some(_), None) => return Err(Error::Fit(format!("curve `{id}` has no latent posterior"))),
            _ => None,
        };
        Ok(CurvePredictor {
            fit,
            level: cf.curve.level,
            latent,
            prior: None,
        })
    }

    fn unseen(fit: &'a ModelFit, level: usize) -> Result<Self> {
        if level == 0 || level > fit.level_labels.len() {
            return Err(Error::Index {
                index: level,
                max: fit.level_labels.len(),
            });
        }
        let prior = if fit.method.has_random_effect() {
            Some(typical_kernel(fit, level)?)
        } else {
            None
        };
        Ok(CurvePredictor {
            fit,
            level,
            latent: None,
            prior,
        })
    }

    /// `u*` if given, else the covariate rule, else the observed row when
    /// `t*` is one of the curve's own times.
    fn covariates_at(&self, t_star: f64, u_star: Option<&[f64]>) -> Result<Vec<f64>> {
        if let Some(u) = u_star {
            return Ok(u.to_vec());
        }
        if let Some(u) = self.fit.covariate_rule.at(t_star) {
            return Ok(u);
        }
        self.latent
            .as_ref()
            .and_then(|lat| lat.times.iter().position(|&t| t == t_star).map(|k| lat.covariates.row(k).iter().copied().collect()))
            .ok_or_else(|| Error::Parameter("covariates are not a function of time; supply u* explicitly".into()))
    }

    fn predict(&self, t_star: f64, u_star: Option<&[f64]>) -> Result<PredictionResult> {
        let beta = eval_beta(&self.fit.coefficients, &self.fit.basis, t_star)?;
        let z = design_vector(self.level, self.fit.level_labels.len())?;
        let mean_structure = z.dot(beta.as_slice())?;
        let noise_variance = self.fit.sigma2();
        let (random_effect, latent_variance, conditional_variance) = match (&self.latent, &self.prior) {
            (Some(lat), _) => {
                let u = self.covariates_at(t_star, u_star)?;
                let ks = cross_kernel(&u, &lat.covariates, &lat.kernel)?;
                let kss = eval_kernel(&u, &u, &lat.kernel)?;
                let a = lat.k_chol.solve(&ks);
                let mut cond = kss - ks.dot(&a);
                if cond < 0.0 {
                    CLAMPED.fetch_add(1, Ordering::Relaxed);
                    cond = 0.0;
                }
                // aᵀΩa = aᵀKa - aᵀKRKa with Ka = k*
                let latent = (ks.dot(&a) - ks.dot(&(&lat.r * &ks))).max(0.0);
                (a.dot(&lat.mode), latent, cond)
            }
            (None, Some(kernel)) => {
                let u = self.covariates_at(t_star, u_star)?;
                (0.0, 0.0, eval_kernel(&u, &u, kernel)?)
            }
            (None, None) => (0.0, 0.0, 0.0),
        };
        Ok(PredictionResult {
            mean: mean_structure + random_effect,
            variance: latent_variance + conditional_variance + noise_variance,
            mean_structure,
            random_effect,
            latent_variance,
            conditional_variance,
            noise_variance,
        })
    }
}

/// Geometric mean of the fitted kernels at `level` (all levels if none).
fn typical_kernel(fit: &ModelFit, level: usize) -> Result<KernelParams> {
    let pick = |same_level: bool| -> Vec<Vec<f64>> {
        fit.curves
            .iter()
            .filter(|c| !same_level || c.curve.level == level)
            .filter_map(|c| c.kernel.as_ref().map(KernelParams::to_vec))
            .collect()
    };
    let mut kernels = pick(true);
    if kernels.is_empty() {
        kernels = pick(false);
    }
    let first = kernels.first().ok_or_else(|| Error::Fit("fit has no kernel parameters".into()))?;
    let n = kernels.len() as f64;
    let mean: Vec<f64> = (0..first.len())
        .map(|j| (kernels.iter().map(|k| k[j].max(f64::MIN_POSITIVE).ln()).sum::<f64>() / n).exp())
        .collect();
    KernelParams::from_slice(&mean)
}

/// Predicts fitted curve `curve` at `t_star`. `u_star` defaults to the
/// dataset's covariate rule evaluated at `t_star`.
pub fn predict(fit: &ModelFit, curve: &str, t_star: f64, u_star: Option<&[f64]>) -> Result<PredictionResult> {
    CurvePredictor::fitted(fit, curve)?.predict(t_star, u_star)
}

/// Predicts a curve of `level` that was not part of the fit: the random
/// effect is at its prior, so the mean is the mean structure alone.
pub fn predict_unseen(fit: &ModelFit, level: usize, t_star: f64, u_star: Option<&[f64]>) -> Result<PredictionResult> {
    CurvePredictor::unseen(fit, level)?.predict(t_star, u_star)
}

/// [`predict`] over many query points, factorizing the curve once.
/// `u_stars` has one row per query, or is `None` to use the covariate rule.
pub fn predict_batch(
    fit: &ModelFit,
    curve: &str,
    t_stars: &[f64],
    u_stars: Option<&DMatrix<f64>>,
) -> Result<Vec<PredictionResult>> {
    if let Some(u) = u_stars {
        if u.nrows() != t_stars.len() {
            return Err(Error::Dimension {
                expected: t_stars.len(),
                found: u.nrows(),
            });
        }
    }
    let predictor = CurvePredictor::fitted(fit, curve)?;
    t_stars
        .par_iter()
        .enumerate()
        .map(|(q, &t)| {
            let row: Option<Vec<f64>> = u_stars.map(|u| u.row(q).iter().copied().collect());
            predictor.predict(t, row.as_deref())
        })
        .collect()
}
