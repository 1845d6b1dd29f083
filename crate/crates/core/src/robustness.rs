//! Robustness diagnostics: how the scores react to one contaminated
//! observation, and the `log|I + K/σ²|` term that governs the predictive
//! regret of a Gaussian-process prior.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::Uniform;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimation::{fit, gradient, FitConfig, Method, ModelFit, ModelState};
use crate::etp::Likelihood;
use crate::kernels::{kernel_matrix, KernelParams};
use crate::linalg::chol_logdet;
use crate::simulation::replicate_rng;

/// Score norms of the Student-t model and its Gaussian counterpart as one
/// observation is pushed away by `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundednessProbe {
    pub magnitudes: Vec<f64>,
    pub tp_score_norms: Vec<f64>,
    pub gp_score_norms: Vec<f64>,
    /// Largest Student-t norm over the grid.
    pub tp_sup_estimate: f64,
}

/// Euclidean norm of `(∂/∂B, ∂/∂θ for every curve, ∂/∂σ²)`.
pub fn stacked_score_norm(state: &ModelState, data: &crate::dataset::FunctionalDataset) -> Result<f64> {
    let g = gradient(state, data)?;
    let mut sq = g.coefficients.norm_squared() + g.sigma2 * g.sigma2;
    for k in &g.kernels {
        sq += k.norm_squared();
    }
    Ok(sq.sqrt())
}

fn check_magnitudes(magnitudes: &[f64]) -> Result<()> {
    if magnitudes.is_empty() {
        return Err(Error::Parameter("contamination grid is empty".into()));
    }
    if magnitudes.iter().any(|c| !(c.is_finite() && *c >= 0.0)) || magnitudes.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Parameter("contamination grid must be finite, >= 0 and non-decreasing".into()));
    }
    Ok(())
}

/// Adds each `c` to observation `observation` of `curve` and evaluates the
/// stacked score norms at the fitted parameters, held fixed. The Gaussian
/// counterpart uses the same `B`, kernels and `σ²`.
///
/// `fit` must be a [`Method::Tp`] fit.
pub fn score_boundedness_probe(fit: &ModelFit, curve: &str, observation: usize, magnitudes: &[f64]) -> Result<BoundednessProbe> {
    if fit.method != Method::Tp {
        return Err(Error::Parameter(format!("the probe needs a TP fit, got {}", fit.method)));
    }
    check_magnitudes(magnitudes)?;
    let idx = fit.curve_index(curve).ok_or_else(|| Error::UnknownCurve(curve.to_string()))?;
    let len = fit.curves[idx].curve.len();
    if observation >= len {
        return Err(Error::Parameter(format!("observation {observation} out of range for a curve of length {len}")));
    }
    let data = fit.dataset();
    let tp = fit.state();
    let gp = ModelState {
        method: Method::Gp,
        likelihood: Likelihood::Gaussian { sigma2: fit.sigma2() },
        ..tp.clone()
    };
    let norms: Vec<(f64, f64)> = magnitudes
        .par_iter()
        .map(|&c| {
            let mut d = data.clone();
            d.curves[idx].values[observation] += c;
            Ok((stacked_score_norm(&tp, &d)?, stacked_score_norm(&gp, &d)?))
        })
        .collect::<Result<_>>()?;
    let (tp_score_norms, gp_score_norms): (Vec<f64>, Vec<f64>) = norms.into_iter().unzip();
    Ok(BoundednessProbe {
        magnitudes: magnitudes.to_vec(),
        tp_sup_estimate: tp_score_norms.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        tp_score_norms,
        gp_score_norms,
    })
}

/// Refits both models on data with one observation shifted by each `c` and
/// reports the Frobenius distance of the fitted `B` from the uncontaminated
/// fit, for the Student-t and Gaussian models. Slow: two fits per magnitude.
pub fn refit_influence(
    data: &crate::dataset::FunctionalDataset,
    config: &FitConfig,
    curve: &str,
    observation: usize,
    magnitudes: &[f64],
) -> Result<Vec<(f64, f64, f64)>> {
    check_magnitudes(magnitudes)?;
    let idx = data
        .curves
        .iter()
        .position(|c| c.id == curve)
        .ok_or_else(|| Error::UnknownCurve(curve.to_string()))?;
    let len = data.curves[idx].len();
    if observation >= len {
        return Err(Error::Parameter(format!("observation {observation} out of range for a curve of length {len}")));
    }
    let tp_cfg = FitConfig { method: Method::Tp, ..config.clone() };
    let gp_cfg = FitConfig { method: Method::Gp, ..config.clone() };
    let tp0 = fit(data, &tp_cfg)?.coefficients;
    let gp0 = fit(data, &gp_cfg)?.coefficients;
    magnitudes
        .par_iter()
        .map(|&c| {
            let mut d = data.clone();
            d.curves[idx].values[observation] += c;
            let tp = fit(&d, &tp_cfg)?.coefficients;
            let gp = fit(&d, &gp_cfg)?.coefficients;
            Ok((c, (tp.0 - &tp0.0).norm(), (gp.0 - &gp0.0).norm()))
        })
        .collect()
}

/// `log|I + K/σ²|` via the Cholesky factor of `I + K/σ²`.
pub fn regret_term(k: &DMatrix<f64>, sigma2: f64) -> Result<f64> {
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::Parameter(format!("sigma2 must be > 0, got {sigma2}")));
    }
    if !k.is_square() {
        return Err(Error::Dimension {
            expected: k.nrows(),
            found: k.ncols(),
        });
    }
    let b = DMatrix::identity(k.nrows(), k.nrows()) + k / sigma2;
    let chol = Cholesky::new(b).ok_or_else(|| Error::Numeric("I + K/σ² is not positive definite".into()))?;
    Ok(chol_logdet(&chol))
}

/// Independent uniform covariates on a box.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformCovariates {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl UniformCovariates {
    fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        let dists = self
            .lower
            .iter()
            .zip(&self.upper)
            .map(|(&a, &b)| Uniform::new_inclusive(a, b).map_err(|e| Error::Parameter(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let mut u = DMatrix::zeros(n, dists.len());
        for i in 0..n {
            for (j, d) in dists.iter().enumerate() {
                u[(i, j)] = rng.sample(d);
            }
        }
        Ok(u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegretRow {
    pub n: usize,
    /// Monte-Carlo mean of `log|I + K/σ²|`.
    pub mean_regret: f64,
    /// `mean_regret / n`
    pub ratio: f64,
}

/// Monte-Carlo average of [`regret_term`] over `draws` covariate samples for
/// each `n`, with the per-observation ratio.
pub fn regret_growth_report(
    kernel: &KernelParams,
    law: &UniformCovariates,
    sigma2: f64,
    n_grid: &[usize],
    draws: usize,
    seed: u64,
) -> Result<Vec<RegretRow>> {
    if law.lower.len() != kernel.dim() || law.upper.len() != kernel.dim() {
        return Err(Error::Dimension {
            expected: kernel.dim(),
            found: law.lower.len(),
        });
    }
    if draws == 0 || n_grid.contains(&0) {
        return Err(Error::Parameter("draws and every n must be >= 1".into()));
    }
    n_grid
        .iter()
        .map(|&n| {
            let values: Vec<f64> = (0..draws as u64)
                .into_par_iter()
                .map(|d| {
                    let mut rng = replicate_rng(seed ^ (n as u64).rotate_left(32), d);
                    let u = law.sample(n, &mut rng)?;
                    regret_term(&kernel_matrix(&u, kernel)?, sigma2)
                })
                .collect::<Result<_>>()?;
            let mean_regret = DVector::from_vec(values).mean();
            Ok(RegretRow {
                n,
                mean_regret,
                ratio: mean_regret / n as f64,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn regret_trivial_cases() {
        assert_eq!(regret_term(&DMatrix::zeros(4, 4), 0.7).unwrap(), 0.0);
        let s2 = 0.3;
        let v = regret_term(&(DMatrix::identity(5, 5) * s2), s2).unwrap();
        assert!((v - 5.0 * 2f64.ln()).abs() < 1e-12);
        assert!(regret_term(&DMatrix::zeros(2, 2), 0.0).is_err());
    }

    #[test]
    fn regret_matches_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let a = DMatrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0));
            let k = &a * a.transpose();
            let s2: f64 = rng.random_range(0.05..2.0);
            let eig = SymmetricEigen::new(k.clone()).eigenvalues;
            let oracle: f64 = eig.iter().map(|l: &f64| (1.0 + l.max(0.0) / s2).ln()).sum();
            assert!((regret_term(&k, s2).unwrap() - oracle).abs() < 1e-10);
        }
    }

    #[test]
    fn regret_monotone_in_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let a = DMatrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
            let b = DMatrix::from_fn(5, 2, |_, _| rng.random_range(-1.0..1.0));
            let k = &a * a.transpose();
            let extra = &b * b.transpose();
            assert!(regret_term(&(&k + extra), 0.5).unwrap() >= regret_term(&k, 0.5).unwrap() - 1e-12);
        }
    }

    #[test]
    fn white_noise_kernel_ratio_is_constant() {
        let kp = KernelParams::new(0.4, vec![1e12], vec![0.0]).unwrap();
        let law = UniformCovariates { lower: vec![0.0], upper: vec![1.0] };
        let rows = regret_growth_report(&kp, &law, 0.2, &[5, 10, 20], 10, 3).unwrap();
        for r in rows {
            assert!((r.ratio - 3f64.ln()).abs() < 1e-9, "{r:?}");
        }
    }

    #[test]
    fn scalar_regret() {
        let kp = KernelParams::new(0.5, vec![2.0], vec![0.3]).unwrap();
        let law = UniformCovariates { lower: vec![-1.0], upper: vec![1.0] };
        let rows = regret_growth_report(&kp, &law, 0.25, &[1], 200, 4).unwrap();
        // k(u,u) = 0.5 + 0.3u², averaged over the same draws
        let mut direct = 0.0;
        for d in 0..200 {
            let mut rng = replicate_rng(4 ^ 1u64.rotate_left(32), d);
            let u = law.sample(1, &mut rng).unwrap()[(0, 0)];
            direct += (1.0 + (0.5 + 0.3 * u * u) / 0.25).ln();
        }
        assert!((rows[0].ratio - direct / 200.0).abs() < 1e-12);
    }

    fn small_tp_fit() -> ModelFit {
        use crate::simulation::{default_fit_config, generate, Disturbance, SimConfig, SimModel};
        let cfg = SimConfig::new(SimModel::RandomEffectTp, 11, Disturbance::None, 1, 5);
        let data = generate(&cfg, &mut replicate_rng(5, 0)).unwrap();
        fit(&data.train, &default_fit_config(SimModel::RandomEffectTp)).unwrap()
    }

    #[test]
    fn tp_scores_plateau_gp_scores_grow() {
        let f = small_tp_fit();
        let id = f.curves[0].curve.id.clone();
        let probe = score_boundedness_probe(&f, &id, 3, &[0.0, 1.0, 1e3, 1e6]).unwrap();
        let base = stacked_score_norm(&f.state(), &f.dataset()).unwrap();
        assert!((probe.tp_score_norms[0] - base).abs() <= 1e-12 * (1.0 + base));
        let (tp3, tp6) = (probe.tp_score_norms[2], probe.tp_score_norms[3]);
        assert!((tp6 - tp3).abs() <= 0.05 * tp3, "{probe:?}");
        assert!(probe.gp_score_norms[3] >= 100.0 * probe.gp_score_norms[2], "{probe:?}");
        assert!(probe.tp_sup_estimate.is_finite());
    }

    #[test]
    fn probe_rejects_bad_input() {
        let f = small_tp_fit();
        let id = f.curves[0].curve.id.clone();
        assert!(score_boundedness_probe(&f, "nope", 0, &[1.0]).is_err());
        assert!(score_boundedness_probe(&f, &id, 1000, &[1.0]).is_err());
        assert!(score_boundedness_probe(&f, &id, 0, &[]).is_err());
        assert!(score_boundedness_probe(&f, &id, 0, &[2.0, 1.0]).is_err());
        assert!(score_boundedness_probe(&f, &id, 0, &[-1.0]).is_err());
    }

    #[test]
    fn site_score_is_bounded_by_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let nu = rng.random_range(1.01..20.0);
            let s2 = rng.random_range(0.01..5.0);
            let lik = Likelihood::StudentT(crate::etp::EtpParams::new(nu, s2).unwrap());
            // g1 = (1+2ν)S/(c+S²) peaks at S = √c with value (1+2ν)/(2√c)
            let c = 2.0 * (nu - 1.0) * s2;
            let bound = (1.0 + 2.0 * nu) / (2.0 * c.sqrt());
            for s in [-1e6, -3.0, -0.1, 0.0, 0.2, 1.0, 1e3, c.sqrt()] {
                assert!(lik.g_derivs(s).0.abs() <= bound * (1.0 + 1e-12));
            }
        }
    }
}
