//! Gaussian approximation of the latent posterior `p(τ | Y)` for one curve.
//!
//! Each site's log-likelihood is expanded to second order around the current
//! iterate, giving site terms `α_k = g'_k + d_k τ_k` and `d_k = -g''_k`. The
//! update solves `(K⁻¹ + D) τ = α` in the form `τ = K (I + DK)⁻¹ α`, working
//! with `B = I + D^{½} K D^{½}` so that `K` is never inverted.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::etp::Likelihood;
use crate::linalg::chol_logdet;

/// Lower bound on `d_k` inside the Newton system and the approximation.
pub const CURVATURE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeOptions {
    /// Stop when the ∞-norm of the step drops below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Step halvings allowed when the joint log-density decreases.
    pub max_halvings: usize,
}

impl Default for ModeOptions {
    fn default() -> Self {
        ModeOptions {
            tol: 1e-8,
            max_iter: 100,
            max_halvings: 20,
        }
    }
}

/// Second-order expansion of one site's log-likelihood around `tau0`.
/// Returns `(α, d)` with `d = -g''(tau0)` (not floored).
pub fn taylor_site(y: f64, m: f64, tau0: f64, lik: &Likelihood) -> Result<(f64, f64)> {
    lik.validate()?;
    let (g1, g2) = lik.g_derivs(y - m - tau0);
    Ok((g1 - g2 * tau0, -g2))
}

/// Gaussian approximation `N(τ̂, (K⁻¹ + D)⁻¹)` of one curve's latent vector.
#[derive(Debug, Clone)]
pub struct LatentPosterior {
    /// Prior covariance (jittered) the approximation was built with.
    pub k: DMatrix<f64>,
    /// `Y - mean`.
    pub residual: DVector<f64>,
    pub mode: DVector<f64>,
    /// `K⁻¹ τ̂`, maintained alongside the mode.
    pub weights: DVector<f64>,
    /// Floored `d_k` at the mode.
    pub curvature: DVector<f64>,
    /// `-g''` at the mode before flooring.
    pub raw_curvature: DVector<f64>,
    pub alpha: DVector<f64>,
    pub likelihood: Likelihood,
    pub converged: bool,
    pub iterations: usize,
    b_chol: Cholesky<f64, Dyn>,
}

struct SiteSystem {
    g1: DVector<f64>,
    raw_d: DVector<f64>,
    d: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
}

fn site_system(k: &DMatrix<f64>, residual: &DVector<f64>, tau: &DVector<f64>, lik: &Likelihood) -> Result<SiteSystem> {
    let n = residual.len();
    let mut g1 = DVector::zeros(n);
    let mut raw_d = DVector::zeros(n);
    for i in 0..n {
        let (a, b) = lik.g_derivs(residual[i] - tau[i]);
        g1[i] = a;
        raw_d[i] = -b;
    }
    let d = raw_d.map(|v| v.max(CURVATURE_FLOOR));
    let sd = d.map(f64::sqrt);
    let mut b = DMatrix::from_fn(n, n, |i, j| sd[i] * k[(i, j)] * sd[j]);
    for i in 0..n {
        b[(i, i)] += 1.0;
    }
    let chol = Cholesky::new(b).ok_or_else(|| Error::Numeric("I + D^½ K D^½ is not positive definite".into()))?;
    Ok(SiteSystem { g1, raw_d, d, chol })
}

fn joint_log_density(residual: &DVector<f64>, tau: &DVector<f64>, weights: &DVector<f64>, lik: &Likelihood) -> f64 {
    let ll: f64 = residual.iter().zip(tau.iter()).map(|(r, t)| lik.log_density(r - t)).sum();
    ll - 0.5 * tau.dot(weights)
}

/// Fisher-scoring search for the mode of `log p(Y, τ)` starting at `τ = 0`.
///
/// Non-convergence is reported through [`LatentPosterior::converged`].
pub fn find_mode(
    y: &DVector<f64>,
    mean: &DVector<f64>,
    k: &DMatrix<f64>,
    lik: &Likelihood,
    opts: &ModeOptions,
) -> Result<LatentPosterior> {
    lik.validate()?;
    let n = y.len();
    if mean.len() != n || k.nrows() != n || k.ncols() != n {
        return Err(Error::Dimension {
            expected: n,
            found: if mean.len() != n { mean.len() } else { k.nrows() },
        });
    }
    let residual = y - mean;
    let mut tau = DVector::zeros(n);
    let mut weights = DVector::zeros(n);
    let mut psi = joint_log_density(&residual, &tau, &weights, lik);
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        let sys = site_system(k, &residual, &tau, lik)?;
        let alpha = &sys.g1 + sys.d.component_mul(&tau);
        let sd = sys.d.map(f64::sqrt);
        let ka = k * &alpha;
        let w = sys.chol.solve(&sd.component_mul(&ka));
        let full_weights = &alpha - sd.component_mul(&w);
        let full_tau = k * &full_weights;

        let dir_tau = &full_tau - &tau;
        let dir_w = &full_weights - &weights;
        let full_step = dir_tau.amax();
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand_tau = &tau + &dir_tau * step;
            let cand_w = &weights + &dir_w * step;
            let cand_psi = joint_log_density(&residual, &cand_tau, &cand_w, lik);
            if cand_psi.is_finite() && cand_psi >= psi - 1e-14 * (1.0 + psi.abs()) {
                accepted = Some((cand_tau, cand_w, cand_psi));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((t, w, p)) => {
                let moved = (&t - &tau).amax();
                tau = t;
                weights = w;
                psi = p;
                if moved < opts.tol {
                    converged = true;
                    break;
                }
            }
            None => {
                converged = full_step < 100.0 * opts.tol;
                break;
            }
        }
    }

    let sys = site_system(k, &residual, &tau, lik)?;
    let alpha = &sys.g1 + sys.d.component_mul(&tau);
    Ok(LatentPosterior {
        k: k.clone(),
        residual,
        mode: tau,
        weights,
        curvature: sys.d,
        raw_curvature: sys.raw_d,
        alpha,
        likelihood: *lik,
        converged,
        iterations,
        b_chol: sys.chol,
    })
}

impl LatentPosterior {
    pub fn len(&self) -> usize {
        self.mode.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mode.is_empty()
    }

    /// Site residuals `S_k = y_k - m_k - τ̂_k`.
    pub fn site_residuals(&self) -> DVector<f64> {
        &self.residual - &self.mode
    }

    /// `g'(τ̂)` per site.
    pub fn score(&self) -> DVector<f64> {
        self.site_residuals().map(|s| self.likelihood.g_derivs(s).0)
    }

    /// `‖g'(τ̂) - K⁻¹τ̂‖_∞`, the gradient of `log p(Y, τ)` at the mode.
    pub fn stationarity_residual(&self) -> f64 {
        (self.score() - &self.weights).amax()
    }

    /// `log |I + D^½ K D^½| = log |I + KD|`.
    pub fn log_det_b(&self) -> f64 {
        chol_logdet(&self.b_chol)
    }

    /// `R = D^½ (I + D^½ K D^½)⁻¹ D^½ = D (I + KD)⁻¹`.
    pub fn r_matrix(&self) -> DMatrix<f64> {
        let sd = self.curvature.map(f64::sqrt);
        let inner = self.b_chol.solve(&DMatrix::from_diagonal(&sd));
        DMatrix::from_fn(self.len(), self.len(), |i, j| sd[i] * inner[(i, j)])
    }

    /// `Ω = (K⁻¹ + D)⁻¹ = K - K R K`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let kr = &self.k * self.r_matrix();
        let omega = &self.k - kr * &self.k;
        0.5 * (&omega + omega.transpose())
    }

    /// Diagonal of `Ω` without forming the full matrix.
    pub fn covariance_diagonal(&self) -> DVector<f64> {
        let sd = self.curvature.map(f64::sqrt);
        let v = DMatrix::from_fn(self.len(), self.len(), |i, j| sd[i] * self.k[(i, j)]);
        let x = self.b_chol.l().solve_lower_triangular(&v).expect("triangular factor is invertible");
        DVector::from_iterator(
            self.len(),
            (0..self.len()).map(|j| self.k[(j, j)] - x.column(j).norm_squared()),
        )
    }

    /// `Σ_k g(τ̂_k) - ½ τ̂ᵀK⁻¹τ̂ - ½ log|I + KD|`.
    pub fn log_marginal(&self) -> f64 {
        joint_log_density(&self.residual, &self.mode, &self.weights, &self.likelihood) - 0.5 * self.log_det_b()
    }
}

/// Approximate `log p(Y | mean, K)` via the Gaussian approximation at the mode.
pub fn approx_marginal_loglik(
    y: &DVector<f64>,
    mean: &DVector<f64>,
    k: &DMatrix<f64>,
    lik: &Likelihood,
    opts: &ModeOptions,
) -> Result<f64> {
    let post = find_mode(y, mean, k, lik, opts)?;
    let v = post.log_marginal();
    if !v.is_finite() {
        return Err(Error::Numeric("approximate marginal is not finite".into()));
    }
    Ok(v)
}

/// `Ω = (K⁻¹ + D)⁻¹` of a converged posterior.
pub fn posterior_covariance(post: &LatentPosterior) -> Result<DMatrix<f64>> {
    let omega = post.covariance();
    if omega.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("posterior covariance is not finite".into()));
    }
    Ok(omega)
}
