//! Penalized marginal likelihood of the functional ANOVA model, its analytic
//! gradient, and the quasi-Newton fit.
//!
//! For curve `c` at level `i` the site means are `m = Φ(t)ᵀ(B₀ + B_i)`. With
//! a random effect the curve contributes the Laplace-approximated marginal of
//! [`LatentPosterior::log_marginal`]; without one it contributes the sum of
//! site log-densities at `τ = 0`. The roughness penalty `λ tr(BᵀL_ΦΦB)` is
//! subtracted, so larger is better throughout.
//!
//! Gradients are total derivatives of that approximate marginal: the explicit
//! terms with the mode held fixed plus the change of the log-determinant
//! through the mode itself, obtained by implicit differentiation of
//! `g'(τ̂) = K⁻¹τ̂`. They match finite differences of [`penalized_loglik`].

use std::cmp::Ordering;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bspline::{penalty_matrix, penalty_value, BSplineBasis, CoefficientMatrix, DerivativeOperator, Quadrature};
use crate::dataset::{CovariateRule, Curve, FunctionalDataset};
use crate::error::{Error, Result};
use crate::etp::{EtpParams, Likelihood};
use crate::gauss_approx::{find_mode, LatentPosterior, ModeOptions, CURVATURE_FLOOR};
use crate::kernels::{jittered_kernel_grad, jittered_kernel_matrix, KernelParams};
use crate::optim::{maximize, BfgsOptions, Bounds};

/// Version tag written into fit files.
pub const FIT_FILE_VERSION: u32 = 1;

/// Which observation model and random-effect structure to fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Student-t errors with a Gaussian-process random effect per curve.
    Tp,
    /// Gaussian errors with a Gaussian-process random effect per curve.
    Gp,
    /// Student-t errors and no random effect.
    TpNoRandomEffect,
}

impl Method {
    pub fn has_random_effect(self) -> bool {
        !matches!(self, Method::TpNoRandomEffect)
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::Tp => "TP",
            Method::Gp => "GP",
            Method::TpNoRandomEffect => "TP(tau=0)",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Degrees-of-freedom handling for the Student-t methods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NuSetting {
    Fixed { value: f64 },
    Estimate { initial: f64 },
}

impl NuSetting {
    fn initial(self) -> f64 {
        match self {
            NuSetting::Fixed { value } => value,
            NuSetting::Estimate { initial } => initial,
        }
    }
}

/// Range `ν` is confined to when estimated.
pub const NU_RANGE: (f64, f64) = (1.01, 100.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BasisConfig {
    pub order: usize,
    /// Number of basis functions; `max(min(n/2, 15), order)` for the longest
    /// curve length `n` when absent.
    pub n_basis: Option<usize>,
    /// Defaults to the observed time range.
    pub domain: Option<(f64, f64)>,
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig {
            order: 4,
            n_basis: None,
            domain: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub method: Method,
    pub basis: BasisConfig,
    pub lambda: f64,
    /// When set, `λ` is chosen from this grid by 5-fold curve-wise
    /// cross-validated prediction error.
    pub lambda_grid: Option<Vec<f64>>,
    pub nu: NuSetting,
    pub tol_obj: f64,
    pub outer_max: usize,
    /// Quasi-Newton steps per outer iteration.
    pub steps_per_outer: usize,
    pub mode_tol: f64,
    pub mode_max_iter: usize,
    /// Shares one set of kernel parameters among the curves of each level.
    pub tie_kernels: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            method: Method::Tp,
            basis: BasisConfig::default(),
            lambda: 1e-2,
            lambda_grid: None,
            nu: NuSetting::Estimate { initial: 3.0 },
            tol_obj: 1e-6,
            outer_max: 50,
            steps_per_outer: 10,
            mode_tol: 1e-8,
            mode_max_iter: 100,
            tie_kernels: false,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Parameter(format!("{name} must be > 0, got {v}")))
            }
        };
        positive("tol_obj", self.tol_obj)?;
        positive("mode_tol", self.mode_tol)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Parameter(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if let Some(grid) = &self.lambda_grid {
            if grid.is_empty() || grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
                return Err(Error::Parameter("lambda grid must be non-empty and >= 0".into()));
            }
        }
        if self.outer_max == 0 || self.steps_per_outer == 0 || self.mode_max_iter == 0 {
            return Err(Error::Parameter("iteration limits must be >= 1".into()));
        }
        if self.basis.order < 4 {
            return Err(Error::Parameter(format!("basis order must be >= 4, got {}", self.basis.order)));
        }
        let nu = self.nu.initial();
        if !(nu > 1.0 && nu.is_finite()) {
            return Err(Error::Parameter(format!("nu must be > 1, got {nu}")));
        }
        if let NuSetting::Estimate { initial } = self.nu {
            if !(initial > NU_RANGE.0 && initial < NU_RANGE.1) {
                return Err(Error::Parameter(format!(
                    "initial nu must lie in ({}, {}), got {initial}",
                    NU_RANGE.0, NU_RANGE.1
                )));
            }
        }
        Ok(())
    }

    fn mode_options(&self) -> ModeOptions {
        ModeOptions {
            tol: self.mode_tol,
            max_iter: self.mode_max_iter,
            ..ModeOptions::default()
        }
    }
}

/// Every parameter the penalized likelihood depends on. `kernels[c]` belongs
/// to curve `c` of the dataset it is evaluated against.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub method: Method,
    pub basis: BSplineBasis,
    pub lambda: f64,
    pub coefficients: CoefficientMatrix,
    pub kernels: Vec<KernelParams>,
    pub likelihood: Likelihood,
    pub mode: ModeOptions,
}

/// Gradient of [`penalized_loglik`] in the natural parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    /// `∂/∂B`, same shape as the coefficient matrix.
    pub coefficients: DMatrix<f64>,
    /// Per curve, ordered `(θ₀, θ_1..θ_p, η_1..η_p)`. Empty without a random effect.
    pub kernels: Vec<DVector<f64>>,
    pub sigma2: f64,
    /// Zero for the Gaussian likelihood.
    pub nu: f64,
}

/// `B` with the level columns centred: `ᾱ` is moved into the mean column so
/// the level effects sum to zero while every `μ + α_i` is unchanged.
pub fn project_identifiable(b: &CoefficientMatrix) -> CoefficientMatrix {
    let levels = b.levels();
    let mut out = b.0.clone();
    if levels == 0 {
        return CoefficientMatrix(out);
    }
    let mean = b.0.columns(1, levels).column_sum() / levels as f64;
    out.column_mut(0).axpy(1.0, &mean, 1.0);
    for i in 1..=levels {
        out.column_mut(i).axpy(-1.0, &mean, 1.0);
    }
    CoefficientMatrix(out)
}

struct Problem<'a> {
    data: &'a FunctionalDataset,
    method: Method,
    designs: Vec<DMatrix<f64>>,
    penalty: DMatrix<f64>,
    lambda: f64,
    mode: ModeOptions,
}

impl<'a> Problem<'a> {
    fn new(data: &'a FunctionalDataset, method: Method, basis: &BSplineBasis, lambda: f64, mode: ModeOptions) -> Result<Self> {
        data.validate()?;
        let designs = data
            .curves
            .iter()
            .map(|c| basis.design_matrix(&c.times))
            .collect::<Result<Vec<_>>>()?;
        let penalty = penalty_matrix(basis, &DerivativeOperator::second_derivative(), Quadrature::Exact)?;
        Ok(Problem {
            data,
            method,
            designs,
            penalty,
            lambda,
            mode,
        })
    }

    fn check(&self, b: &CoefficientMatrix, kernels: &[KernelParams], lik: &Likelihood) -> Result<()> {
        lik.validate()?;
        let basis_len = self.penalty.nrows();
        if b.n_basis() != basis_len || b.levels() != self.data.levels() {
            return Err(Error::Dimension {
                expected: basis_len * (self.data.levels() + 1),
                found: b.0.len(),
            });
        }
        if self.method.has_random_effect() {
            if kernels.len() != self.data.curves.len() {
                return Err(Error::Dimension {
                    expected: self.data.curves.len(),
                    found: kernels.len(),
                });
            }
            for kp in kernels {
                kp.validate()?;
            }
        }
        match (self.method, lik) {
            (Method::Gp, Likelihood::Gaussian { .. }) => Ok(()),
            (Method::Tp | Method::TpNoRandomEffect, Likelihood::StudentT(_)) => Ok(()),
            _ => Err(Error::Parameter(format!("likelihood does not match method {}", self.method))),
        }
    }
}

struct CurveTerms {
    value: f64,
    grad_mean: DVector<f64>,
    grad_kernel: DVector<f64>,
    grad_sigma2: f64,
    grad_nu: f64,
    posterior: Option<LatentPosterior>,
}

fn curve_means(design: &DMatrix<f64>, b: &CoefficientMatrix, level: usize) -> DVector<f64> {
    let coef = b.0.column(0) + b.0.column(level);
    design * coef
}

fn curve_terms(
    curve: &Curve,
    design: &DMatrix<f64>,
    b: &CoefficientMatrix,
    kernel: Option<&KernelParams>,
    lik: &Likelihood,
    mode: &ModeOptions,
    want_grad: bool,
) -> Result<CurveTerms> {
    let y = DVector::from_column_slice(&curve.values);
    let m = curve_means(design, b, curve.level);
    let n = y.len();

    let Some(kp) = kernel else {
        let mut terms = CurveTerms {
            value: 0.0,
            grad_mean: DVector::zeros(n),
            grad_kernel: DVector::zeros(0),
            grad_sigma2: 0.0,
            grad_nu: 0.0,
            posterior: None,
        };
        for k in 0..n {
            let st = lik.site_terms(y[k] - m[k]);
            terms.value += st.log_density;
            terms.grad_mean[k] = st.g1;
            terms.grad_sigma2 += st.dlog_dsigma2;
            terms.grad_nu += st.dlog_dnu;
        }
        return Ok(terms);
    };

    let k = jittered_kernel_matrix(&curve.covariates, kp)?;
    let post = find_mode(&y, &m, &k, lik, mode)?;
    let value = post.log_marginal();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("marginal of curve `{}` is not finite", curve.id)));
    }
    let mut terms = CurveTerms {
        value,
        grad_mean: DVector::zeros(n),
        grad_kernel: DVector::zeros(kp.n_params()),
        grad_sigma2: 0.0,
        grad_nu: 0.0,
        posterior: None,
    };
    if !want_grad {
        terms.posterior = Some(post);
        return Ok(terms);
    }

    let sites: Vec<_> = post.site_residuals().iter().map(|&s| lik.site_terms(s)).collect();
    let active: Vec<bool> = post.raw_curvature.iter().map(|&d| d >= CURVATURE_FLOOR).collect();
    let omega_diag = post.covariance_diagonal();
    let r = post.r_matrix();

    // Sensitivity of -½ log|I + KD| to the mode.
    let v = DVector::from_fn(n, |i, _| if active[i] { -0.5 * omega_diag[i] * sites[i].dd_dtau } else { 0.0 });
    // dτ̂/dφ = (K⁻¹ + W)⁻¹ ∂G/∂φ with W = -g'' unfloored; w = (I + WK)⁻¹ v, z = K w.
    let (w, z) = if v.iter().all(|x| *x == 0.0) {
        (DVector::zeros(n), DVector::zeros(n))
    } else {
        let wmat = DMatrix::from_fn(n, n, |i, j| post.raw_curvature[i] * k[(i, j)]) + DMatrix::identity(n, n);
        let w = wmat
            .lu()
            .solve(&v)
            .ok_or_else(|| Error::Numeric("mode sensitivity system is singular".into()))?;
        let z = &k * &w;
        (w, z)
    };

    for i in 0..n {
        let st = &sites[i];
        terms.grad_mean[i] = st.g1 + v[i] + st.g2 * z[i];
        terms.grad_sigma2 += st.dlog_dsigma2 + st.dg1_dsigma2 * z[i];
        terms.grad_nu += st.dlog_dnu + st.dg1_dnu * z[i];
        if active[i] {
            terms.grad_sigma2 -= 0.5 * omega_diag[i] * st.dd_dsigma2;
            terms.grad_nu -= 0.5 * omega_diag[i] * st.dd_dnu;
        }
    }

    let a = &post.weights;
    for (j, kg) in jittered_kernel_grad(&curve.covariates, kp)?.iter().enumerate() {
        let kga = kg * a;
        let trace_rk = r.component_mul(kg).sum();
        terms.grad_kernel[j] = 0.5 * a.dot(&kga) - 0.5 * trace_rk + w.dot(&kga);
    }
    terms.posterior = Some(post);
    Ok(terms)
}

struct Evaluation {
    value: f64,
    posteriors: Vec<Option<LatentPosterior>>,
    gradient: Option<Gradient>,
}

fn evaluate(problem: &Problem, b: &CoefficientMatrix, kernels: &[KernelParams], lik: &Likelihood, want_grad: bool) -> Result<Evaluation> {
    problem.check(b, kernels, lik)?;
    let per_curve: Vec<CurveTerms> = problem
        .data
        .curves
        .par_iter()
        .enumerate()
        .map(|(c, curve)| {
            let kernel = problem.method.has_random_effect().then(|| &kernels[c]);
            curve_terms(curve, &problem.designs[c], b, kernel, lik, &problem.mode, want_grad)
        })
        .collect::<Result<_>>()?;

    let pen = penalty_value(b, &problem.penalty, problem.lambda)?;
    let value = per_curve.iter().map(|t| t.value).sum::<f64>() - pen;

    let gradient = want_grad.then(|| {
        let mut gb = -2.0 * problem.lambda * (&problem.penalty * &b.0);
        for ((curve, design), t) in problem.data.curves.iter().zip(&problem.designs).zip(&per_curve) {
            let g = design.tr_mul(&t.grad_mean);
            gb.column_mut(0).axpy(1.0, &g, 1.0);
            gb.column_mut(curve.level).axpy(1.0, &g, 1.0);
        }
        let is_t = matches!(lik, Likelihood::StudentT(_));
        Gradient {
            coefficients: gb,
            kernels: if problem.method.has_random_effect() {
                per_curve.iter().map(|t| t.grad_kernel.clone()).collect()
            } else {
                Vec::new()
            },
            sigma2: per_curve.iter().map(|t| t.grad_sigma2).sum(),
            nu: if is_t { per_curve.iter().map(|t| t.grad_nu).sum() } else { 0.0 },
        }
    });

    Ok(Evaluation {
        value,
        posteriors: per_curve.into_iter().map(|t| t.posterior).collect(),
        gradient,
    })
}

fn state_problem<'a>(state: &ModelState, data: &'a FunctionalDataset) -> Result<Problem<'a>> {
    Problem::new(data, state.method, &state.basis, state.lambda, state.mode)
}

/// Sum of per-curve approximate marginals minus `λ tr(BᵀL_ΦΦB)`.
pub fn penalized_loglik(state: &ModelState, data: &FunctionalDataset) -> Result<f64> {
    let p = state_problem(state, data)?;
    Ok(evaluate(&p, &state.coefficients, &state.kernels, &state.likelihood, false)?.value)
}

/// Full analytic gradient of [`penalized_loglik`].
pub fn gradient(state: &ModelState, data: &FunctionalDataset) -> Result<Gradient> {
    let p = state_problem(state, data)?;
    let eval = evaluate(&p, &state.coefficients, &state.kernels, &state.likelihood, true)?;
    Ok(eval.gradient.expect("gradient requested"))
}

/// `∂/∂B` of [`penalized_loglik`], shaped like `B`.
pub fn score_b(state: &ModelState, data: &FunctionalDataset) -> Result<DMatrix<f64>> {
    Ok(gradient(state, data)?.coefficients)
}

/// `∂/∂(θ₀, θ, η)` of [`penalized_loglik`] for curve index `curve`.
pub fn score_theta(state: &ModelState, data: &FunctionalDataset, curve: usize) -> Result<DVector<f64>> {
    if curve >= data.curves.len() {
        return Err(Error::Index {
            index: curve,
            max: data.curves.len().saturating_sub(1),
        });
    }
    if !state.method.has_random_effect() {
        return Err(Error::Parameter("the model has no kernel hyperparameters".into()));
    }
    let p = state_problem(state, data)?;
    let b = &state.coefficients;
    let c = &data.curves[curve];
    let terms = curve_terms(c, &p.designs[curve], b, Some(&state.kernels[curve]), &state.likelihood, &state.mode, true)?;
    Ok(terms.grad_kernel)
}

pub fn score_sigma2(state: &ModelState, data: &FunctionalDataset) -> Result<f64> {
    Ok(gradient(state, data)?.sigma2)
}

pub fn score_nu(state: &ModelState, data: &FunctionalDataset) -> Result<f64> {
    Ok(gradient(state, data)?.nu)
}

/// Fitted curve with its kernel hyperparameters and latent posterior.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveFit {
    pub curve: Curve,
    pub kernel: Option<KernelParams>,
    #[serde(skip)]
    pub posterior: Option<LatentPosterior>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFit {
    pub method: Method,
    pub basis: BSplineBasis,
    pub coefficients: CoefficientMatrix,
    pub lambda: f64,
    pub likelihood: Likelihood,
    pub level_labels: Vec<String>,
    pub covariate_rule: CovariateRule,
    /// Training curves in canonical order `(level, replicate, id)`.
    pub curves: Vec<CurveFit>,
    pub objective: f64,
    /// Objective at the start and after each outer iteration.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub outer_iterations: usize,
    pub evaluations: usize,
    pub config: FitConfig,
}

#[derive(Serialize, Deserialize)]
struct FitFile {
    version: u32,
    #[serde(flatten)]
    fit: ModelFit,
}

impl ModelFit {
    pub fn dataset(&self) -> FunctionalDataset {
        FunctionalDataset {
            curves: self.curves.iter().map(|c| c.curve.clone()).collect(),
            level_labels: self.level_labels.clone(),
            covariate_rule: self.covariate_rule,
        }
    }

    pub fn state(&self) -> ModelState {
        ModelState {
            method: self.method,
            basis: self.basis.clone(),
            lambda: self.lambda,
            coefficients: self.coefficients.clone(),
            kernels: self.curves.iter().filter_map(|c| c.kernel.clone()).collect(),
            likelihood: self.likelihood,
            mode: self.config.mode_options(),
        }
    }

    /// Wraps fixed parameters as a fit of `data` (no optimization), with the
    /// latent posteriors computed at those parameters.
    pub fn from_state(state: &ModelState, data: &FunctionalDataset) -> Result<Self> {
        let p = state_problem(state, data)?;
        let eval = evaluate(&p, &state.coefficients, &state.kernels, &state.likelihood, false)?;
        let curves = data
            .curves
            .iter()
            .enumerate()
            .zip(eval.posteriors)
            .map(|((c, curve), posterior)| CurveFit {
                curve: curve.clone(),
                kernel: state.method.has_random_effect().then(|| state.kernels[c].clone()),
                posterior,
            })
            .collect();
        let config = FitConfig {
            method: state.method,
            lambda: state.lambda,
            mode_tol: state.mode.tol,
            mode_max_iter: state.mode.max_iter,
            basis: BasisConfig {
                order: state.basis.order(),
                n_basis: Some(state.basis.len()),
                domain: Some(state.basis.domain()),
            },
            nu: match state.likelihood.nu() {
                Some(value) => NuSetting::Fixed { value },
                None => FitConfig::default().nu,
            },
            ..FitConfig::default()
        };
        Ok(ModelFit {
            method: state.method,
            basis: state.basis.clone(),
            coefficients: state.coefficients.clone(),
            lambda: state.lambda,
            likelihood: state.likelihood,
            level_labels: data.level_labels.clone(),
            covariate_rule: data.covariate_rule,
            curves,
            objective: eval.value,
            objective_trace: vec![eval.value],
            converged: false,
            outer_iterations: 0,
            evaluations: 1,
            config,
        })
    }

    pub fn curve_index(&self, id: &str) -> Option<usize> {
        self.curves.iter().position(|c| c.curve.id == id)
    }

    pub fn sigma2(&self) -> f64 {
        self.likelihood.sigma2()
    }

    pub fn nu(&self) -> Option<f64> {
        self.likelihood.nu()
    }

    /// Recomputes the latent posteriors from the stored parameters.
    pub fn refresh_posteriors(&mut self) -> Result<()> {
        let data = self.dataset();
        let state = self.state();
        let p = state_problem(&state, &data)?;
        let eval = evaluate(&p, &state.coefficients, &state.kernels, &state.likelihood, false)?;
        for (cf, post) in self.curves.iter_mut().zip(eval.posteriors) {
            cf.posterior = post;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&FitFile {
            version: FIT_FILE_VERSION,
            fit: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let found = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != FIT_FILE_VERSION {
            return Err(Error::Version {
                found,
                expected: FIT_FILE_VERSION,
            });
        }
        let file: FitFile = serde_json::from_value(raw)?;
        let mut fit = file.fit;
        fit.refresh_posteriors()?;
        Ok(fit)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Sorts curves by `(level, replicate, id)` so fits do not depend on input order.
fn canonical(data: &FunctionalDataset) -> FunctionalDataset {
    let mut out = data.clone();
    out.curves.sort_by(|a, b| {
        a.level
            .cmp(&b.level)
            .then(a.replicate.cmp(&b.replicate))
            .then_with(|| a.id.cmp(&b.id))
    });
    out
}

fn build_basis(data: &FunctionalDataset, cfg: &BasisConfig) -> Result<BSplineBasis> {
    let n = data.curves.iter().map(Curve::len).max().unwrap_or(0);
    let n_basis = cfg.n_basis.unwrap_or_else(|| (n / 2).min(15).max(cfg.order));
    let domain = match cfg.domain {
        Some(d) => d,
        None => {
            let (lo, hi) = data.time_range();
            if hi > lo {
                (lo, hi)
            } else {
                (lo - 0.5, hi + 0.5)
            }
        }
    };
    BSplineBasis::uniform(cfg.order, n_basis, domain)
}

/// Maps the reduced coefficients `(μ, α_1..α_{I-1})` to `vec(B)` (column-major)
/// with `α_I = -Σ α_i`; for `I = 1` only `μ` is free.
fn reduction_matrix(n_basis: usize, levels: usize) -> DMatrix<f64> {
    let free_cols = if levels == 1 { 1 } else { levels };
    let mut t = DMatrix::zeros(n_basis * (levels + 1), n_basis * free_cols);
    for l in 0..n_basis {
        t[(l, l)] = 1.0;
        if levels >= 2 {
            for i in 1..levels {
                t[(i * n_basis + l, i * n_basis + l)] = 1.0;
                t[(levels * n_basis + l, i * n_basis + l)] = -1.0;
            }
        }
    }
    t
}

struct Layout {
    n_basis: usize,
    levels: usize,
    reduction: DMatrix<f64>,
    n_coef: usize,
    /// Kernel block used by each curve; blocks are shared when tied.
    kernel_block: Vec<usize>,
    n_blocks: usize,
    n_kernel: usize,
    kernels: bool,
    estimate_nu: bool,
    gaussian: bool,
}

impl Layout {
    fn len(&self) -> usize {
        self.n_coef + if self.kernels { self.n_blocks * self.n_kernel } else { 0 } + 1 + usize::from(self.estimate_nu)
    }

    fn sigma_index(&self) -> usize {
        self.n_coef + if self.kernels { self.n_blocks * self.n_kernel } else { 0 }
    }

    fn unpack(&self, x: &DVector<f64>, fixed_nu: f64) -> Result<(CoefficientMatrix, Vec<KernelParams>, Likelihood)> {
        let full = &self.reduction * x.rows(0, self.n_coef);
        let b = CoefficientMatrix(DMatrix::from_column_slice(self.n_basis, self.levels + 1, full.as_slice()));
        let mut kernels = Vec::new();
        if self.kernels {
            for &blk in &self.kernel_block {
                let start = self.n_coef + blk * self.n_kernel;
                let vals: Vec<f64> = x.rows(start, self.n_kernel).iter().map(|v| v.exp()).collect();
                kernels.push(KernelParams::from_slice(&vals)?);
            }
        }
        let sigma2 = x[self.sigma_index()].exp();
        let lik = if self.gaussian {
            Likelihood::Gaussian { sigma2 }
        } else {
            let nu = if self.estimate_nu { nu_from_raw(x[self.sigma_index() + 1]) } else { fixed_nu };
            Likelihood::StudentT(EtpParams::new(nu, sigma2)?)
        };
        Ok((b, kernels, lik))
    }

    fn pack_gradient(&self, x: &DVector<f64>, g: &Gradient, kernels: &[KernelParams], lik: &Likelihood) -> DVector<f64> {
        let mut out = DVector::zeros(self.len());
        let gb = DVector::from_column_slice(g.coefficients.as_slice());
        out.rows_mut(0, self.n_coef).copy_from(&self.reduction.tr_mul(&gb));
        if self.kernels {
            // Tied curves share a block, so their chain-rule terms add up.
            for ((gk, kp), &blk) in g.kernels.iter().zip(kernels).zip(&self.kernel_block) {
                let start = self.n_coef + blk * self.n_kernel;
                for (j, v) in kp.to_vec().iter().enumerate() {
                    out[start + j] += gk[j] * v;
                }
            }
        }
        let si = self.sigma_index();
        out[si] = g.sigma2 * lik.sigma2();
        if self.estimate_nu {
            let s = logistic(x[si + 1]);
            out[si + 1] = g.nu * (NU_RANGE.1 - NU_RANGE.0) * s * (1.0 - s);
        }
        out
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn nu_from_raw(x: f64) -> f64 {
    NU_RANGE.0 + (NU_RANGE.1 - NU_RANGE.0) * logistic(x)
}

fn nu_to_raw(nu: f64) -> f64 {
    let s = (nu - NU_RANGE.0) / (NU_RANGE.1 - NU_RANGE.0);
    (s / (1.0 - s)).ln()
}

struct Initial {
    reduced: DVector<f64>,
    residual_var: f64,
}

/// Penalized least squares of `y` on the basis with `τ = 0`.
fn initial_coefficients(problem: &Problem, layout: &Layout) -> Result<Initial> {
    let l = layout.n_basis;
    let full_dim = l * (layout.levels + 1);
    let mut xtx = DMatrix::zeros(full_dim, full_dim);
    let mut xty = DVector::zeros(full_dim);
    for (curve, design) in problem.data.curves.iter().zip(&problem.designs) {
        for (k, &y) in curve.values.iter().enumerate() {
            let mut row = DVector::zeros(full_dim);
            for j in 0..l {
                row[j] = design[(k, j)];
                row[curve.level * l + j] = design[(k, j)];
            }
            xtx.ger(1.0, &row, &row, 1.0);
            xty.axpy(y, &row, 1.0);
        }
    }
    for c in 0..=layout.levels {
        let mut block = xtx.view_mut((c * l, c * l), (l, l));
        block += &problem.penalty * problem.lambda.max(1e-8);
    }
    let t = &layout.reduction;
    let mut a = t.tr_mul(&(&xtx * t));
    let scale = a.diagonal().amax().max(1.0);
    for i in 0..a.nrows() {
        a[(i, i)] += 1e-10 * scale;
    }
    let rhs = t.tr_mul(&xty);
    let reduced = a
        .cholesky()
        .ok_or_else(|| Error::Fit("initial least-squares system is singular".into()))?
        .solve(&rhs);

    let full = t * &reduced;
    let b = CoefficientMatrix(DMatrix::from_column_slice(l, layout.levels + 1, full.as_slice()));
    let mut ss = 0.0;
    let mut all = Vec::new();
    for (curve, design) in problem.data.curves.iter().zip(&problem.designs) {
        let m = curve_means(design, &b, curve.level);
        for (k, &y) in curve.values.iter().enumerate() {
            ss += (y - m[k]).powi(2);
            all.push(y);
        }
    }
    let n = all.len() as f64;
    let mean_y = all.iter().sum::<f64>() / n;
    let var_y = all.iter().map(|y| (y - mean_y).powi(2)).sum::<f64>() / n;
    let floor = 1e-6 * var_y.max(1e-12);
    Ok(Initial {
        reduced,
        residual_var: (ss / n).max(floor),
    })
}

fn covariate_scale(data: &FunctionalDataset) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for c in &data.curves {
        s += c.covariates.norm_squared();
        n += c.covariates.len();
    }
    let ms = if n > 0 { s / n as f64 } else { 0.0 };
    if ms > 0.0 {
        ms
    } else {
        1.0
    }
}

fn fit_with_lambda(data: &FunctionalDataset, config: &FitConfig, lambda: f64) -> Result<ModelFit> {
    let basis = build_basis(data, &config.basis)?;
    let problem = Problem::new(data, config.method, &basis, lambda, config.mode_options())?;
    let levels = data.levels();
    let p = data.covariate_dim();
    let gaussian = config.method == Method::Gp;
    let kernel_block: Vec<usize> = if config.tie_kernels {
        data.curves.iter().map(|c| c.level - 1).collect()
    } else {
        (0..data.curves.len()).collect()
    };
    let layout = Layout {
        n_basis: basis.len(),
        levels,
        reduction: reduction_matrix(basis.len(), levels),
        n_coef: basis.len() * if levels == 1 { 1 } else { levels },
        n_blocks: kernel_block.iter().max().map_or(0, |m| m + 1),
        kernel_block,
        n_kernel: 2 * p + 1,
        kernels: config.method.has_random_effect(),
        estimate_nu: !gaussian && matches!(config.nu, NuSetting::Estimate { .. }),
        gaussian,
    };

    let init = initial_coefficients(&problem, &layout)?;
    // Log-parameters live in a box scaled by the residual variance `v` and the
    // mean squared covariate `u2`. At the edges the random effect is negligible,
    // white or constant, so pinning there loses nothing and stops slow drift.
    let v = init.residual_var;
    let u2 = covariate_scale(data);
    let n = layout.len();
    let mut x0 = DVector::zeros(n);
    let mut lower = DVector::from_element(n, f64::NEG_INFINITY);
    let mut upper = DVector::from_element(n, f64::INFINITY);
    x0.rows_mut(0, layout.n_coef).copy_from(&init.reduced);
    if layout.kernels {
        for blk in 0..layout.n_blocks {
            let start = layout.n_coef + blk * layout.n_kernel;
            x0[start] = (0.5 * v).ln();
            lower[start] = (1e-4 * v).ln();
            upper[start] = (1e4 * v).ln();
            for q in 0..p {
                x0[start + 1 + q] = 0.0;
                lower[start + 1 + q] = (1e-4 / u2).ln();
                upper[start + 1 + q] = (1e4 / u2).ln();
                x0[start + 1 + p + q] = 0.1f64.ln();
                lower[start + 1 + p + q] = (1e-6 * v / u2).ln();
                upper[start + 1 + p + q] = (1e4 * v / u2).ln();
            }
            for j in start..start + layout.n_kernel {
                x0[j] = x0[j].clamp(lower[j], upper[j]);
            }
        }
    }
    let si = layout.sigma_index();
    x0[si] = (0.5 * v).ln();
    lower[si] = (1e-6 * v).ln();
    upper[si] = (1e4 * v).ln();
    let fixed_nu = config.nu.initial();
    if layout.estimate_nu {
        x0[si + 1] = nu_to_raw(fixed_nu);
        lower[si + 1] = -30.0;
        upper[si + 1] = 30.0;
    }
    let bounds = Bounds { lower, upper };

    let objective = |x: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        let (b, kernels, lik) = layout.unpack(x, fixed_nu)?;
        let eval = evaluate(&problem, &b, &kernels, &lik, true)?;
        let g = eval.gradient.expect("gradient requested");
        Ok((eval.value, layout.pack_gradient(x, &g, &kernels, &lik)))
    };
    let opts = BfgsOptions {
        max_outer: config.outer_max,
        steps_per_iteration: config.steps_per_outer,
        tol_obj: config.tol_obj,
        ..BfgsOptions::default()
    };
    let report = maximize(objective, x0, &bounds, &opts)?;

    let (b, kernels, lik) = layout.unpack(&report.x, fixed_nu)?;
    let b = project_identifiable(&b);
    let eval = evaluate(&problem, &b, &kernels, &lik, false)?;
    let curves = data
        .curves
        .iter()
        .enumerate()
        .zip(eval.posteriors)
        .map(|((c, curve), post)| CurveFit {
            curve: curve.clone(),
            kernel: layout.kernels.then(|| kernels[c].clone()),
            posterior: post,
        })
        .collect();
    Ok(ModelFit {
        method: config.method,
        basis,
        coefficients: b,
        lambda,
        likelihood: lik,
        level_labels: data.level_labels.clone(),
        covariate_rule: data.covariate_rule,
        curves,
        objective: eval.value,
        objective_trace: report.trace.clone(),
        converged: report.converged,
        outer_iterations: report.trace.len() - 1,
        evaluations: report.evaluations,
        config: config.clone(),
    })
}

/// Fits the model selected by `config.method`.
///
/// A fit that stops at the iteration limit is returned with `converged = false`.
pub fn fit(data: &FunctionalDataset, config: &FitConfig) -> Result<ModelFit> {
    config.validate()?;
    data.validate()?;
    if data.curves.iter().all(|c| c.len() <= 1) {
        return Err(Error::Fit("every curve has a single observation".into()));
    }
    let data = canonical(data);
    let lambda = match &config.lambda_grid {
        Some(grid) => select_lambda(&data, config, grid)?.0,
        None => config.lambda,
    };
    let mut fitted = fit_with_lambda(&data, config, lambda)?;
    fitted.config.lambda = lambda;
    Ok(fitted)
}

/// [`fit`] with the Gaussian likelihood.
pub fn fit_gp_comparator(data: &FunctionalDataset, config: &FitConfig) -> Result<ModelFit> {
    fit(data, &FitConfig { method: Method::Gp, ..config.clone() })
}

/// [`fit`] with the Student-t likelihood and no random effect.
pub fn fit_no_random_effect(data: &FunctionalDataset, config: &FitConfig) -> Result<ModelFit> {
    fit(
        data,
        &FitConfig {
            method: Method::TpNoRandomEffect,
            ..config.clone()
        },
    )
}

/// Chooses `λ` from `grid` by 5-fold curve-wise cross-validation of the
/// mean-structure prediction error `mean |ŷ - y|` on held-out curves.
/// Returns the winner and the score of every grid value.
pub fn select_lambda(data: &FunctionalDataset, config: &FitConfig, grid: &[f64]) -> Result<(f64, Vec<(f64, f64)>)> {
    const FOLDS: usize = 5;
    let data = canonical(data);
    let folds = FOLDS.min(data.curves.len());
    if folds < 2 {
        return Err(Error::Fit("cross-validation needs at least two curves".into()));
    }
    let cfg = FitConfig {
        lambda_grid: None,
        ..config.clone()
    };
    let basis_cfg = BasisConfig {
        domain: Some(cfg.basis.domain.unwrap_or_else(|| data.time_range())),
        n_basis: Some(build_basis(&data, &cfg.basis)?.len()),
        ..cfg.basis.clone()
    };
    let cfg = FitConfig { basis: basis_cfg, ..cfg };
    let mut scores = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let mut abs_err = 0.0;
        let mut count = 0usize;
        for f in 0..folds {
            let (test, train): (Vec<_>, Vec<_>) = data.curves.iter().enumerate().partition(|(i, _)| i % folds == f);
            let train = FunctionalDataset {
                curves: train.into_iter().map(|(_, c)| c.clone()).collect(),
                ..data.clone()
            };
            let fitted = fit_with_lambda(&train, &cfg, lambda)?;
            for (_, curve) in test {
                let design = fitted.basis.design_matrix(&curve.times)?;
                let m = curve_means(&design, &fitted.coefficients, curve.level);
                abs_err += curve.values.iter().zip(m.iter()).map(|(y, mu)| (y - mu).abs()).sum::<f64>();
                count += curve.len();
            }
        }
        scores.push((lambda, abs_err / count as f64));
    }
    let best = scores
        .iter()
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal))
        .map(|s| s.0)
        .expect("grid is non-empty");
    Ok((best, scores))
}
