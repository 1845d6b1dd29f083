#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::Rng;
use tpanova::bspline::{BSplineBasis, CoefficientMatrix};
use tpanova::dataset::{CovariateRule, Curve, FunctionalDataset};
use tpanova::estimation::{penalized_loglik, Method, ModelState};
use tpanova::etp::{EtpParams, Likelihood};
use tpanova::gauss_approx::ModeOptions;
use tpanova::kernels::KernelParams;

/// Small random problem on `[0, 1]` with `p = 1` covariates `u = t / 2`.
pub fn random_problem<R: Rng>(rng: &mut R, levels: usize, per_level: usize, n: usize, method: Method) -> (ModelState, FunctionalDataset) {
    let mut curves = Vec::new();
    for i in 1..=levels {
        for j in 1..=per_level {
            let times: Vec<f64> = (0..n).map(|k| (k as f64 + rng.random_range(0.1..0.9)) / n as f64).collect();
            let values = times.iter().map(|t| (3.0 * t).sin() + rng.random_range(-0.8..0.8)).collect();
            let cov = DMatrix::from_fn(n, 1, |k, _| 0.5 * times[k]);
            curves.push(Curve::new(format!("c{i}_{j}"), i, j, times, values, cov).unwrap());
        }
    }
    let labels = (1..=levels).map(|i| format!("L{i}")).collect();
    let data = FunctionalDataset::new(curves, labels, CovariateRule::Time { scale: 0.5 }).unwrap();
    let kernels = if method.has_random_effect() {
        (0..data.curves.len())
            .map(|_| KernelParams::new(rng.random_range(0.2..1.0), vec![rng.random_range(0.5..5.0)], vec![rng.random_range(0.05..0.5)]).unwrap())
            .collect()
    } else {
        Vec::new()
    };
    let sigma2 = rng.random_range(0.05..0.5);
    let likelihood = match method {
        Method::Gp => Likelihood::Gaussian { sigma2 },
        _ => Likelihood::StudentT(EtpParams::new(rng.random_range(1.2..5.0), sigma2).unwrap()),
    };
    let state = ModelState {
        method,
        basis: BSplineBasis::uniform(4, 4, (0.0, 1.0)).unwrap(),
        lambda: rng.random_range(0.0..0.1),
        coefficients: CoefficientMatrix(DMatrix::from_fn(4, levels + 1, |_, _| rng.random_range(-0.5..0.5))),
        kernels,
        likelihood,
        mode: ModeOptions {
            tol: 1e-13,
            max_iter: 2000,
            max_halvings: 40,
        },
    };
    (state, data)
}

/// `|analytic - fd| <= 1e-5 * max(1, |fd|)`
pub fn fd_close(analytic: f64, fd: f64) -> bool {
    (analytic - fd).abs() <= 1e-5 * fd.abs().max(1.0)
}

/// Central difference of the penalized log-likelihood along `perturb`.
pub fn central<F: Fn(&mut ModelState, f64)>(state: &ModelState, data: &FunctionalDataset, h: f64, perturb: F) -> f64 {
    let mut plus = state.clone();
    perturb(&mut plus, h);
    let mut minus = state.clone();
    perturb(&mut minus, -h);
    (penalized_loglik(&plus, data).unwrap() - penalized_loglik(&minus, data).unwrap()) / (2.0 * h)
}

/// Adaptive Simpson on `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 60)
}

/// `∫ f` over the real line through `x = tan φ`.
pub fn integrate_real_line(f: &dyn Fn(f64) -> f64) -> f64 {
    let g = |phi: f64| {
        let c = phi.cos();
        f(phi.tan()) / (c * c)
    };
    let half = std::f64::consts::FRAC_PI_2;
    adaptive_simpson(&g, -half + 1e-12, half - 1e-12, 1e-13)
}
