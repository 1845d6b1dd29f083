//! Box-constrained BFGS ascent used by the model fit.
//!
//! The objective is evaluated together with its gradient. Steps that leave
//! the box are clipped, and coordinates pinned at a bound with the gradient
//! pointing outward are frozen for that step.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    /// Number of outer iterations; each runs up to `steps_per_iteration` steps.
    pub max_outer: usize,
    pub steps_per_iteration: usize,
    /// Relative tolerance on the objective change over one outer iteration.
    pub tol_obj: f64,
    /// Largest ∞-norm of a single step.
    pub max_step: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_outer: 50,
            steps_per_iteration: 5,
            tol_obj: 1e-6,
            max_step: 1.0,
            armijo: 1e-4,
            max_backtracks: 30,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsReport {
    pub x: DVector<f64>,
    pub value: f64,
    pub gradient: DVector<f64>,
    /// Objective at the start and after every outer iteration.
    pub trace: Vec<f64>,
    pub converged: bool,
    pub steps: usize,
    pub evaluations: usize,
}

/// Lower and upper bounds per coordinate (infinite for free coordinates).
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl Bounds {
    pub fn free(n: usize) -> Self {
        Bounds {
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
        }
    }

    fn clip(&self, x: &mut DVector<f64>) {
        for i in 0..x.len() {
            x[i] = x[i].clamp(self.lower[i], self.upper[i]);
        }
    }

    /// Gradient with components that would push past an active bound removed.
    fn project(&self, x: &DVector<f64>, g: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(g.len(), |i, _| {
            if (x[i] <= self.lower[i] && g[i] < 0.0) || (x[i] >= self.upper[i] && g[i] > 0.0) {
                0.0
            } else {
                g[i]
            }
        })
    }
}

/// Maximizes `f`, which returns `(value, gradient)`.
///
/// Evaluation errors at trial points are treated as `-∞` and trigger
/// backtracking; an error at `x0` is returned.
pub fn maximize<F>(mut f: F, x0: DVector<f64>, bounds: &Bounds, opts: &BfgsOptions) -> Result<BfgsReport>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let n = x0.len();
    if bounds.lower.len() != n || bounds.upper.len() != n {
        return Err(Error::Dimension {
            expected: n,
            found: bounds.lower.len(),
        });
    }
    let mut x = x0;
    bounds.clip(&mut x);
    let (mut value, mut grad) = f(&x)?;
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("objective is not finite at the starting point".into()));
    }
    let mut evaluations = 1;
    let mut steps = 0;
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut scaled = false;
    let mut trace = vec![value];
    let mut converged = false;

    'outer: for _ in 0..opts.max_outer {
        let block_start = value;
        for _ in 0..opts.steps_per_iteration {
            let pg = bounds.project(&x, &grad);
            if pg.amax() == 0.0 {
                converged = true;
                trace.push(value);
                break 'outer;
            }
            let mut reset = false;
            let attempt = loop {
                let mut dir = &h * &pg;
                dir = bounds.project(&x, &dir);
                if pg.dot(&dir) <= 0.0 {
                    dir = pg.clone();
                }
                let norm = dir.amax();
                if norm > opts.max_step {
                    dir *= opts.max_step / norm;
                }
                let mut alpha = 1.0;
                let mut found = None;
                for _ in 0..opts.max_backtracks {
                    let mut cand = &x + &dir * alpha;
                    bounds.clip(&mut cand);
                    evaluations += 1;
                    if let Ok((v, g)) = f(&cand) {
                        let required = opts.armijo * (&cand - &x).dot(&grad).max(0.0);
                        if v.is_finite() && g.iter().all(|c| c.is_finite()) && v >= value + required && v > value {
                            found = Some((cand, v, g));
                            break;
                        }
                    }
                    alpha *= 0.5;
                }
                match found {
                    Some(step) => break Some(step),
                    None if !reset => {
                        h = DMatrix::identity(n, n);
                        scaled = false;
                        reset = true;
                    }
                    None => break None,
                }
            };
            let Some((x_new, v_new, g_new)) = attempt else {
                // No ascent along the projected gradient: numerically stationary.
                converged = true;
                trace.push(value);
                break 'outer;
            };
            steps += 1;
            // Curvature pair for the minimization of -f.
            let s = &x_new - &x;
            let y = &grad - &g_new;
            let sy = s.dot(&y);
            if sy > 1e-12 * s.norm() * y.norm() {
                if !scaled {
                    h *= sy / y.norm_squared();
                    scaled = true;
                }
                let rho = 1.0 / sy;
                let hy = &h * &y;
                let yhy = y.dot(&hy);
                h += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
            }
            x = x_new;
            value = v_new;
            grad = g_new;
        }
        trace.push(value);
        if (value - block_start).abs() < opts.tol_obj * (1.0 + value.abs()) {
            converged = true;
            break;
        }
    }

    Ok(BfgsReport {
        x,
        value,
        gradient: grad,
        trace,
        converged,
        steps,
        evaluations,
    })
}
