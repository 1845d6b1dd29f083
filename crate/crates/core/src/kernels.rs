//! Composite squared-exponential plus non-stationary linear kernel
//!
//! `k(u, v) = θ₀ exp{-½ Σ_q θ_q (u_q - v_q)²} + Σ_q η_q u_q v_q`
//!
//! together with Gram matrices, cross-covariances and hyperparameter
//! derivatives. Hyperparameter order everywhere is `(θ₀, θ_1..θ_p, η_1..η_p)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative diagonal jitter added before factorizing a Gram matrix.
pub const JITTER_REL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub theta0: f64,
    pub theta: Vec<f64>,
    pub eta: Vec<f64>,
}

impl KernelParams {
    pub fn new(theta0: f64, theta: Vec<f64>, eta: Vec<f64>) -> Result<Self> {
        let kp = KernelParams { theta0, theta, eta };
        kp.validate()?;
        Ok(kp)
    }

    /// Same value for every covariate dimension.
    pub fn isotropic(theta0: f64, theta: f64, eta: f64, p: usize) -> Result<Self> {
        Self::new(theta0, vec![theta; p], vec![eta; p])
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    /// Number of hyperparameters, `2p + 1`.
    pub fn n_params(&self) -> usize {
        2 * self.dim() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta.len() != self.eta.len() {
            return Err(Error::Dimension {
                expected: self.theta.len(),
                found: self.eta.len(),
            });
        }
        if !(self.theta0 > 0.0) || !self.theta0.is_finite() {
            return Err(Error::Parameter(format!("theta0 must be > 0, got {}", self.theta0)));
        }
        if self.theta.iter().chain(&self.eta).any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Parameter(
                "theta and eta entries must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Flat vector in hyperparameter order.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        v.push(self.theta0);
        v.extend(&self.theta);
        v.extend(&self.eta);
        v
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        if values.is_empty() || values.len().is_multiple_of(2) {
            return Err(Error::Parameter(format!(
                "kernel parameter vector must have odd length 2p+1, got {}",
                values.len()
            )));
        }
        let p = (values.len() - 1) / 2;
        Self::new(values[0], values[1..=p].to_vec(), values[p + 1..].to_vec())
    }
}

fn check_dim(u: &[f64], params: &KernelParams) -> Result<()> {
    if u.len() != params.dim() {
        return Err(Error::Dimension {
            expected: params.dim(),
            found: u.len(),
        });
    }
    Ok(())
}

#[inline]
fn se_exponent(u1: &[f64], u2: &[f64], theta: &[f64]) -> f64 {
    -0.5 * theta
        .iter()
        .zip(u1.iter().zip(u2))
        .map(|(th, (a, b))| th * (a - b) * (a - b))
        .sum::<f64>()
}

#[inline]
fn eval_unchecked(u1: &[f64], u2: &[f64], params: &KernelParams) -> f64 {
    let se = params.theta0 * se_exponent(u1, u2, &params.theta).exp();
    let lin: f64 = params.eta.iter().zip(u1.iter().zip(u2)).map(|(e, (a, b))| e * (a * b)).sum();
    se + lin
}

pub fn eval_kernel(u1: &[f64], u2: &[f64], params: &KernelParams) -> Result<f64> {
    check_dim(u1, params)?;
    check_dim(u2, params)?;
    Ok(eval_unchecked(u1, u2, params))
}

fn rows(covariates: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..covariates.nrows())
        .map(|k| covariates.row(k).iter().copied().collect())
        .collect()
}

fn check_matrix(covariates: &DMatrix<f64>, params: &KernelParams) -> Result<()> {
    if covariates.ncols() != params.dim() {
        return Err(Error::Dimension {
            expected: params.dim(),
            found: covariates.ncols(),
        });
    }
    if covariates.nrows() == 0 {
        return Err(Error::Parameter("kernel matrix needs at least one row".into()));
    }
    Ok(())
}

pub fn kernel_matrix(covariates: &DMatrix<f64>, params: &KernelParams) -> Result<DMatrix<f64>> {
    check_matrix(covariates, params)?;
    let r = rows(covariates);
    let n = r.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = eval_unchecked(&r[i], &r[j], params);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("kernel matrix has non-finite entries".into()));
    }
    Ok(k)
}

/// Derivatives of the Gram matrix in hyperparameter order.
pub fn kernel_grad(covariates: &DMatrix<f64>, params: &KernelParams) -> Result<Vec<DMatrix<f64>>> {
    check_matrix(covariates, params)?;
    let r = rows(covariates);
    let n = r.len();
    let p = params.dim();
    let mut grads = vec![DMatrix::zeros(n, n); 2 * p + 1];
    for i in 0..n {
        for j in 0..=i {
            let e = se_exponent(&r[i], &r[j], &params.theta).exp();
            let mut set = |m: usize, v: f64| {
                grads[m][(i, j)] = v;
                grads[m][(j, i)] = v;
            };
            set(0, e);
            for (q, (a, b)) in r[i].iter().zip(&r[j]).enumerate() {
                let diff = a - b;
                set(1 + q, params.theta0 * e * (-0.5 * diff * diff));
                set(1 + p + q, a * b);
            }
        }
    }
    if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric("kernel gradient has non-finite entries".into()));
    }
    Ok(grads)
}

pub fn cross_kernel(
    u_star: &[f64],
    covariates: &DMatrix<f64>,
    params: &KernelParams,
) -> Result<DVector<f64>> {
    check_dim(u_star, params)?;
    check_matrix(covariates, params)?;
    let r = rows(covariates);
    Ok(DVector::from_iterator(
        r.len(),
        r.iter().map(|row| eval_unchecked(u_star, row, params)),
    ))
}

/// Diagonal jitter `1e-8 · mean(diag K)`.
pub fn jitter(k: &DMatrix<f64>) -> f64 {
    JITTER_REL * k.diagonal().mean()
}

/// `K + jitter(K)·I`, the matrix every factorization in the crate works with.
pub fn jittered_kernel_matrix(
    covariates: &DMatrix<f64>,
    params: &KernelParams,
) -> Result<DMatrix<f64>> {
    let mut k = kernel_matrix(covariates, params)?;
    let j = jitter(&k);
    for i in 0..k.nrows() {
        k[(i, i)] += j;
    }
    Ok(k)
}

/// Derivatives of [`jittered_kernel_matrix`], including the jitter's own
/// dependence on the hyperparameters.
pub fn jittered_kernel_grad(
    covariates: &DMatrix<f64>,
    params: &KernelParams,
) -> Result<Vec<DMatrix<f64>>> {
    let mut grads = kernel_grad(covariates, params)?;
    for g in grads.iter_mut() {
        let dj = jitter(g);
        for i in 0..g.nrows() {
            g[(i, i)] += dj;
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model1() -> KernelParams {
        KernelParams::new(0.1, vec![10.0], vec![0.1]).unwrap()
    }

    #[test]
    fn equal_inputs_give_amplitude_plus_linear() {
        let kp = KernelParams::new(0.7, vec![2.0, 3.0], vec![0.5, 0.25]).unwrap();
        let u = [1.5, -2.0];
        let expected = 0.7 + 0.5 * 2.25 + 0.25 * 4.0;
        assert_relative_eq!(eval_kernel(&u, &u, &kp).unwrap(), expected, epsilon = 1e-15);
    }

    #[test]
    fn model1_value_at_t1() {
        // u(t) = 0.2 t at t = 1.
        let v = eval_kernel(&[0.2], &[0.2], &model1()).unwrap();
        assert_relative_eq!(v, 0.104, epsilon = 1e-15);
    }

    #[test]
    fn zero_inverse_length_scales() {
        let kp = KernelParams::new(1.0, vec![0.0], vec![0.0]).unwrap();
        assert_eq!(eval_kernel(&[0.3], &[5.0], &kp).unwrap(), 1.0);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(
            eval_kernel(&[0.1, 0.2], &[0.1], &model1()),
            Err(Error::Dimension { .. })
        ));
        let u = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 2.0]);
        assert!(kernel_matrix(&u, &model1()).is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(KernelParams::new(0.0, vec![1.0], vec![0.0]).is_err());
        assert!(KernelParams::new(1.0, vec![-1.0], vec![0.0]).is_err());
        assert!(KernelParams::new(1.0, vec![1.0], vec![]).is_err());
    }

    #[test]
    fn single_row_matrix() {
        let u = DMatrix::from_row_slice(1, 1, &[0.3]);
        let k = kernel_matrix(&u, &model1()).unwrap();
        assert_relative_eq!(k[(0, 0)], 0.1 + 0.1 * 0.09, epsilon = 1e-15);
    }

    fn min_max_eig(k: &DMatrix<f64>) -> (f64, f64) {
        let e = SymmetricEigen::new(k.clone()).eigenvalues;
        (e.min(), e.max())
    }

    #[test]
    fn model1_matrix_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = DMatrix::from_fn(5, 1, |_, _| rng.random_range(0.0..0.4));
        let k = kernel_matrix(&u, &model1()).unwrap();
        assert!(min_max_eig(&k).0 >= -1e-10);
    }

    #[test]
    fn duplicated_rows_rank_deficient_psd() {
        let u = DMatrix::from_row_slice(3, 1, &[0.1, 0.1, 0.3]);
        let k = kernel_matrix(&u, &model1()).unwrap();
        let (lo, hi) = min_max_eig(&k);
        assert!(lo >= -1e-12 * hi);
        assert!(lo.abs() < 1e-12);
    }

    #[test]
    fn grad_theta0_at_zero_length_scales() {
        let kp = KernelParams::new(2.0, vec![0.0], vec![0.3]).unwrap();
        let u = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 4.0]);
        let g = kernel_grad(&u, &kp).unwrap();
        assert!(g[0].iter().all(|&v| v == 1.0));
        // d/d eta = u_l u_m
        for l in 0..3 {
            for m in 0..3 {
                assert_eq!(g[2][(l, m)], u[(l, 0)] * u[(m, 0)]);
            }
        }
    }

    #[test]
    fn grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = DMatrix::from_fn(4, 1, |_, _| rng.random_range(0.0..0.4));
        let kp = model1();
        let g = kernel_grad(&u, &kp).unwrap();
        let base = kp.to_vec();
        for m in 0..base.len() {
            let h = 1e-5 * base[m].abs().max(1.0);
            let mut plus = base.clone();
            plus[m] += h;
            let mut minus = base.clone();
            minus[m] -= h;
            let kp_p = KernelParams::from_slice(&plus).unwrap();
            let kp_m = KernelParams::from_slice(&minus).unwrap();
            let fd = (kernel_matrix(&u, &kp_p).unwrap() - kernel_matrix(&u, &kp_m).unwrap()) / (2.0 * h);
            assert!((&fd - &g[m]).amax() < 1e-6, "param {m}");
        }
    }

    #[test]
    fn cross_kernel_consistency_and_limits() {
        let u = DMatrix::from_row_slice(3, 1, &[0.1, 0.2, 0.3]);
        let kp = model1();
        let k = kernel_matrix(&u, &kp).unwrap();
        let c = cross_kernel(&[0.1], &u, &kp).unwrap();
        assert_eq!(c, k.column(0).into_owned());

        let sharp = KernelParams::new(0.5, vec![1e8], vec![0.0]).unwrap();
        let c = cross_kernel(&[0.2], &u, &sharp).unwrap();
        assert_relative_eq!(c[1], 0.5);
        assert!(c[0] < 1e-100 && c[2] < 1e-100);

        let zero = DMatrix::zeros(3, 1);
        let c = cross_kernel(&[0.0], &zero, &KernelParams::new(0.5, vec![3.0], vec![9.0]).unwrap()).unwrap();
        assert!(c.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn jittered_grad_matches_finite_differences() {
        let u = DMatrix::from_row_slice(3, 2, &[0.1, 1.0, 0.4, -0.5, 0.9, 0.2]);
        let kp = KernelParams::new(0.4, vec![1.5, 0.3], vec![0.2, 0.7]).unwrap();
        let g = jittered_kernel_grad(&u, &kp).unwrap();
        let base = kp.to_vec();
        for m in 0..base.len() {
            let h = 1e-6;
            let mut plus = base.clone();
            plus[m] += h;
            let mut minus = base.clone();
            minus[m] -= h;
            let fd = (jittered_kernel_matrix(&u, &KernelParams::from_slice(&plus).unwrap()).unwrap()
                - jittered_kernel_matrix(&u, &KernelParams::from_slice(&minus).unwrap()).unwrap())
                / (2.0 * h);
            assert!((&fd - &g[m]).amax() < 1e-7);
        }
    }

    proptest! {
        #[test]
        fn symmetric(a in -3.0..3.0f64, b in -3.0..3.0f64, c in -3.0..3.0f64, d in -3.0..3.0f64,
                     t0 in 0.01..5.0f64, t1 in 0.0..20.0f64, t2 in 0.0..20.0f64,
                     e1 in 0.0..2.0f64, e2 in 0.0..2.0f64) {
            let kp = KernelParams::new(t0, vec![t1, t2], vec![e1, e2]).unwrap();
            let x = [a, b];
            let y = [c, d];
            prop_assert_eq!(eval_kernel(&x, &y, &kp).unwrap(), eval_kernel(&y, &x, &kp).unwrap());
        }

        #[test]
        fn gram_is_psd(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = rng.random_range(1..=3);
            let n = rng.random_range(1..=8);
            let kp = KernelParams::new(
                rng.random_range(0.01..3.0),
                (0..p).map(|_| rng.random_range(0.0..20.0)).collect(),
                (0..p).map(|_| rng.random_range(0.0..2.0)).collect(),
            ).unwrap();
            let u = DMatrix::from_fn(n, p, |_, _| rng.random_range(-2.0..2.0));
            let k = kernel_matrix(&u, &kp).unwrap();
            let (lo, hi) = min_max_eig(&k);
            prop_assert!(lo >= -1e-10 * hi.max(1e-300));
        }
    }
}
