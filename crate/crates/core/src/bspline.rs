//! Clamped B-spline bases, the coefficient matrix `B` with `β(t) = Bᵀ Φ(t)`,
//! and roughness penalties `∫ [LΦ][LΦ]ᵀ dt` for `L = ω₀ + ω₁ D + D²`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BasisRepr", into = "BasisRepr")]
pub struct BSplineBasis {
    order: usize,
    interior_knots: Vec<f64>,
    domain: (f64, f64),
    knots: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BasisRepr {
    order: usize,
    interior_knots: Vec<f64>,
    domain: (f64, f64),
}

impl TryFrom<BasisRepr> for BSplineBasis {
    type Error = Error;

    fn try_from(r: BasisRepr) -> Result<Self> {
        BSplineBasis::new(r.order, r.interior_knots, r.domain)
    }
}

impl From<BSplineBasis> for BasisRepr {
    fn from(b: BSplineBasis) -> Self {
        BasisRepr {
            order: b.order,
            interior_knots: b.interior_knots,
            domain: b.domain,
        }
    }
}

impl BSplineBasis {
    pub fn new(order: usize, interior_knots: Vec<f64>, domain: (f64, f64)) -> Result<Self> {
        let (a, b) = domain;
        if order < 2 {
            return Err(Error::Parameter(format!("spline order must be >= 2, got {order}")));
        }
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(Error::Parameter(format!("invalid spline domain [{a}, {b}]")));
        }
        let mut prev = a;
        for &k in &interior_knots {
            if !(k > prev && k < b) {
                return Err(Error::Parameter(
                    "interior knots must be strictly increasing inside the domain".into(),
                ));
            }
            prev = k;
        }
        let mut basis = BSplineBasis {
            order,
            interior_knots,
            domain,
            knots: Vec::new(),
        };
        basis.rebuild_knots();
        Ok(basis)
    }

    /// `n_basis` functions with equally spaced interior knots.
    pub fn uniform(order: usize, n_basis: usize, domain: (f64, f64)) -> Result<Self> {
        if n_basis < order {
            return Err(Error::Parameter(format!(
                "need at least {order} basis functions for order {order}, got {n_basis}"
            )));
        }
        let n_int = n_basis - order;
        let (a, b) = domain;
        let knots = (1..=n_int).map(|k| a + (b - a) * k as f64 / (n_int + 1) as f64).collect();
        Self::new(order, knots, domain)
    }

    fn rebuild_knots(&mut self) {
        let (a, b) = self.domain;
        let mut knots = vec![a; self.order];
        knots.extend(&self.interior_knots);
        knots.extend(std::iter::repeat_n(b, self.order));
        self.knots = knots;
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.interior_knots
    }

    /// Number of basis functions `L`.
    pub fn len(&self) -> usize {
        self.order + self.interior_knots.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn check_domain(&self, t: f64) -> Result<f64> {
        let (a, b) = self.domain;
        let slack = 1e-12 * (b - a);
        if !t.is_finite() || t < a - slack || t > b + slack {
            return Err(Error::Domain { value: t, lo: a, hi: b });
        }
        Ok(t.clamp(a, b))
    }

    /// Values of all B-splines of orders `1..=order` at `t`; `table[j-1]` holds
    /// the `knots.len() - j` functions of order `j`.
    fn order_table(&self, t: f64) -> Vec<Vec<f64>> {
        let kn = &self.knots;
        let m = kn.len();
        let last = self.len() - 1;
        // span s with kn[s] <= t < kn[s+1]; right endpoint belongs to the last span
        let span = if t >= self.domain.1 {
            last
        } else {
            (self.order - 1..=last).rfind(|&s| kn[s] <= t).unwrap_or(self.order - 1)
        };
        let mut table = Vec::with_capacity(self.order);
        let mut first = vec![0.0; m - 1];
        first[span] = 1.0;
        table.push(first);
        for j in 2..=self.order {
            let prev = &table[j - 2];
            let mut cur = vec![0.0; m - j];
            for (i, c) in cur.iter_mut().enumerate() {
                let mut v = 0.0;
                let d1 = kn[i + j - 1] - kn[i];
                if d1 > 0.0 {
                    v += (t - kn[i]) / d1 * prev[i];
                }
                let d2 = kn[i + j] - kn[i + 1];
                if d2 > 0.0 {
                    v += (kn[i + j] - t) / d2 * prev[i + 1];
                }
                *c = v;
            }
            table.push(cur);
        }
        table
    }

    /// `r`-th derivative of the order-`j` functions from the order table.
    fn derivative(&self, table: &[Vec<f64>], j: usize, r: usize) -> Vec<f64> {
        if r == 0 {
            return table[j - 1].clone();
        }
        if j == 1 {
            return vec![0.0; table[0].len()];
        }
        let kn = &self.knots;
        let lower = self.derivative(table, j - 1, r - 1);
        let scale = (j - 1) as f64;
        (0..kn.len() - j)
            .map(|i| {
                let mut v = 0.0;
                let d1 = kn[i + j - 1] - kn[i];
                if d1 > 0.0 {
                    v += lower[i] / d1;
                }
                let d2 = kn[i + j] - kn[i + 1];
                if d2 > 0.0 {
                    v -= lower[i + 1] / d2;
                }
                scale * v
            })
            .collect()
    }

    /// `Φ(t)`.
    pub fn eval(&self, t: f64) -> Result<DVector<f64>> {
        let t = self.check_domain(t)?;
        let table = self.order_table(t);
        Ok(DVector::from_vec(table[self.order - 1].clone()))
    }

    /// `[Φ(t), DΦ(t), …, D^max_deriv Φ(t)]`.
    pub fn eval_derivs(&self, t: f64, max_deriv: usize) -> Result<Vec<DVector<f64>>> {
        let t = self.check_domain(t)?;
        let table = self.order_table(t);
        Ok((0..=max_deriv)
            .map(|r| DVector::from_vec(self.derivative(&table, self.order, r)))
            .collect())
    }

    /// `n × L` matrix with rows `Φ(t_k)ᵀ`.
    pub fn design_matrix(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(times.len(), self.len());
        for (k, &t) in times.iter().enumerate() {
            m.row_mut(k).copy_from(&self.eval(t)?.transpose());
        }
        Ok(m)
    }

    /// Distinct knot breakpoints `a = x_0 < … < x_s = b`.
    pub fn breakpoints(&self) -> Vec<f64> {
        let (a, b) = self.domain;
        let mut v = vec![a];
        v.extend(&self.interior_knots);
        v.push(b);
        v
    }
}

/// `L = ω₀ + ω₁ D + D²` with constant weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivativeOperator {
    pub omega0: f64,
    pub omega1: f64,
}

impl DerivativeOperator {
    pub fn second_derivative() -> Self {
        DerivativeOperator {
            omega0: 0.0,
            omega1: 0.0,
        }
    }

    /// `LΦ(t)`.
    pub fn apply(&self, basis: &BSplineBasis, t: f64) -> Result<DVector<f64>> {
        let d = basis.eval_derivs(t, 2)?;
        Ok(&d[0] * self.omega0 + &d[1] * self.omega1 + &d[2])
    }
}

impl Default for DerivativeOperator {
    fn default() -> Self {
        Self::second_derivative()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Quadrature {
    /// Gauss–Legendre with `order` nodes per knot span, exact for the
    /// piecewise-polynomial integrand.
    #[default]
    Exact,
    /// Gauss–Legendre with the given number of nodes per knot span.
    GaussLegendre(usize),
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            // p1 = P_n(x), p0 = P_{n-1}(x)
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// `L_ΦΦ = ∫_a^b [LΦ(t)][LΦ(t)]ᵀ dt`.
pub fn penalty_matrix(
    basis: &BSplineBasis,
    op: &DerivativeOperator,
    quadrature: Quadrature,
) -> Result<DMatrix<f64>> {
    if basis.order() < 4 {
        return Err(Error::Parameter(format!(
            "roughness penalty with D² needs spline order >= 4, got {}",
            basis.order()
        )));
    }
    let nodes_per_span = match quadrature {
        Quadrature::Exact => basis.order(),
        Quadrature::GaussLegendre(n) => n.max(1),
    };
    let (x, w) = gauss_legendre(nodes_per_span);
    let l = basis.len();
    let mut out = DMatrix::zeros(l, l);
    for span in basis.breakpoints().windows(2) {
        let (lo, hi) = (span[0], span[1]);
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        for (xi, wi) in x.iter().zip(&w) {
            let v = op.apply(basis, mid + half * xi)?;
            out.ger(wi * half, &v, &v, 1.0);
        }
    }
    Ok(0.5 * (&out + out.transpose()))
}

/// `L × (I+1)` coefficients; column 0 is `μ`, column `i` is `α_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientMatrix(pub DMatrix<f64>);

impl CoefficientMatrix {
    pub fn zeros(n_basis: usize, levels: usize) -> Self {
        CoefficientMatrix(DMatrix::zeros(n_basis, levels + 1))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn n_basis(&self) -> usize {
        self.0.nrows()
    }

    pub fn levels(&self) -> usize {
        self.0.ncols() - 1
    }
}

/// `β(t) = Bᵀ Φ(t) = (μ(t), α_1(t), …, α_I(t))`.
pub fn eval_beta(b: &CoefficientMatrix, basis: &BSplineBasis, t: f64) -> Result<DVector<f64>> {
    if b.n_basis() != basis.len() {
        return Err(Error::Dimension {
            expected: basis.len(),
            found: b.n_basis(),
        });
    }
    let phi = basis.eval(t)?;
    Ok(b.0.tr_mul(&phi))
}

/// `λ Σ_i B_iᵀ L_ΦΦ B_i` over the columns of `B`.
pub fn penalty_value(b: &CoefficientMatrix, l_phiphi: &DMatrix<f64>, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::Parameter(format!("lambda must be >= 0, got {lambda}")));
    }
    if l_phiphi.nrows() != b.n_basis() || l_phiphi.ncols() != b.n_basis() {
        return Err(Error::Dimension {
            expected: b.n_basis(),
            found: l_phiphi.nrows(),
        });
    }
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let lb = l_phiphi * &b.0;
    Ok(lambda * b.0.component_mul(&lb).sum())
}
