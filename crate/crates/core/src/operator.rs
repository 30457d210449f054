//! Second-order elliptic operators `A = Σ a_ij ∂_i∂_j + Σ b_i ∂_i + c`.

use crate::smoothfn::{EvalError, Jet, SmoothFn};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Below this gradient norm a point counts as critical.
pub const GRAD_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OperatorError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("metric not positive definite at {0:?}")]
    NotPositiveDefinite(Vec<f64>),
    #[error("conformal weight not positive at {0:?}")]
    NonPositiveWeight(Vec<f64>),
    #[error("gradient vanishes at {0:?}")]
    GradientVanishes(Vec<f64>),
    #[error("ellipticity floor {floor} violated at {at:?} (smallest eigenvalue {found})")]
    Ellipticity { floor: f64, found: f64, at: Vec<f64> },
    #[error("invalid operator: {0}")]
    Invalid(String),
}

/// A coefficient: either a number or an expression tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Coef {
    Const(f64),
    Field(SmoothFn),
}

impl Coef {
    fn value(&self, x: &[f64]) -> Result<f64, EvalError> {
        match self {
            Coef::Const(v) => Ok(*v),
            Coef::Field(f) => f.value(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperatorKind {
    Laplace,
    Generic {
        a: Vec<Vec<Coef>>,
        b: Vec<Coef>,
        c: Coef,
    },
    /// Laplace-Beltrami operator of the metric with entries `metric[i][j]`.
    Riemannian {
        metric: Vec<Vec<SmoothFn>>,
    },
    /// Planar chart with conformal weight `g`: `(1/(4g))(∂²_x + ∂²_y)`.
    Hermitian {
        weight: SmoothFn,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipticOperator {
    pub dim: usize,
    pub lambda_min: f64,
    #[serde(flatten)]
    pub kind: OperatorKind,
}

/// Pointwise coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coeffs {
    pub a: [[f64; 3]; 3],
    pub b: [f64; 3],
    pub c: f64,
}

impl Coeffs {
    /// `A f` from a jet of `f`.
    pub fn apply(&self, j: &Jet, dim: usize) -> f64 {
        let mut s = self.c * j.v;
        for i in 0..dim {
            s += self.b[i] * j.g[i];
            for k in 0..dim {
                s += self.a[i][k] * j.h[i][k];
            }
        }
        s
    }

    pub fn min_eigenvalue(&self, dim: usize) -> f64 {
        let m = DMatrix::from_fn(dim, dim, |i, k| self.a[i][k]);
        SymmetricEigen::new(m).eigenvalues.min()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorBounds {
    pub delta: f64,
    pub n: f64,
    pub samples: usize,
}

impl EllipticOperator {
    pub fn laplace(dim: usize) -> Self {
        EllipticOperator { dim, lambda_min: 1.0, kind: OperatorKind::Laplace }
    }

    pub fn generic(
        dim: usize,
        a: Vec<Vec<Coef>>,
        b: Vec<Coef>,
        c: Coef,
        lambda_min: f64,
    ) -> Result<Self, OperatorError> {
        if a.len() != dim || a.iter().any(|r| r.len() != dim) || b.len() != dim {
            return Err(OperatorError::Invalid("coefficient shapes do not match dimension".into()));
        }
        if lambda_min <= 0.0 {
            return Err(OperatorError::Invalid("lambda_min must be positive".into()));
        }
        Ok(EllipticOperator { dim, lambda_min, kind: OperatorKind::Generic { a, b, c } })
    }

    /// Coefficients at `x`.
    pub fn coefficients(&self, x: &[f64]) -> Result<Coeffs, OperatorError> {
        let n = self.dim;
        let mut out = Coeffs { a: [[0.0; 3]; 3], b: [0.0; 3], c: 0.0 };
        match &self.kind {
            OperatorKind::Laplace => {
                for i in 0..n {
                    out.a[i][i] = 1.0;
                }
            }
            OperatorKind::Generic { a, b, c } => {
                for i in 0..n {
                    for k in 0..n {
                        out.a[i][k] = a[i][k].value(x)?;
                    }
                    out.b[i] = b[i].value(x)?;
                }
                out.c = c.value(x)?;
            }
            OperatorKind::Riemannian { metric } => riemannian_coeffs(metric, n, x, &mut out)?,
            OperatorKind::Hermitian { weight } => {
                let g = weight.value(x)?;
                if !(g > 0.0) {
                    return Err(OperatorError::NonPositiveWeight(x.to_vec()));
                }
                out.a[0][0] = 0.25 / g;
                out.a[1][1] = 0.25 / g;
            }
        }
        Ok(out)
    }

    pub fn apply(&self, f: &SmoothFn, x: &[f64]) -> Result<f64, OperatorError> {
        let j = f.eval(x)?;
        Ok(self.coefficients(x)?.apply(&j, self.dim))
    }

    /// Same formula with central differences of `f` in place of exact derivatives.
    pub fn fd_apply(&self, f: &SmoothFn, x: &[f64], step: f64) -> Result<f64, OperatorError> {
        let n = self.dim;
        let co = self.coefficients(x)?;
        let at = |d: &[(usize, f64)]| -> Result<f64, EvalError> {
            let mut y = x.to_vec();
            for &(i, s) in d {
                y[i] += s;
            }
            f.value(&y)
        };
        let f0 = f.value(x)?;
        let mut total = co.c * f0;
        for i in 0..n {
            let fp = at(&[(i, step)])?;
            let fm = at(&[(i, -step)])?;
            total += co.b[i] * (fp - fm) / (2.0 * step);
            total += co.a[i][i] * (fp - 2.0 * f0 + fm) / (step * step);
            for k in (i + 1)..n {
                let a_ik = co.a[i][k] + co.a[k][i];
                if a_ik == 0.0 {
                    continue;
                }
                let d = at(&[(i, step), (k, step)])? - at(&[(i, step), (k, -step)])? - at(&[(i, -step), (k, step)])?
                    + at(&[(i, -step), (k, -step)])?;
                total += a_ik * d / (4.0 * step * step);
            }
        }
        Ok(total)
    }

    /// Checks symmetry and the declared ellipticity floor; returns the
    /// smallest eigenvalue seen.
    pub fn check_ellipticity(&self, samples: &[Vec<f64>]) -> Result<f64, OperatorError> {
        let mut lo = f64::INFINITY;
        for x in samples {
            let co = self.coefficients(x)?;
            for i in 0..self.dim {
                for k in 0..i {
                    let scale = co.a[i][k].abs().max(co.a[k][i].abs()).max(1.0);
                    if (co.a[i][k] - co.a[k][i]).abs() > 1e-12 * scale {
                        return Err(OperatorError::Invalid(format!("asymmetric coefficients at {x:?}")));
                    }
                }
            }
            let e = co.min_eigenvalue(self.dim);
            if e < self.lambda_min * (1.0 - 1e-12) {
                return Err(OperatorError::Ellipticity { floor: self.lambda_min, found: e, at: x.clone() });
            }
            lo = lo.min(e);
        }
        Ok(lo)
    }
}

fn riemannian_coeffs(metric: &[Vec<SmoothFn>], n: usize, x: &[f64], out: &mut Coeffs) -> Result<(), OperatorError> {
    let mut g = DMatrix::<f64>::zeros(n, n);
    let mut dg: Vec<DMatrix<f64>> = vec![DMatrix::zeros(n, n); n];
    for i in 0..n {
        for k in 0..n {
            let j = metric[i][k].eval(x)?;
            g[(i, k)] = j.v;
            for (l, d) in dg.iter_mut().enumerate() {
                d[(i, k)] = j.g[l];
            }
        }
    }
    let chol = g.clone().cholesky().ok_or_else(|| OperatorError::NotPositiveDefinite(x.to_vec()))?;
    let ginv = chol.inverse();
    for i in 0..n {
        for k in 0..n {
            out.a[i][k] = ginv[(i, k)];
        }
    }
    // b_i = Σ_j ∂_j g^{ij} + g^{ij} ∂_j log √G, with ∂ g^{-1} = -g^{-1} ∂g g^{-1}.
    for (j, dgj) in dg.iter().enumerate() {
        let dinv = -(&ginv * dgj * &ginv);
        let dlog_sqrt = 0.5 * (&ginv * dgj).trace();
        for i in 0..n {
            out.b[i] += dinv[(i, j)] + ginv[(i, j)] * dlog_sqrt;
        }
    }
    Ok(())
}

/// Laplace-Beltrami operator of a metric given entrywise.
pub fn riemannian_laplacian(
    metric: Vec<Vec<SmoothFn>>,
    samples: &[Vec<f64>],
) -> Result<EllipticOperator, OperatorError> {
    let dim = metric.len();
    if metric.iter().any(|r| r.len() != dim) {
        return Err(OperatorError::Invalid("metric must be square".into()));
    }
    let mut op = EllipticOperator { dim, lambda_min: f64::MIN_POSITIVE, kind: OperatorKind::Riemannian { metric } };
    let mut lo = f64::INFINITY;
    for x in samples {
        lo = lo.min(op.coefficients(x)?.min_eigenvalue(dim));
    }
    if lo.is_finite() {
        op.lambda_min = lo;
    }
    Ok(op)
}

/// `(1/g) ∂²/∂z∂z̄` on a planar chart.
pub fn hermitian_laplacian(weight: SmoothFn, samples: &[Vec<f64>]) -> Result<EllipticOperator, OperatorError> {
    if weight.dim != 2 {
        return Err(OperatorError::Invalid("hermitian weight must live on a planar chart".into()));
    }
    let mut gmax: f64 = 0.0;
    for x in samples {
        let g = weight.value(x)?;
        if !(g > 0.0) {
            return Err(OperatorError::NonPositiveWeight(x.clone()));
        }
        gmax = gmax.max(g);
    }
    let lambda_min = if gmax > 0.0 { 0.25 / gmax } else { f64::MIN_POSITIVE };
    Ok(EllipticOperator { dim: 2, lambda_min, kind: OperatorKind::Hermitian { weight } })
}

/// The constants `δ` and `N` for `φ` over the given samples.
pub fn bounds_for(
    op: &EllipticOperator,
    phi: &SmoothFn,
    samples: &[Vec<f64>],
) -> Result<OperatorBounds, OperatorError> {
    bounds_with_floor(op, phi, samples, GRAD_FLOOR)
}

pub fn bounds_with_floor(
    op: &EllipticOperator,
    phi: &SmoothFn,
    samples: &[Vec<f64>],
    grad_floor: f64,
) -> Result<OperatorBounds, OperatorError> {
    let n = op.dim;
    let mut delta = f64::INFINITY;
    let mut big_n: f64 = 0.0;
    for x in samples {
        let j = phi.eval(x)?;
        if j.grad_norm(n) <= grad_floor {
            return Err(OperatorError::GradientVanishes(x.clone()));
        }
        let co = op.coefficients(x)?;
        let mut quad = 0.0;
        let mut first = 0.0;
        for i in 0..n {
            first += co.b[i] * j.g[i];
            for k in 0..n {
                quad += co.a[i][k] * j.g[i] * j.g[k];
                first += co.a[i][k] * j.h[i][k];
            }
        }
        delta = delta.min(quad);
        big_n = big_n.max(first.abs()).max(co.c.abs());
    }
    Ok(OperatorBounds { delta, n: big_n, samples: samples.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Cuboid;
    use crate::smoothfn::{cube_bump, Fn1D};

    fn sq(dim: usize) -> SmoothFn {
        SmoothFn::sum(dim, (0..dim).map(|i| SmoothFn::coord(dim, i).mul(SmoothFn::coord(dim, i))).collect())
    }

    #[test]
    fn laplacian_of_square_norm() {
        let a = EllipticOperator::laplace(2);
        for x in [[0.0, 0.0], [1.3, -2.0]] {
            assert_eq!(a.apply(&sq(2), &x).unwrap(), 4.0);
            assert!((a.fd_apply(&sq(2), &x, 1e-3).unwrap() - 4.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zeroth_order_term() {
        let a = EllipticOperator::generic(
            2,
            vec![vec![Coef::Const(1.0), Coef::Const(0.0)], vec![Coef::Const(0.0), Coef::Const(1.0)]],
            vec![Coef::Const(0.0), Coef::Const(0.0)],
            Coef::Const(-1.0),
            1.0,
        )
        .unwrap();
        assert_eq!(a.apply(&SmoothFn::constant(2, 1.0), &[0.4, 0.4]).unwrap(), -1.0);
    }

    #[test]
    fn variable_leading_coefficient() {
        let x0 = SmoothFn::coord(2, 0);
        let a00 = SmoothFn::constant(2, 1.0).add(x0.clone().mul(x0.clone()));
        let a = EllipticOperator::generic(
            2,
            vec![vec![Coef::Field(a00), Coef::Const(0.0)], vec![Coef::Const(0.0), Coef::Const(1.0)]],
            vec![Coef::Const(0.0), Coef::Const(0.0)],
            Coef::Const(0.0),
            1.0,
        )
        .unwrap();
        let f = x0.clone().mul(x0);
        assert_eq!(a.apply(&f, &[1.0, 0.0]).unwrap(), 4.0);
        assert!((a.fd_apply(&f, &[1.0, 0.0], 1e-3).unwrap() - 4.0).abs() < 1e-6);
    }

    #[test]
    fn fd_matches_on_bump() {
        let b = Cuboid::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let f = cube_bump(&b, &[0.1, 0.2]).unwrap();
        let a = EllipticOperator::laplace(2);
        for x in [[0.3, 0.1], [-0.5, 0.4], [0.0, -0.6]] {
            let e = a.apply(&f, &x).unwrap();
            let d = a.fd_apply(&f, &x, 1e-3).unwrap();
            assert!((e - d).abs() <= 1e-5 * e.abs().max(1.0), "{e} vs {d}");
        }
    }

    #[test]
    fn bounds_linear_function() {
        let a = EllipticOperator::laplace(2);
        let k = vec![vec![1.0, 0.0], vec![1.5, 0.5], vec![2.0, 1.0]];
        let b = bounds_for(&a, &SmoothFn::coord(2, 0), &k).unwrap();
        assert_eq!(b.delta, 1.0);
        assert_eq!(b.n, 0.0);
    }

    #[test]
    fn bounds_detect_critical_point() {
        let a = EllipticOperator::laplace(2);
        let x0 = SmoothFn::coord(2, 0);
        let k = vec![vec![0.5, 0.0], vec![0.0, 0.0]];
        assert!(matches!(bounds_for(&a, &x0.clone().mul(x0), &k), Err(OperatorError::GradientVanishes(_))));
    }

    #[test]
    fn identity_metric_is_laplacian() {
        let one = SmoothFn::constant(2, 1.0);
        let zero = SmoothFn::constant(2, 0.0);
        let op =
            riemannian_laplacian(vec![vec![one.clone(), zero.clone()], vec![zero, one]], &[vec![0.0, 0.0]]).unwrap();
        let x0 = SmoothFn::coord(2, 0);
        assert_eq!(op.apply(&x0.clone().mul(x0), &[0.3, 0.3]).unwrap(), 2.0);
    }

    #[test]
    fn diagonal_metric_against_divergence_form() {
        // g = diag(4, 1): Δ_g f = (1/√G) ∂_i(g^{ij} √G ∂_j f) = ¼ f_xx + f_yy.
        let c = |v| SmoothFn::constant(2, v);
        let op = riemannian_laplacian(vec![vec![c(4.0), c(0.0)], vec![c(0.0), c(1.0)]], &[vec![0.0, 0.0]]).unwrap();
        let x0 = SmoothFn::coord(2, 0);
        assert_eq!(op.apply(&x0.clone().mul(x0), &[0.7, -0.2]).unwrap(), 0.5);
    }

    #[test]
    fn conformal_metric_identity() {
        // g = e^{2u} I in 2-D: Δ_g f = e^{-2u} Δ f.
        let u = SmoothFn::coord(2, 0).compose(Fn1D::Cos { freq: 1.3, phase: 0.2 }).scale(0.3);
        let e2u = u.clone().compose(Fn1D::Exp { a: 2.0, b: 0.0 });
        let z = SmoothFn::constant(2, 0.0);
        let op = riemannian_laplacian(vec![vec![e2u.clone(), z.clone()], vec![z, e2u]], &[vec![0.0, 0.0]]).unwrap();
        let b = Cuboid::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let f = cube_bump(&b, &[0.2, 0.0]).unwrap();
        let lap = EllipticOperator::laplace(2);
        for x in [[0.1, 0.2], [-0.4, 0.5], [0.6, -0.3]] {
            let lhs = op.apply(&f, &x).unwrap();
            let rhs = (-2.0 * u.value(&x).unwrap()).exp() * lap.apply(&f, &x).unwrap();
            assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
        }
    }

    #[test]
    fn hermitian_scaling() {
        let pts = [vec![0.0, 0.0]];
        let f = sq(2);
        let h1 = hermitian_laplacian(SmoothFn::constant(2, 1.0), &pts).unwrap();
        let h4 = hermitian_laplacian(SmoothFn::constant(2, 4.0), &pts).unwrap();
        assert_eq!(h1.apply(&f, &[0.3, 0.1]).unwrap(), 1.0);
        assert_eq!(h4.apply(&f, &[0.3, 0.1]).unwrap(), 0.25);
        assert!(hermitian_laplacian(SmoothFn::constant(2, -1.0), &pts).is_err());
    }

    #[test]
    fn operator_json_round_trip() {
        let u = SmoothFn::coord(2, 1).compose(Fn1D::Cos { freq: 2.0, phase: 0.1 }).scale(0.1);
        let a = EllipticOperator::generic(
            2,
            vec![
                vec![Coef::Field(u.clone().add(SmoothFn::constant(2, 1.0))), Coef::Const(0.0)],
                vec![Coef::Const(0.0), Coef::Const(1.0)],
            ],
            vec![Coef::Field(u), Coef::Const(0.0)],
            Coef::Const(0.0),
            0.5,
        )
        .unwrap();
        let s = serde_json::to_string(&a).unwrap();
        let back: EllipticOperator = serde_json::from_str(&s).unwrap();
        assert_eq!(a, back);
        let lap: EllipticOperator = serde_json::from_str(r#"{"dim":2,"lambda_min":1.0,"kind":"laplace"}"#).unwrap();
        assert_eq!(lap, EllipticOperator::laplace(2));
    }
}
