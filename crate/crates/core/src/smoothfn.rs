//! Closed-form smooth functions as expression trees with exact value, gradient
//! and Hessian.
//!
//! Every node may carry a declared support box. Outside it the node evaluates
//! to an exact zero jet without touching its children, which is what keeps
//! long sums of bumps cheap and keeps prescribed zero sets bit-exact.

use crate::geometry::Cuboid;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Exponents below this flush to exact zero (log of the smallest normal f64).
pub const FLUSH_EXPONENT: f64 = -708.396_418_532_264_1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("overflow while evaluating {0}")]
    Overflow(&'static str),
    #[error("evaluation at a pole of {0}")]
    Pole(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid construction: {0}")]
    Invalid(String),
}

/// Value, gradient and Hessian at a point. Unused axes stay zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet {
    pub v: f64,
    pub g: [f64; 3],
    pub h: [[f64; 3]; 3],
}

impl Jet {
    pub const ZERO: Jet = Jet { v: 0.0, g: [0.0; 3], h: [[0.0; 3]; 3] };

    pub fn constant(v: f64) -> Jet {
        Jet { v, ..Jet::ZERO }
    }

    pub fn is_zero(&self) -> bool {
        self.v == 0.0 && self.g.iter().all(|x| *x == 0.0) && self.h.iter().flatten().all(|x| *x == 0.0)
    }

    fn is_finite(&self) -> bool {
        self.v.is_finite() && self.g.iter().all(|x| x.is_finite()) && self.h.iter().flatten().all(|x| x.is_finite())
    }

    pub fn grad_norm(&self, dim: usize) -> f64 {
        self.g[..dim].iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    fn add_assign(&mut self, o: &Jet) {
        self.v += o.v;
        for i in 0..3 {
            self.g[i] += o.g[i];
            for j in 0..3 {
                self.h[i][j] += o.h[i][j];
            }
        }
    }

    fn scaled(&self, r: f64) -> Jet {
        let mut out = *self;
        out.v *= r;
        for i in 0..3 {
            out.g[i] *= r;
            for j in 0..3 {
                out.h[i][j] *= r;
            }
        }
        out
    }

    fn times(&self, o: &Jet) -> Jet {
        let mut out = Jet::ZERO;
        out.v = self.v * o.v;
        for i in 0..3 {
            out.g[i] = self.v * o.g[i] + o.v * self.g[i];
            for j in 0..3 {
                out.h[i][j] = self.v * o.h[i][j] + o.v * self.h[i][j] + self.g[i] * o.g[j] + o.g[i] * self.g[j];
            }
        }
        out
    }

    /// Postcomposition with a univariate jet `(f, f', f'')`.
    fn compose(&self, f: (f64, f64, f64)) -> Jet {
        let (f0, f1, f2) = f;
        let mut out = Jet::ZERO;
        out.v = f0;
        for i in 0..3 {
            out.g[i] = f1 * self.g[i];
            for j in 0..3 {
                out.h[i][j] = f1 * self.h[i][j] + f2 * self.g[i] * self.g[j];
            }
        }
        out
    }
}

/// Univariate smooth functions used for postcomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "fn", rename_all = "snake_case")]
pub enum Fn1D {
    /// `exp(a t - b/t)` for `t > 0`, zero otherwise.
    Chi { a: f64, b: f64 },
    /// Convex nondecreasing: `2N` below `N`, identity above `3N`.
    Flatten { n: f64 },
    /// `exp(a t + b)`.
    Exp { a: f64, b: f64 },
    /// `cos(freq t + phase)`.
    Cos { freq: f64, phase: f64 },
    /// Natural logarithm, `t > 0`.
    Log,
    /// `t^p`, `t > 0`.
    Pow { p: f64 },
    /// `(χ(1 + c t) - χ(1)) / c` with `χ = exp(t - 1/t)`, evaluated without
    /// cancellation for small `c t`.
    ScaledChi { c: f64 },
}

/// Convexifier with `χ'' ≥ χ' ≥ χ > 0` on `t > 0`.
pub fn convexifier(a: f64, b: f64) -> Fn1D {
    Fn1D::Chi { a, b }
}

/// Cutoff with `λ = 2N` on `t ≤ N`, `λ = t` on `t ≥ 3N`, `λ', λ'' ≥ 0`.
pub fn flatten_cutoff(n: f64) -> Fn1D {
    Fn1D::Flatten { n }
}

// 16-point Gauss-Legendre nodes and weights on [-1, 1] (positive half).
const GL_X: [f64; 8] = [
    0.095_012_509_837_637_44,
    0.281_603_550_779_258_9,
    0.458_016_777_657_227_4,
    0.617_876_244_402_643_7,
    0.755_404_408_355_003,
    0.865_631_202_387_831_8,
    0.944_575_023_073_232_6,
    0.989_400_934_991_649_9,
];
const GL_W: [f64; 8] = [
    0.189_450_610_455_068_5,
    0.182_603_415_044_923_6,
    0.169_156_519_395_002_5,
    0.149_595_988_816_576_7,
    0.124_628_971_255_533_9,
    0.095_158_511_682_492_79,
    0.062_253_523_938_647_89,
    0.027_152_459_411_754_09,
];

/// Smooth step on [0, 1]: `e(ξ) / (e(ξ) + e(1-ξ))` with `e(ξ) = exp(-1/ξ)`.
fn step(xi: f64) -> (f64, f64) {
    if xi <= 0.0 {
        return (0.0, 0.0);
    }
    if xi >= 1.0 {
        return (1.0, 0.0);
    }
    // s = 1 / (1 + exp(1/ξ - 1/(1-ξ)))
    let q = 1.0 / xi - 1.0 / (1.0 - xi);
    let dq = -1.0 / (xi * xi) - 1.0 / ((1.0 - xi) * (1.0 - xi));
    if q > 700.0 {
        return (0.0, 0.0);
    }
    let e = q.exp();
    let s = 1.0 / (1.0 + e);
    (s, -s * (1.0 - s) * dq)
}

/// `∫_0^ξ step` for ξ in [0, 1/2], composite Gauss-Legendre.
fn step_integral_low(xi: f64) -> f64 {
    if xi <= 0.0 {
        return 0.0;
    }
    const PIECES: usize = 8;
    let w = xi / PIECES as f64;
    let mut total = 0.0;
    for p in 0..PIECES {
        let mid = (p as f64 + 0.5) * w;
        let half = 0.5 * w;
        let mut acc = 0.0;
        for k in 0..8 {
            acc += GL_W[k] * (step(mid - half * GL_X[k]).0 + step(mid + half * GL_X[k]).0);
        }
        total += acc * half;
    }
    total
}

fn step_integral(xi: f64) -> f64 {
    if xi <= 0.5 {
        step_integral_low(xi)
    } else {
        // Symmetry step(1 - v) = 1 - step(v).
        let v = 1.0 - xi;
        0.5 - v + step_integral_low(v)
    }
}

impl Fn1D {
    /// `(f, f', f'')` at `t`.
    pub fn eval(&self, t: f64) -> Result<(f64, f64, f64), EvalError> {
        let out = match *self {
            Fn1D::Chi { a, b } => {
                if t <= 0.0 {
                    return Ok((0.0, 0.0, 0.0));
                }
                let e = a * t - b / t;
                if e < FLUSH_EXPONENT {
                    return Ok((0.0, 0.0, 0.0));
                }
                let f = e.exp();
                let d1 = a + b / (t * t);
                let d2 = -2.0 * b / (t * t * t);
                (f, d1 * f, (d2 + d1 * d1) * f)
            }
            Fn1D::Flatten { n } => {
                if t <= n {
                    (2.0 * n, 0.0, 0.0)
                } else if t >= 3.0 * n {
                    (t, 1.0, 0.0)
                } else {
                    let xi = (t - n) / (2.0 * n);
                    let (s, ds) = step(xi);
                    (2.0 * n + 2.0 * n * step_integral(xi), s, ds / (2.0 * n))
                }
            }
            Fn1D::Exp { a, b } => {
                let f = (a * t + b).exp();
                (f, a * f, a * a * f)
            }
            Fn1D::Cos { freq, phase } => {
                let arg = freq * t + phase;
                (arg.cos(), -freq * arg.sin(), -freq * freq * arg.cos())
            }
            Fn1D::Log => {
                if t <= 0.0 {
                    return Err(EvalError::Pole("log"));
                }
                (t.ln(), 1.0 / t, -1.0 / (t * t))
            }
            Fn1D::Pow { p } => {
                if t <= 0.0 {
                    return Err(EvalError::Pole("pow"));
                }
                let f = t.powf(p);
                (f, p * f / t, p * (p - 1.0) * f / (t * t))
            }
            Fn1D::ScaledChi { c } => {
                let u = c * t;
                let s = 1.0 + u;
                if s <= 0.0 || s - 1.0 / s < FLUSH_EXPONENT {
                    return Ok((-1.0 / c, 0.0, 0.0));
                }
                let chi = (s - 1.0 / s).exp();
                let d1 = 1.0 + 1.0 / (s * s);
                let d2 = -2.0 / (s * s * s);
                ((u * (2.0 + u) / s).exp_m1() / c, d1 * chi, c * (d2 + d1 * d1) * chi)
            }
        };
        if !(out.0.is_finite() && out.1.is_finite() && out.2.is_finite()) {
            return Err(EvalError::Overflow(self.name()));
        }
        Ok(out)
    }

    fn name(&self) -> &'static str {
        match self {
            Fn1D::Chi { .. } => "chi",
            Fn1D::Flatten { .. } => "flatten_cutoff",
            Fn1D::Exp { .. } => "exp",
            Fn1D::Cos { .. } => "cos",
            Fn1D::Log => "log",
            Fn1D::Pow { .. } => "pow",
            Fn1D::ScaledChi { .. } => "scaled_chi",
        }
    }

    /// True when `f(0) = f'(0) = f''(0) = 0`, so zero support propagates.
    fn preserves_zero(&self) -> bool {
        matches!(self, Fn1D::Chi { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Const {
        value: f64,
    },
    Coord {
        axis: usize,
    },
    /// `child(M x + shift)`; `M` has one row per child axis.
    AffinePullback {
        matrix: Vec<Vec<f64>>,
        shift: Vec<f64>,
        child: Box<SmoothFn>,
    },
    Sum {
        children: Vec<SmoothFn>,
    },
    Prod {
        children: Vec<SmoothFn>,
    },
    Scale {
        factor: f64,
        child: Box<SmoothFn>,
    },
    /// Product of per-axis bumps `exp(-(t-a)²/(1-t²))` after mapping the box
    /// to `(-1,1)^n`; `a` is the normalized peak.
    CubeBump {
        cube: Cuboid,
        peak: Vec<f64>,
    },
    Chi {
        a: f64,
        b: f64,
        inner: Box<SmoothFn>,
    },
    FlattenCutoff {
        n: f64,
        inner: Box<SmoothFn>,
    },
    Exp1D {
        a: f64,
        b: f64,
        inner: Box<SmoothFn>,
    },
    Cos1D {
        freq: f64,
        phase: f64,
        inner: Box<SmoothFn>,
    },
    Log1D {
        inner: Box<SmoothFn>,
    },
    Pow1D {
        p: f64,
        inner: Box<SmoothFn>,
    },
    ScaledChi {
        c: f64,
        inner: Box<SmoothFn>,
    },
    /// Planar pullback by `z ↦ 1/z`.
    Inversion {
        child: Box<SmoothFn>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothFn {
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support: Option<Cuboid>,
    pub node: Node,
}

fn hull_box(a: &Cuboid, b: &Cuboid) -> Cuboid {
    Cuboid {
        lo: a.lo.iter().zip(&b.lo).map(|(x, y)| x.min(*y)).collect(),
        hi: a.hi.iter().zip(&b.hi).map(|(x, y)| x.max(*y)).collect(),
    }
}

impl SmoothFn {
    fn leaf(dim: usize, node: Node) -> SmoothFn {
        SmoothFn { dim, support: None, node }
    }

    pub fn constant(dim: usize, value: f64) -> SmoothFn {
        SmoothFn::leaf(dim, Node::Const { value })
    }

    pub fn coord(dim: usize, axis: usize) -> SmoothFn {
        assert!(axis < dim, "coordinate axis out of range");
        SmoothFn::leaf(dim, Node::Coord { axis })
    }

    /// Declares that the function vanishes identically outside `b`.
    pub fn with_support(mut self, b: Cuboid) -> SmoothFn {
        self.support = Some(b);
        self
    }

    pub fn sum(dim: usize, children: Vec<SmoothFn>) -> SmoothFn {
        let support = if !children.is_empty() && children.iter().all(|c| c.support.is_some()) {
            let mut it = children.iter().map(|c| c.support.clone().unwrap());
            let first = it.next().unwrap();
            Some(it.fold(first, |acc, b| hull_box(&acc, &b)))
        } else {
            None
        };
        SmoothFn { dim, support, node: Node::Sum { children } }
    }

    pub fn add(self, other: SmoothFn) -> SmoothFn {
        let dim = self.dim;
        SmoothFn::sum(dim, vec![self, other])
    }

    pub fn mul(self, other: SmoothFn) -> SmoothFn {
        let dim = self.dim;
        let mut support: Option<Cuboid> = None;
        for s in [&self.support, &other.support].into_iter().flatten() {
            support = Some(match support {
                None => s.clone(),
                Some(acc) => match crate::geometry::box_intersect(&acc, s) {
                    Ok(Some(b)) => b,
                    _ => acc,
                },
            });
        }
        SmoothFn { dim, support, node: Node::Prod { children: vec![self, other] } }
    }

    pub fn scale(self, factor: f64) -> SmoothFn {
        let dim = self.dim;
        let support = self.support.clone();
        SmoothFn { dim, support, node: Node::Scale { factor, child: Box::new(self) } }
    }

    /// `self(M x + shift)` as a function of `x` in `dim` variables.
    pub fn pullback(self, dim: usize, matrix: Vec<Vec<f64>>, shift: Vec<f64>) -> Result<SmoothFn, EvalError> {
        if matrix.len() != self.dim || shift.len() != self.dim || matrix.iter().any(|r| r.len() != dim) {
            return Err(EvalError::DimensionMismatch { expected: self.dim, got: matrix.len() });
        }
        Ok(SmoothFn::leaf(dim, Node::AffinePullback { matrix, shift, child: Box::new(self) }))
    }

    /// Postcomposition `outer ∘ self`.
    pub fn compose(self, outer: Fn1D) -> SmoothFn {
        let dim = self.dim;
        let support = if outer.preserves_zero() { self.support.clone() } else { None };
        let inner = Box::new(self);
        let node = match outer {
            Fn1D::Chi { a, b } => Node::Chi { a, b, inner },
            Fn1D::Flatten { n } => Node::FlattenCutoff { n, inner },
            Fn1D::Exp { a, b } => Node::Exp1D { a, b, inner },
            Fn1D::Cos { freq, phase } => Node::Cos1D { freq, phase, inner },
            Fn1D::Log => Node::Log1D { inner },
            Fn1D::Pow { p } => Node::Pow1D { p, inner },
            Fn1D::ScaledChi { c } => Node::ScaledChi { c, inner },
        };
        SmoothFn { dim, support, node }
    }

    /// Planar pullback by `z ↦ 1/z`.
    pub fn inversion(self) -> Result<SmoothFn, EvalError> {
        if self.dim != 2 {
            return Err(EvalError::DimensionMismatch { expected: 2, got: self.dim });
        }
        Ok(SmoothFn::leaf(2, Node::Inversion { child: Box::new(self) }))
    }

    pub fn eval(&self, x: &[f64]) -> Result<Jet, EvalError> {
        if x.len() != self.dim {
            return Err(EvalError::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        let j = self.eval_unchecked(x)?;
        if !j.is_finite() {
            return Err(EvalError::Overflow("expression"));
        }
        Ok(j)
    }

    pub fn value(&self, x: &[f64]) -> Result<f64, EvalError> {
        Ok(self.eval(x)?.v)
    }

    fn eval_unchecked(&self, x: &[f64]) -> Result<Jet, EvalError> {
        if let Some(s) = &self.support {
            if !s.contains_open(x) {
                return Ok(Jet::ZERO);
            }
        }
        match &self.node {
            Node::Const { value } => Ok(Jet::constant(*value)),
            Node::Coord { axis } => {
                let mut j = Jet::constant(x[*axis]);
                j.g[*axis] = 1.0;
                Ok(j)
            }
            Node::AffinePullback { matrix, shift, child } => {
                let m = matrix.len();
                let y: Vec<f64> =
                    (0..m).map(|r| shift[r] + matrix[r].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).collect();
                let cj = child.eval_unchecked(&y)?;
                let n = self.dim;
                let mut out = Jet::constant(cj.v);
                for i in 0..n {
                    out.g[i] = (0..m).map(|r| matrix[r][i] * cj.g[r]).sum();
                    for j in 0..n {
                        let mut acc = 0.0;
                        for r in 0..m {
                            for s in 0..m {
                                acc += matrix[r][i] * cj.h[r][s] * matrix[s][j];
                            }
                        }
                        out.h[i][j] = acc;
                    }
                }
                Ok(out)
            }
            Node::Sum { children } => {
                let mut acc = Jet::ZERO;
                for c in children {
                    let j = c.eval_unchecked(x)?;
                    acc.add_assign(&j);
                }
                Ok(acc)
            }
            Node::Prod { children } => {
                let mut acc = Jet::constant(1.0);
                for c in children {
                    let j = c.eval_unchecked(x)?;
                    if j.is_zero() {
                        return Ok(Jet::ZERO);
                    }
                    acc = acc.times(&j);
                }
                Ok(acc)
            }
            Node::Scale { factor, child } => Ok(child.eval_unchecked(x)?.scaled(*factor)),
            Node::CubeBump { cube, peak } => Ok(cube_bump_jet(cube, peak, x)),
            Node::Chi { a, b, inner } => compose_eval(&Fn1D::Chi { a: *a, b: *b }, inner, x),
            Node::FlattenCutoff { n, inner } => compose_eval(&Fn1D::Flatten { n: *n }, inner, x),
            Node::Exp1D { a, b, inner } => compose_eval(&Fn1D::Exp { a: *a, b: *b }, inner, x),
            Node::Cos1D { freq, phase, inner } => compose_eval(&Fn1D::Cos { freq: *freq, phase: *phase }, inner, x),
            Node::Log1D { inner } => compose_eval(&Fn1D::Log, inner, x),
            Node::Pow1D { p, inner } => compose_eval(&Fn1D::Pow { p: *p }, inner, x),
            Node::ScaledChi { c, inner } => compose_eval(&Fn1D::ScaledChi { c: *c }, inner, x),
            Node::Inversion { child } => inversion_eval(child, x),
        }
    }

    /// Number of nodes in the tree.
    pub fn node_count(&self) -> usize {
        1 + match &self.node {
            Node::Const { .. } | Node::Coord { .. } | Node::CubeBump { .. } => 0,
            Node::Sum { children } | Node::Prod { children } => children.iter().map(|c| c.node_count()).sum(),
            Node::AffinePullback { child, .. } | Node::Scale { child, .. } | Node::Inversion { child } => {
                child.node_count()
            }
            Node::Chi { inner, .. }
            | Node::FlattenCutoff { inner, .. }
            | Node::Exp1D { inner, .. }
            | Node::Cos1D { inner, .. }
            | Node::Log1D { inner }
            | Node::Pow1D { inner, .. }
            | Node::ScaledChi { inner, .. } => inner.node_count(),
        }
    }
}

fn compose_eval(outer: &Fn1D, inner: &SmoothFn, x: &[f64]) -> Result<Jet, EvalError> {
    let j = inner.eval_unchecked(x)?;
    let f = outer.eval(j.v)?;
    if f == (0.0, 0.0, 0.0) {
        return Ok(Jet::ZERO);
    }
    Ok(j.compose(f))
}

fn inversion_eval(child: &SmoothFn, x: &[f64]) -> Result<Jet, EvalError> {
    let (a, b) = (x[0], x[1]);
    let r2 = a * a + b * b;
    if r2 == 0.0 {
        return Err(EvalError::Pole("inversion"));
    }
    // w = 1/z, w' = -1/z², w'' = 2/z³ as complex numbers.
    let w = [a / r2, -b / r2];
    let z2 = [a * a - b * b, 2.0 * a * b];
    let z2n = z2[0] * z2[0] + z2[1] * z2[1];
    let d1 = [-z2[0] / z2n, z2[1] / z2n];
    let z3 = [z2[0] * a - z2[1] * b, z2[0] * b + z2[1] * a];
    let z3n = z3[0] * z3[0] + z3[1] * z3[1];
    let d2 = [2.0 * z3[0] / z3n, -2.0 * z3[1] / z3n];
    let cj = child.eval_unchecked(&w)?;
    if cj.is_zero() {
        return Ok(Jet::ZERO);
    }
    // Jacobian rows: u = Re w, v = Im w.
    let jac = [[d1[0], -d1[1]], [d1[1], d1[0]]];
    // Second derivatives of u and v.
    let hu = [[d2[0], -d2[1]], [-d2[1], -d2[0]]];
    let hv = [[d2[1], d2[0]], [d2[0], -d2[1]]];
    let mut out = Jet::constant(cj.v);
    for i in 0..2 {
        out.g[i] = jac[0][i] * cj.g[0] + jac[1][i] * cj.g[1];
        for j in 0..2 {
            let mut acc = cj.g[0] * hu[i][j] + cj.g[1] * hv[i][j];
            for r in 0..2 {
                for s in 0..2 {
                    acc += jac[r][i] * cj.h[r][s] * jac[s][j];
                }
            }
            out.h[i][j] = acc;
        }
    }
    Ok(out)
}

fn cube_bump_jet(cube: &Cuboid, peak: &[f64], x: &[f64]) -> Jet {
    let n = cube.dim();
    let mut e_sum = 0.0;
    let mut d1 = [0.0; 3];
    let mut d2 = [0.0; 3];
    let mut inv_w = [0.0; 3];
    for i in 0..n {
        let c = 0.5 * (cube.lo[i] + cube.hi[i]);
        let w = 0.5 * (cube.hi[i] - cube.lo[i]);
        let t = (x[i] - c) / w;
        if t <= -1.0 || t >= 1.0 {
            return Jet::ZERO;
        }
        let u = t - peak[i];
        let s = 1.0 - t * t;
        let e = -u * u / s;
        let nn = 2.0 * u * s + 2.0 * t * u * u;
        let e1 = -nn / (s * s);
        let e2 = -((2.0 * s + 2.0 * u * u) * s + 4.0 * t * nn) / (s * s * s);
        e_sum += e;
        d1[i] = e1;
        d2[i] = e2;
        inv_w[i] = 1.0 / w;
    }
    if e_sum < FLUSH_EXPONENT {
        return Jet::ZERO;
    }
    let rho = e_sum.exp();
    let mut out = Jet::constant(rho);
    for i in 0..n {
        out.g[i] = rho * d1[i] * inv_w[i];
        for j in 0..n {
            out.h[i][j] = if i == j {
                rho * (d2[i] + d1[i] * d1[i]) * inv_w[i] * inv_w[i]
            } else {
                rho * d1[i] * d1[j] * inv_w[i] * inv_w[j]
            };
        }
    }
    out
}

/// Product bump on `b` peaking at the interior point `q`, zero outside `b`.
pub fn cube_bump(b: &Cuboid, q: &[f64]) -> Result<SmoothFn, EvalError> {
    if q.len() != b.dim() {
        return Err(EvalError::DimensionMismatch { expected: b.dim(), got: q.len() });
    }
    if !b.contains_open(q) {
        return Err(EvalError::Invalid("bump peak must lie strictly inside the box".into()));
    }
    let peak: Vec<f64> =
        (0..b.dim()).map(|i| (q[i] - 0.5 * (b.lo[i] + b.hi[i])) / (0.5 * (b.hi[i] - b.lo[i]))).collect();
    Ok(SmoothFn { dim: b.dim(), support: Some(b.clone()), node: Node::CubeBump { cube: b.clone(), peak } })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_square() -> Cuboid {
        Cuboid::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap()
    }

    #[test]
    fn constant_has_zero_derivatives() {
        let j = SmoothFn::constant(2, 3.0).eval(&[0.3, -7.0]).unwrap();
        assert_eq!(j, Jet::constant(3.0));
    }

    #[test]
    fn square_of_coordinate() {
        let f = SmoothFn::coord(2, 0).mul(SmoothFn::coord(2, 0));
        let j = f.eval(&[2.0, 5.0]).unwrap();
        assert_eq!(j.v, 4.0);
        assert_eq!(&j.g[..2], &[4.0, 0.0]);
        assert_eq!(j.h[0][0], 2.0);
        assert_eq!(j.h[1][1], 0.0);
        assert_eq!(j.h[0][1], 0.0);
    }

    #[test]
    fn bump_peak_and_boundary() {
        let rho = cube_bump(&unit_square(), &[0.0, 0.0]).unwrap();
        assert_eq!(rho.value(&[0.0, 0.0]).unwrap(), 1.0);
        assert!(rho.eval(&[1.0, 0.3]).unwrap().is_zero());
        assert!(rho.eval(&[3.0, 0.3]).unwrap().is_zero());
        let g = rho.eval(&[0.0, 0.0]).unwrap().g;
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 0.0);
    }

    #[test]
    fn bump_rejects_boundary_peak() {
        assert!(cube_bump(&unit_square(), &[1.0, 0.0]).is_err());
    }

    #[test]
    fn convexifier_values() {
        let chi = convexifier(1.0, 1.0);
        assert_eq!(chi.eval(-0.5).unwrap(), (0.0, 0.0, 0.0));
        let (f, f1, f2) = chi.eval(1.0).unwrap();
        assert_eq!(f, 1.0);
        assert!((f1 - 2.0).abs() < 1e-15);
        assert!((f2 - 2.0).abs() < 1e-15);
        // Finite-difference confirmation.
        let s = 1e-4;
        let fd1 = (chi.eval(1.0 + s).unwrap().0 - chi.eval(1.0 - s).unwrap().0) / (2.0 * s);
        let fd2 = (chi.eval(1.0 + s).unwrap().0 - 2.0 + chi.eval(1.0 - s).unwrap().0) / (s * s);
        assert!((fd1 - 2.0).abs() < 1e-7);
        assert!((fd2 - 2.0).abs() < 1e-5);
    }

    #[test]
    fn convexifier_flushes_small_arguments() {
        let chi = convexifier(1.0, 1.0);
        assert_eq!(chi.eval(1e-3).unwrap(), (0.0, 0.0, 0.0));
        assert!(chi.eval(800.0).is_err());
    }

    #[test]
    fn flatten_plateau_and_identity() {
        let n = 1.7;
        let lam = flatten_cutoff(n);
        assert_eq!(lam.eval(0.5 * n).unwrap().0, 2.0 * n);
        assert_eq!(lam.eval(4.0 * n).unwrap().0, 4.0 * n);
        let (v, d1, _) = lam.eval(2.0 * n).unwrap();
        assert!(d1 > 0.0 && d1 < 1.0);
        assert!((d1 - 0.5).abs() < 1e-12);
        assert!(v > 2.0 * n && v < 2.5 * n);
        // Independent midpoint-rule oracle for the integral part.
        let m = 200_000;
        let mut acc = 0.0;
        for k in 0..m {
            let xi = 0.5 * (k as f64 + 0.5) / m as f64;
            acc += step(xi).0;
        }
        acc *= 0.5 / m as f64;
        assert!((v - 2.0 * n - 2.0 * n * acc).abs() < 1e-10);
        // Continuity at both joints.
        assert!((lam.eval(3.0 * n - 1e-12).unwrap().0 - 3.0 * n).abs() < 1e-9);
        assert!((lam.eval(n + 1e-12).unwrap().0 - 2.0 * n).abs() < 1e-9);
    }

    #[test]
    fn sum_with_negation_vanishes() {
        let f = cube_bump(&unit_square(), &[0.2, -0.1]).unwrap().compose(convexifier(1.0, 1.0));
        let g = f.clone().add(f.clone().scale(-1.0));
        for x in [[0.1, 0.1], [0.5, -0.7], [-0.9, 0.0]] {
            assert_eq!(g.value(&x).unwrap(), 0.0);
        }
    }

    #[test]
    fn pullback_shift() {
        let f = SmoothFn::coord(1, 0).pullback(1, vec![vec![1.0]], vec![1.0]).unwrap();
        assert_eq!(f.value(&[0.0]).unwrap(), 1.0);
    }

    #[test]
    fn inversion_of_coordinate() {
        let f = SmoothFn::coord(2, 0).inversion().unwrap();
        let j = f.eval(&[2.0, 0.0]).unwrap();
        assert_eq!(j.v, 0.5);
        assert!((j.g[0] + 0.25).abs() < 1e-15);
        assert!((j.h[0][0] - 0.25).abs() < 1e-15);
        assert!(f.eval(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn support_propagation() {
        let a = cube_bump(&unit_square(), &[0.0, 0.0]).unwrap();
        let b = cube_bump(&Cuboid::new(vec![0.0, 0.0], vec![3.0, 2.0]).unwrap(), &[1.0, 1.0]).unwrap();
        let s = a.clone().add(b.clone());
        assert_eq!(s.support.unwrap(), Cuboid::new(vec![-1.0, -1.0], vec![3.0, 2.0]).unwrap());
        let p = a.mul(b);
        assert_eq!(p.support.unwrap(), Cuboid::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap());
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let f = cube_bump(&unit_square(), &[0.1234567890123, -0.3])
            .unwrap()
            .compose(convexifier(1.0, 1.3))
            .scale(std::f64::consts::PI * 1e-7)
            .add(SmoothFn::coord(2, 1).compose(Fn1D::Cos { freq: 0.1 + 0.2, phase: 1e-300 }));
        let text = serde_json::to_string(&f).unwrap();
        let back: SmoothFn = serde_json::from_str(&text).unwrap();
        assert_eq!(f, back);
        let x = [0.3, 0.2];
        assert_eq!(f.eval(&x).unwrap(), back.eval(&x).unwrap());
    }
}
