//! Scalar curvature of Hermitian line bundles over Riemann surfaces, built
//! chart by chart: a surface is a set of planar charts with conformal metric
//! weights, and a bundle metric is stored through `u = -log|frame|²_h`.

use crate::construct::{
    check_points, global_subsolution, Certificate, CondKind, Condition, ConstructError, Disk, FloorSpec, Region,
    Settings,
};
use crate::geometry::{DomainSpec, GeometryError, GridDomain, Shape};
use crate::operator::{hermitian_laplacian, EllipticOperator, OperatorError};
use crate::smoothfn::{flatten_cutoff, EvalError, Fn1D, SmoothFn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Samples closer than this many cells to a divisor point skip the pole formula.
pub const FLUSH_CELLS: f64 = 3.0;
/// Tolerance of the near-divisor band check `R_h ≥ 1 - tol`.
pub const BAND_TOL: f64 = 1e-3;
/// Relative tolerance for the gluing and transition checks.
pub const GLUE_TOL: f64 = 1e-9;

/// Plateau level of the cutoff that flattens the local weight away from the divisor.
const ALPHA_FLAT: f64 = 0.125;
/// Plateau level of the cutoff that caps the divisor potential inside `V`.
const BETA_FLAT: f64 = 1.0;
/// Gap kept below the level `N` off the neighborhood `U`.
const SANDWICH_MARGIN: f64 = 0.05;
const U_RADII: [f64; 5] = [1.0, 0.75, 0.5, 0.375, 0.25];
const LEVEL_CAP: u32 = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HermitianError {
    #[error(transparent)]
    Construct(#[from] ConstructError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("point {0:?} lies within the flush radius of a divisor point")]
    PoleProximity(Vec<f64>),
    #[error("divisor point {0:?} lies outside the sampled part of the first chart")]
    RootsOutside(Vec<f64>),
    #[error("no neighborhood of the divisor satisfies the level sandwich")]
    NoRoom,
    #[error("invalid atlas: {0}")]
    Atlas(String),
}

type Result<T> = std::result::Result<T, HermitianError>;

/// How a chart's coordinate relates to the coordinate `z` of chart 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChartMap {
    Identity,
    /// `w = 1/z`.
    Inversion,
}

impl ChartMap {
    /// Coordinates in chart 0 of the point `x` of this chart.
    pub fn to_base(&self, x: &[f64]) -> Option<[f64; 2]> {
        match self {
            ChartMap::Identity => Some([x[0], x[1]]),
            ChartMap::Inversion => {
                let r2 = x[0] * x[0] + x[1] * x[1];
                (r2 > 0.0).then(|| [x[0] / r2, -x[1] / r2])
            }
        }
    }

    /// Coordinates in this chart of the chart-0 point `z`.
    pub fn from_base(&self, z: &[f64]) -> Option<[f64; 2]> {
        self.to_base(z)
    }

    /// `log|dz/dw|²` at the chart point `x`.
    fn log_jacobian(&self, x: &[f64]) -> f64 {
        match self {
            ChartMap::Identity => 0.0,
            ChartMap::Inversion => -2.0 * (x[0] * x[0] + x[1] * x[1]).ln(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceChart {
    pub id: String,
    pub domain: GridDomain,
    /// Conformal weight `g > 0`: the metric is `g |dz|²`.
    pub metric: SmoothFn,
    pub map: ChartMap,
}

impl SurfaceChart {
    /// `Δ_g = (1/g) ∂²/∂z∂z̄`, with positivity of `g` checked at cell centers.
    pub fn operator(&self) -> Result<EllipticOperator> {
        let centers: Vec<Vec<f64>> = self.domain.mask_set().cells.iter().map(|&c| self.domain.cell_center(c)).collect();
        Ok(hermitian_laplacian(self.metric.clone(), &centers)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atlas {
    pub charts: Vec<SurfaceChart>,
}

/// `log(1 + |z|²)`.
fn fubini_study_potential() -> SmoothFn {
    lin(1.0, 0.0, 0.0).add(sq_norm()).compose(Fn1D::Log)
}

impl Atlas {
    pub fn plane(id: &str, domain: GridDomain, metric: SmoothFn) -> Atlas {
        Atlas { charts: vec![SurfaceChart { id: id.into(), domain, metric, map: ChartMap::Identity }] }
    }

    /// Riemann sphere covered by the disks `|z| ≤ radius` and `|w| ≤ radius`,
    /// `w = 1/z`, with the Fubini-Study metric `(1 + |z|²)^-2 |dz|²` unless a
    /// chart-0 weight is given; the chart-1 weight is then its transform.
    pub fn sphere(radius: f64, h: f64, metric: Option<SmoothFn>) -> Result<Atlas> {
        if !(radius > 1.0) {
            return Err(HermitianError::Atlas("chart disks must overlap (radius > 1)".into()));
        }
        let disk = |h: f64| -> Result<GridDomain> {
            let spec = DomainSpec {
                dim: 2,
                window: crate::geometry::Cuboid::new(vec![-radius, -radius], vec![radius, radius])?,
                h,
                shape: Shape::Ball { center: vec![0.0, 0.0], radius },
                faces: Default::default(),
                margin: 8,
                ends: None,
            };
            Ok(crate::geometry::mask_from_spec(&spec)?)
        };
        let fs = sq_norm().add(lin(1.0, 0.0, 0.0)).compose(Fn1D::Pow { p: -2.0 });
        let (g_z, g_w) = match metric {
            None => (fs.clone(), fs),
            Some(g) => {
                let w = g.clone().inversion()?.mul(sq_norm().compose(Fn1D::Pow { p: -2.0 }));
                (g, w)
            }
        };
        Ok(Atlas {
            charts: vec![
                SurfaceChart { id: "z".into(), domain: disk(h)?, metric: g_z, map: ChartMap::Identity },
                SurfaceChart { id: "w".into(), domain: disk(h)?, metric: g_w, map: ChartMap::Inversion },
            ],
        })
    }

    fn is_sphere(&self) -> bool {
        self.charts.len() == 2 && self.charts[0].map == ChartMap::Identity && self.charts[1].map == ChartMap::Inversion
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivisorPoint {
    pub re: f64,
    pub im: f64,
    pub mult: u32,
}

impl DivisorPoint {
    fn z(&self) -> [f64; 2] {
        [self.re, self.im]
    }
}

/// Bundle metric as `u = -log|frame|²_h` per chart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HermitianWeight {
    /// Degree of the bundle; frames change by `e_z = z^-degree e_w`.
    pub degree: i32,
    pub u: Vec<SmoothFn>,
    /// Per chart, a representative that stays smooth across the divisor.
    pub near: Vec<Option<SmoothFn>>,
    pub divisor: Vec<DivisorPoint>,
    pub flush_radius: f64,
}

impl HermitianWeight {
    /// Weight given directly on every chart.
    pub fn smooth(degree: i32, u: Vec<SmoothFn>) -> HermitianWeight {
        let near = vec![None; u.len()];
        HermitianWeight { degree, u, near, divisor: vec![], flush_radius: 0.0 }
    }

    /// Chart-`k` coordinates of the divisor points.
    fn poles_in(&self, map: ChartMap) -> Vec<[f64; 2]> {
        self.divisor.iter().filter_map(|p| map.from_base(&p.z())).collect()
    }
}

/// `R_h = Δ_g u` at a chart point.
pub fn scalar_curvature(atlas: &Atlas, weight: &HermitianWeight, chart: usize, z: &[f64]) -> Result<f64> {
    let c = atlas.charts.get(chart).ok_or_else(|| HermitianError::Atlas(format!("no chart {chart}")))?;
    for p in weight.poles_in(c.map) {
        if ((z[0] - p[0]).powi(2) + (z[1] - p[1]).powi(2)).sqrt() <= weight.flush_radius {
            return Err(HermitianError::PoleProximity(z.to_vec()));
        }
    }
    let op = c.operator()?;
    Ok(op.apply(&weight.u[chart], z)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionReport {
    /// Largest `|u_k - (u_0 - degree·log|z|²)|`, relative to `max(|·|, 1)`.
    pub weight_err: f64,
    /// Largest relative mismatch of `g_k` against `g_0 |dz/dw|²`.
    pub metric_err: f64,
    pub max_rel_err: f64,
    pub argmax: Vec<f64>,
    pub samples: usize,
}

/// Compares every chart with chart 0 on the samples they share.
pub fn chart_transition_check(atlas: &Atlas, weight: &HermitianWeight, density: usize) -> Result<TransitionReport> {
    let base = &atlas.charts[0];
    let mut report =
        TransitionReport { weight_err: 0.0, metric_err: 0.0, max_rel_err: 0.0, argmax: vec![], samples: 0 };
    for (k, chart) in atlas.charts.iter().enumerate().skip(1) {
        let pts: Vec<(Vec<f64>, [f64; 2])> = chart
            .domain
            .mask_set()
            .cells
            .iter()
            .flat_map(|&c| {
                let mut v = Vec::new();
                chart.domain.cell_samples(c, density, &mut v);
                v
            })
            .filter_map(|x| chart.map.to_base(&x).filter(|z| base.domain.in_mask(z)).map(|z| (x, z)))
            .collect();
        let errs: Vec<(f64, f64)> = pts
            .par_iter()
            .map(|(x, z)| -> Result<(f64, f64)> {
                let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1.0);
                let u_k = weight.u[k].value(x)?;
                let u_0 = weight.u[0].value(z)?;
                // For the inversion log|dz/dw|² = 2 log|z|².
                let log_z2 = 0.5 * chart.map.log_jacobian(x);
                let e_u = rel(u_k, u_0 - weight.degree as f64 * log_z2);
                let g_k = chart.metric.value(x)?;
                let g_0 = base.metric.value(z)? * chart.map.log_jacobian(x).exp();
                Ok((e_u, (g_k - g_0).abs() / g_k.abs().max(g_0.abs())))
            })
            .collect::<Result<_>>()?;
        for ((x, _), (eu, eg)) in pts.iter().zip(&errs) {
            report.weight_err = report.weight_err.max(*eu);
            report.metric_err = report.metric_err.max(*eg);
            if eu.max(*eg) > report.max_rel_err || report.argmax.is_empty() {
                report.max_rel_err = report.max_rel_err.max(eu.max(*eg));
                report.argmax = x.clone();
            }
        }
        report.samples += pts.len();
    }
    Ok(report)
}

/// Smallest sampled curvature `Δ_g u` over the chart's check points.
fn min_curvature(op: &EllipticOperator, u: &SmoothFn, pts: &[Vec<f64>]) -> Result<f64> {
    let vals: Vec<f64> = pts.par_iter().map(|x| op.apply(u, x)).collect::<std::result::Result<_, _>>()?;
    Ok(vals.into_iter().fold(f64::INFINITY, f64::min))
}

/// Positive curvature on a chart with ends: `u_h = ψ(φ) + u_k` with `ψ` a
/// rescaled convexifier and `φ` a strict subsolution of
/// `Δ_g φ > 1 + max(0, -min R_k)`.
pub fn positive_metric_noncompact(
    atlas: &Atlas,
    u_k: &SmoothFn,
    settings: &Settings,
) -> Result<(HermitianWeight, Certificate)> {
    if atlas.charts.len() != 1 {
        return Err(HermitianError::Atlas("the noncompact branch takes a single chart".into()));
    }
    let chart = &atlas.charts[0];
    let domain = &chart.domain;
    let op = chart.operator()?;
    let pts = check_points(domain, settings.density);
    let min_rk = min_curvature(&op, u_k, &pts)?;
    let rho = 1.0 + (-min_rk).max(0.0);
    let (phi, _) = global_subsolution(domain, &op, &FloorSpec::constant(rho), settings)?;

    // (χ(c(φ - lo) + 1) - χ(1))/c has slope χ' ≥ χ'(1) = 2 wherever φ ≥ lo;
    // the argument stays in [1, 2] on the samples.
    let vals: Vec<f64> = pts.par_iter().map(|x| phi.value(x)).collect::<std::result::Result<_, _>>()?;
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let c = 1.0 / (hi - lo).max(1.0);
    let lifted = phi.add(SmoothFn::constant(2, -lo)).compose(Fn1D::ScaledChi { c });
    let u_h = lifted.add(u_k.clone());

    let mut cert = Certificate::new(domain.clone(), op, settings.density);
    let f = cert.add_function(u_h.clone());
    cert.conditions = vec![Condition::new("R_h_pos", f, Region::mask(), CondKind::AfGt, FloorSpec::constant(0.0))];
    cert.constants.extra.insert("min_R_k".into(), min_rk);
    cert.constants.extra.insert("rho".into(), rho);
    cert.constants.extra.insert("chi_scale".into(), c);
    cert.finalize()?;
    Ok((HermitianWeight::smooth(0, vec![u_h]), cert))
}

fn lin(c0: f64, cx: f64, cy: f64) -> SmoothFn {
    SmoothFn::constant(2, c0).add(SmoothFn::coord(2, 0).scale(cx)).add(SmoothFn::coord(2, 1).scale(cy))
}

fn square(f: SmoothFn) -> SmoothFn {
    f.clone().mul(f)
}

/// `|z|²`.
fn sq_norm() -> SmoothFn {
    square(SmoothFn::coord(2, 0)).add(square(SmoothFn::coord(2, 1)))
}

/// `|z - r|²` in chart 0.
fn sq_dist(r: [f64; 2]) -> SmoothFn {
    square(lin(-r[0], 1.0, 0.0)).add(square(lin(-r[1], 0.0, 1.0)))
}

/// `|1 - r w|²` in chart 1.
fn sq_dist_dual(r: [f64; 2]) -> SmoothFn {
    let (a, b) = (r[0], r[1]);
    square(lin(1.0, -a, b)).add(square(lin(0.0, -b, -a)))
}

fn dist(a: &[f64], b: &[f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// One sample with its chart, chart-0 position and cached curvature data.
struct Sample {
    chart: usize,
    x: Vec<f64>,
    z: Option<[f64; 2]>,
    r_k: f64,
}

/// Choices that make `α` and the level `N` work for given radii.
struct Plan {
    a: f64,
    quad: f64,
    c: f64,
    shift: f64,
    level: f64,
    r_u: f64,
    r_v: f64,
    alpha: [SmoothFn; 2],
}

/// Data shared by the parameter search.
struct DivisorSetup<'a> {
    roots: Vec<[f64; 2]>,
    ops: &'a [EllipticOperator],
    samples: &'a [Sample],
    /// `u_k - log|s|²` per sample (chart-independent).
    base_t: Vec<f64>,
}

impl DivisorSetup<'_> {
    fn near(&self, s: &Sample, r: f64) -> bool {
        s.z.is_some_and(|z| self.roots.iter().any(|q| dist(&z, q) < r))
    }

    fn apply_all(&self, f: &[SmoothFn; 2]) -> Result<Vec<(f64, f64)>> {
        self.samples
            .par_iter()
            .map(|s| {
                let j = f[s.chart].eval(&s.x)?;
                Ok((j.v, self.ops[s.chart].coefficients(&s.x)?.apply(&j, 2)))
            })
            .collect()
    }

    fn plan(&self, r_u: f64, r_v: f64) -> Result<Option<Plan>> {
        let in_u: Vec<bool> = self.samples.iter().map(|s| self.near(s, r_u)).collect();
        let in_v: Vec<bool> = self.samples.iter().map(|s| self.near(s, r_v)).collect();
        if !in_v.iter().any(|v| *v) {
            return Ok(None);
        }
        // log(δ² + |z - r|²) concentrates positive curvature on V; |z - r|²
        // tops it up on U.
        let delta2 = r_v * r_v;
        let mut logs = Vec::new();
        let mut quads = Vec::new();
        for &r in &self.roots {
            logs.push(sq_dist(r).add(SmoothFn::constant(2, delta2)).compose(Fn1D::Log));
            quads.push(sq_dist(r));
        }
        let both = |f: SmoothFn| -> Result<[SmoothFn; 2]> { Ok([f.clone(), f.inversion()?]) };
        let log_sum = both(SmoothFn::sum(2, logs))?;
        let quad_sum = both(SmoothFn::sum(2, quads))?;
        let l1 = self.apply_all(&log_sum)?;
        let q1 = self.apply_all(&quad_sum)?;

        let pick = |ladder: &[f64], ok: &dyn Fn(f64) -> bool| ladder.iter().copied().find(|&v| ok(v));
        let a_ladder: Vec<f64> = (-6..=3).map(|k| 2f64.powi(k)).collect();
        let a =
            pick(&a_ladder, &|a| self.samples.iter().enumerate().all(|(i, s)| !in_v[i] || a * l1[i].1 + s.r_k > 2.0));
        let Some(a) = a else { return Ok(None) };
        let mut q_ladder = vec![0.0];
        q_ladder.extend((-4..=6).map(|k| 2f64.powi(k)));
        let quad = pick(&q_ladder, &|q| {
            self.samples.iter().enumerate().all(|(i, s)| !in_u[i] || a * l1[i].1 + q * q1[i].1 + s.r_k > 0.0)
        });
        let Some(quad) = quad else { return Ok(None) };

        // α = 2n - λ_n(C - α_raw): equal to α_raw - C + 2n on U, constant 0 far out.
        let raw: Vec<f64> = (0..self.samples.len()).map(|i| a * l1[i].0 + quad * q1[i].0).collect();
        let c =
            (0..raw.len()).filter(|&i| in_u[i]).map(|i| raw[i]).fold(f64::NEG_INFINITY, f64::max) + 3.0 * ALPHA_FLAT;
        let alpha_of = |k: usize| {
            SmoothFn::constant(2, c)
                .add(log_sum[k].clone().scale(-a))
                .add(quad_sum[k].clone().scale(-quad))
                .compose(flatten_cutoff(ALPHA_FLAT))
                .scale(-1.0)
                .add(SmoothFn::constant(2, 2.0 * ALPHA_FLAT))
        };
        let alpha = [alpha_of(0), alpha_of(1)];
        let t0: Vec<f64> = self
            .samples
            .par_iter()
            .zip(&self.base_t)
            .map(|(s, bt)| Ok(alpha[s.chart].value(&s.x)? + bt))
            .collect::<Result<_>>()?;
        let t_off = (0..t0.len()).filter(|&i| !in_u[i]).map(|i| t0[i]).fold(f64::NEG_INFINITY, f64::max);
        let shift = 1.0 - SANDWICH_MARGIN - t_off;
        let t_v = (0..t0.len()).filter(|&i| in_v[i]).map(|i| t0[i]).fold(f64::INFINITY, f64::min) + shift;
        // Smallest N with {t ≥ N} ⊂ U and V ⊂ {t > 3N} on the samples.
        let level = (0..=LEVEL_CAP).map(|k| 2f64.powi(k as i32)).find(|&n| {
            let sandwich = (0..t0.len()).all(|i| in_u[i] || t0[i] + shift < n);
            sandwich && t_v > 3.0 * n
        });
        Ok(level.map(|level| Plan { a, quad, c, shift, level, r_u, r_v, alpha }))
    }
}

/// Positive curvature on the sphere for the bundle of a polynomial section
/// `s` with the given roots, starting from the weight `d·log(1 + |z|²) + η`.
pub fn positive_metric_divisor(
    atlas: &Atlas,
    roots: &[DivisorPoint],
    eta: &SmoothFn,
    settings: &Settings,
) -> Result<(HermitianWeight, Certificate)> {
    if !atlas.is_sphere() {
        return Err(HermitianError::Atlas("the divisor branch needs the two-chart sphere".into()));
    }
    if roots.is_empty() || roots.iter().any(|r| r.mult == 0) {
        return Err(HermitianError::Atlas("the section needs at least one root of positive multiplicity".into()));
    }
    let (c0, c1) = (&atlas.charts[0], &atlas.charts[1]);
    let h = c0.domain.h;
    let flush = FLUSH_CELLS * h;
    for r in roots {
        let z = r.z();
        let seen_by_w = c1.map.from_base(&z).is_some_and(|w| c1.domain.in_mask(&w));
        if !c0.domain.in_mask(&z) || seen_by_w {
            return Err(HermitianError::RootsOutside(z.to_vec()));
        }
    }
    let degree: u32 = roots.iter().map(|r| r.mult).sum();
    let d = degree as f64;
    let mut distinct: Vec<[f64; 2]> = Vec::new();
    for r in roots {
        if !distinct.contains(&r.z()) {
            distinct.push(r.z());
        }
    }

    // Chart-wise pieces: k-weight and log|s|² in the frame of each chart.
    let fs = fubini_study_potential();
    let u_k = [fs.clone().scale(d).add(eta.clone()), fs.clone().scale(d).add(eta.clone().inversion()?)];
    let log_s = [
        SmoothFn::sum(2, roots.iter().map(|r| sq_dist(r.z()).compose(Fn1D::Log).scale(r.mult as f64)).collect()),
        SmoothFn::sum(2, roots.iter().map(|r| sq_dist_dual(r.z()).compose(Fn1D::Log).scale(r.mult as f64)).collect()),
    ];
    let ops = [c0.operator()?, c1.operator()?];
    let mut samples = Vec::new();
    for (k, chart) in atlas.charts.iter().enumerate() {
        for x in check_points(&chart.domain, settings.density) {
            let z = chart.map.to_base(&x);
            samples.push(Sample { chart: k, x, z, r_k: 0.0 });
        }
    }
    let cached: Vec<(f64, f64)> = samples
        .par_iter()
        .map(|s| -> Result<(f64, f64)> {
            let r_k = ops[s.chart].apply(&u_k[s.chart], &s.x)?;
            Ok((r_k, u_k[s.chart].value(&s.x)? - log_s[s.chart].value(&s.x)?))
        })
        .collect::<Result<_>>()?;
    for (s, (r_k, _)) in samples.iter_mut().zip(&cached) {
        s.r_k = *r_k;
    }
    let min_rk = cached.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
    let setup = DivisorSetup {
        roots: distinct.clone(),
        ops: &ops,
        samples: &samples,
        base_t: cached.iter().map(|c| c.1).collect(),
    };

    // V must stay inside chart 0 and away from chart 1.
    let reach = distinct.iter().map(|r| (r[0] * r[0] + r[1] * r[1]).sqrt()).fold(0.0, f64::max);
    let w_edge = 1.0 / c1.domain.window.hi[0];
    let mut plan = None;
    'search: for &r_u in &U_RADII {
        let mut r_v = 0.5 * r_u;
        while r_v >= h {
            if reach + r_v < w_edge {
                if let Some(p) = setup.plan(r_u, r_v)? {
                    plan = Some(p);
                    break 'search;
                }
            }
            r_v *= 0.5;
        }
    }
    let plan = plan.ok_or(HermitianError::NoRoom)?;
    let v_disks: Vec<Disk> = distinct.iter().map(|r| Disk { center: r.to_vec(), radius: plan.r_v }).collect();
    let in_v: Vec<bool> = samples.iter().map(|s| setup.near(s, plan.r_v)).collect();

    // β = M - λ(M - f), f = mean of log((1 + |z|²)/|z - r|²): Δ_g f > 0 off
    // the roots, β = f off V and constant near the roots.
    let jn = distinct.len() as f64;
    let f = [
        SmoothFn::sum(2, distinct.iter().map(|r| fs.clone().add(sq_dist(*r).compose(Fn1D::Log).scale(-1.0))).collect())
            .scale(1.0 / jn),
        SmoothFn::sum(
            2,
            distinct.iter().map(|r| fs.clone().add(sq_dist_dual(*r).compose(Fn1D::Log).scale(-1.0))).collect(),
        )
        .scale(1.0 / jn),
    ];
    let f_vals = setup.apply_all(&f)?;
    let m = (0..samples.len()).filter(|&i| !in_v[i]).map(|i| f_vals[i].0).fold(f64::NEG_INFINITY, f64::max)
        + 3.0 * BETA_FLAT
        + SANDWICH_MARGIN;
    let beta_of = |k: usize| {
        SmoothFn::constant(2, m)
            .add(f[k].clone().scale(-1.0))
            .compose(flatten_cutoff(BETA_FLAT))
            .scale(-1.0)
            .add(SmoothFn::constant(2, m))
    };
    let beta = [beta_of(0), beta_of(1)];
    let beta_lap = setup.apply_all(&beta)?;
    let worst = beta_lap.iter().map(|b| b.1).fold(0.0, f64::min);
    let mut eps = 1.0;
    while eps * worst <= -0.5 {
        eps *= 0.5;
    }

    // γ = λ_N(α + shift + u_k - log|s|²) + εβ; u_h = γ + log|s|² off the
    // divisor, and α + shift + εβ + u_k near it.
    let gamma = |k: usize| {
        plan.alpha[k]
            .clone()
            .add(SmoothFn::constant(2, plan.shift))
            .add(u_k[k].clone())
            .add(log_s[k].clone().scale(-1.0))
            .compose(flatten_cutoff(plan.level))
            .add(beta[k].clone().scale(eps))
    };
    let u_h = [gamma(0).add(log_s[0].clone()), gamma(1).add(log_s[1].clone())];
    let near = plan.alpha[0]
        .clone()
        .add(SmoothFn::constant(2, plan.shift))
        .add(beta[0].clone().scale(eps))
        .add(u_k[0].clone());
    let transported = u_h[0].clone().inversion()?.add(sq_norm().compose(Fn1D::Log).scale(d));

    let mut cert = Certificate::new(c0.domain.clone(), ops[0].clone(), settings.density);
    cert.domains.push(c1.domain.clone());
    cert.operators.push(ops[1].clone());
    let fz = cert.add_function(u_h[0].clone());
    let fnear = cert.add_function(near.clone());
    let fw = cert.add_function(u_h[1].clone());
    let ft = cert.add_function(transported);
    let on = |mut c: Condition, chart: usize| {
        c.domain = chart;
        if c.op.is_some() {
            c.op = Some(chart);
        }
        c
    };
    let roots_only: Vec<Disk> = distinct.iter().map(|r| Disk { center: r.to_vec(), radius: 0.0 }).collect();
    let flush_disks: Vec<Disk> = distinct.iter().map(|r| Disk { center: r.to_vec(), radius: flush }).collect();
    let overlap_hole = Disk { center: vec![0.0, 0.0], radius: 1.0 / c0.domain.window.hi[0] };
    cert.conditions = vec![
        on(
            Condition::new(
                "gluing_agrees_on_V",
                fz,
                Region::mask().within(v_disks.clone()).excluding_disks(roots_only),
                CondKind::ExpAgree { other: fnear, rel: GLUE_TOL },
                FloorSpec::constant(0.0),
            ),
            0,
        ),
        on(
            Condition::new(
                "R_h_pos_z",
                fz,
                Region::mask().excluding_disks(flush_disks),
                CondKind::AfGt,
                FloorSpec::constant(0.0),
            ),
            0,
        ),
        on(Condition::new("R_h_pos_w", fw, Region::mask(), CondKind::AfGt, FloorSpec::constant(0.0)), 1),
        on(
            Condition::new(
                "R_h_band_near_Y",
                fnear,
                Region::mask().within(v_disks),
                CondKind::AfGt,
                FloorSpec::constant(1.0 - BAND_TOL),
            ),
            0,
        ),
        on(
            Condition::new(
                "chart_transition",
                fw,
                Region::mask().excluding_disks(vec![overlap_hole]),
                CondKind::Agree { other: ft, rel: GLUE_TOL },
                FloorSpec::constant(0.0),
            ),
            1,
        ),
    ];
    cert.constants.n = Some(plan.level);
    cert.constants.eps = vec![eps];
    let extra = &mut cert.constants.extra;
    extra.insert("min_R_k".into(), min_rk);
    extra.insert("alpha_log".into(), plan.a);
    extra.insert("alpha_quad".into(), plan.quad);
    extra.insert("alpha_c".into(), plan.c);
    extra.insert("shift".into(), plan.shift);
    extra.insert("r_U".into(), plan.r_u);
    extra.insert("r_V".into(), plan.r_v);
    extra.insert("beta_cap".into(), m);
    extra.insert("flush_radius".into(), flush);
    cert.finalize()?;
    let weight = HermitianWeight {
        degree: degree as i32,
        u: u_h.to_vec(),
        near: vec![Some(near), None],
        divisor: roots.to_vec(),
        flush_radius: flush,
    };
    Ok((weight, cert))
}
