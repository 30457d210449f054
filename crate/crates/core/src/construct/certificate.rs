//! Serializable certificates: a set of functions plus sampled inequalities.

use super::ConstructError;
use crate::geometry::{CellSet, Cuboid, GridDomain};
use crate::operator::{Coeffs, EllipticOperator};
use crate::smoothfn::{EvalError, SmoothFn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Default relative tolerance for sampled inequalities.
pub const BASE_TOL: f64 = 1e-9;

/// Floor functions for strict inequalities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FloorSpec {
    Const {
        value: f64,
    },
    /// `1 / (distance to the margin strip in cells + 1)`.
    EndProxy,
    Expr {
        f: SmoothFn,
    },
    Affine {
        scale: f64,
        shift: f64,
        base: Box<FloorSpec>,
    },
}

impl FloorSpec {
    pub fn constant(value: f64) -> FloorSpec {
        FloorSpec::Const { value }
    }

    pub fn eval(&self, x: &[f64], domain: &GridDomain) -> Result<f64, EvalError> {
        Ok(match self {
            FloorSpec::Const { value } => *value,
            FloorSpec::EndProxy => 1.0 / (domain.end_distance_at(x) + 1.0),
            FloorSpec::Expr { f } => f.value(x)?,
            FloorSpec::Affine { scale, shift, base } => scale * base.eval(x, domain)? + shift,
        })
    }

    /// `scale * self + shift`.
    pub fn affine(self, scale: f64, shift: f64) -> FloorSpec {
        FloorSpec::Affine { scale, shift, base: Box::new(self) }
    }

    pub fn describe(&self) -> String {
        match self {
            FloorSpec::Const { value } => format!("const:{value}"),
            FloorSpec::EndProxy => "end-proxy".into(),
            FloorSpec::Expr { .. } => "expr".into(),
            FloorSpec::Affine { scale, shift, base } => format!("{scale}*({})+{shift}", base.describe()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegionBase {
    /// Lattice samples of every mask cell.
    Mask,
    Cells {
        cells: CellSet,
    },
    CellCenters {
        cells: CellSet,
    },
    /// Boundary-inclusive lattice of a box.
    Box {
        cuboid: Cuboid,
    },
    Points {
        points: Vec<Vec<f64>>,
    },
}

/// Keeps only points where `|functions[func]| <= max_abs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub func: usize,
    pub max_abs: f64,
}

/// Closed Euclidean ball.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disk {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl Disk {
    pub fn contains(&self, x: &[f64]) -> bool {
        let r2: f64 = x.iter().zip(&self.center).map(|(a, b)| (a - b) * (a - b)).sum();
        r2 <= self.radius * self.radius
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub base: RegionBase,
    /// Points inside any of these open boxes are dropped.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exclude: Vec<Cuboid>,
    /// Points inside any of these disks are dropped.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exclude_disks: Vec<Disk>,
    /// When nonempty, only points inside one of these disks are kept.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub within: Vec<Disk>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band: Option<Band>,
}

impl Region {
    fn of(base: RegionBase) -> Region {
        Region { base, exclude: vec![], exclude_disks: vec![], within: vec![], band: None }
    }

    pub fn mask() -> Region {
        Region::of(RegionBase::Mask)
    }

    pub fn cells(cells: CellSet) -> Region {
        Region::of(RegionBase::Cells { cells })
    }

    pub fn centers(cells: CellSet) -> Region {
        Region::of(RegionBase::CellCenters { cells })
    }

    pub fn cuboid(b: Cuboid) -> Region {
        Region::of(RegionBase::Box { cuboid: b })
    }

    pub fn points(points: Vec<Vec<f64>>) -> Region {
        Region::of(RegionBase::Points { points })
    }

    pub fn excluding(mut self, b: Vec<Cuboid>) -> Region {
        self.exclude.extend(b);
        self
    }

    pub fn excluding_disks(mut self, d: Vec<Disk>) -> Region {
        self.exclude_disks.extend(d);
        self
    }

    pub fn within(mut self, d: Vec<Disk>) -> Region {
        self.within.extend(d);
        self
    }

    pub fn describe(&self) -> String {
        let base = match &self.base {
            RegionBase::Mask => "mask".to_string(),
            RegionBase::Cells { cells } => format!("cells[{}]", cells.len()),
            RegionBase::CellCenters { cells } => format!("centers[{}]", cells.len()),
            RegionBase::Box { cuboid } => format!("box{:?}..{:?}", cuboid.lo, cuboid.hi),
            RegionBase::Points { points } => format!("points[{}]", points.len()),
        };
        let mut s = base;
        if !self.exclude.is_empty() {
            s.push_str(&format!(" minus {} boxes", self.exclude.len()));
        }
        if !self.exclude_disks.is_empty() {
            s.push_str(&format!(" minus {} disks", self.exclude_disks.len()));
        }
        if !self.within.is_empty() {
            s.push_str(&format!(" within {} disks", self.within.len()));
        }
        if let Some(b) = &self.band {
            s.push_str(&format!(" where |f{}| <= {}", b.func, b.max_abs));
        }
        s
    }

    /// Sample points at `density` per cell per axis.
    pub fn samples(
        &self,
        domain: &GridDomain,
        density: usize,
        functions: &[SmoothFn],
    ) -> Result<Vec<Vec<f64>>, EvalError> {
        self.samples_jittered(domain, density, functions, None)
    }

    /// As [`Region::samples`]; with a generator, cell lattice points move
    /// uniformly inside their own sub-cell.
    pub fn samples_jittered(
        &self,
        domain: &GridDomain,
        density: usize,
        functions: &[SmoothFn],
        jitter: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<Vec<f64>>, EvalError> {
        let mut pts = Vec::new();
        match &self.base {
            RegionBase::Mask | RegionBase::Cells { .. } => {
                let cells: Vec<usize> = match &self.base {
                    RegionBase::Cells { cells } => cells.cells.clone(),
                    _ => (0..domain.total_cells()).filter(|&c| domain.mask[c]).collect(),
                };
                for c in cells {
                    domain.cell_samples(c, density, &mut pts);
                }
                if let Some(rng) = jitter {
                    let half = 0.49 * domain.h / density.max(1) as f64;
                    for p in &mut pts {
                        for v in p.iter_mut() {
                            *v += rng.gen_range(-half..half);
                        }
                    }
                }
            }
            RegionBase::CellCenters { cells } => pts.extend(cells.cells.iter().map(|c| domain.cell_center(*c))),
            RegionBase::Box { cuboid } => pts = cuboid.lattice(box_lattice_size(cuboid, domain.h, density)),
            RegionBase::Points { points } => pts = points.clone(),
        }
        pts.retain(|x| {
            !self.exclude.iter().any(|b| b.contains_open(x))
                && !self.exclude_disks.iter().any(|d| d.contains(x))
                && (self.within.is_empty() || self.within.iter().any(|d| d.contains(x)))
        });
        if let Some(band) = &self.band {
            let f = &functions[band.func];
            let keep: Vec<bool> =
                pts.par_iter().map(|x| f.value(x).map(|v| v.abs() <= band.max_abs)).collect::<Result<_, _>>()?;
            pts = pts.into_iter().zip(keep).filter(|(_, k)| *k).map(|(p, _)| p).collect();
        }
        Ok(pts)
    }
}

/// Points per axis for a box lattice at the given density.
pub fn box_lattice_size(b: &Cuboid, h: f64, density: usize) -> usize {
    let side = (0..b.dim()).map(|i| b.hi[i] - b.lo[i]).fold(0.0, f64::max);
    ((side / h * density as f64).ceil() as usize + 1).max(3)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CondKind {
    /// `f > floor`
    FGt,
    /// `Af > floor`
    AfGt,
    /// `f >= 0`
    FGe0,
    /// `Af >= 0`
    AfGe0,
    /// `f`, `∇f`, `∇²f` all exactly zero.
    FZero,
    /// `f < floor`
    FLt,
    /// `|∇f| >= floor`
    GradGe,
    /// `|f - g| <= rel * max(|f|, |g|, 1)`
    Agree { other: usize, rel: f64 },
    /// `|exp(f - g) - 1| <= rel`: relative agreement of `e^-f` and `e^-g`.
    ExpAgree { other: usize, rel: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    pub func: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub op: Option<usize>,
    #[serde(default)]
    pub domain: usize,
    pub region: Region,
    pub kind: CondKind,
    pub floor: FloorSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
}

impl Condition {
    pub fn new(name: &str, func: usize, region: Region, kind: CondKind, floor: FloorSpec) -> Condition {
        let op = matches!(kind, CondKind::AfGt | CondKind::AfGe0).then_some(0);
        Condition { name: name.into(), func, op, domain: 0, region, kind, floor, tol: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    #[serde(rename = "R")]
    pub r: Vec<f64>,
    #[serde(rename = "N", default, skip_serializing_if = "Option::is_none")]
    pub n: Option<f64>,
    pub eps: Vec<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub domains: Vec<GridDomain>,
    pub functions: Vec<SmoothFn>,
    pub operators: Vec<EllipticOperator>,
    pub conditions: Vec<Condition>,
    pub density: usize,
    /// Minimum slack per condition at `density`, filled by [`Certificate::finalize`].
    #[serde(default)]
    pub margins: Vec<f64>,
    #[serde(default)]
    pub constants: Constants,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub name: String,
    pub region: String,
    pub min_slack: f64,
    pub argmin: Vec<f64>,
    pub pass: bool,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdCrosscheck {
    pub max_rel_err: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub conditions: Vec<ConditionReport>,
    pub constants: Constants,
    pub fd_crosscheck: FdCrosscheck,
    pub density: usize,
    pub pass: bool,
}

impl Report {
    pub fn condition(&self, name: &str) -> Option<&ConditionReport> {
        self.conditions.iter().find(|c| c.name == name)
    }
}

struct PointEval {
    slack: f64,
    excess: f64,
    co: Option<Coeffs>,
}

fn point_eval(cert: &Certificate, cond: &Condition, x: &[f64]) -> Result<PointEval, ConstructError> {
    let f = &cert.functions[cond.func];
    let domain = &cert.domains[cond.domain];
    let jet = f.eval(x)?;
    let base = cond.tol.unwrap_or(BASE_TOL);
    let floor = match cond.kind {
        CondKind::FGt | CondKind::AfGt | CondKind::FLt | CondKind::GradGe => cond.floor.eval(x, domain)?,
        _ => 0.0,
    };
    let tol = base * (1.0 + floor.abs());
    let mut co = None;
    let mut af = || -> Result<f64, ConstructError> {
        let op = &cert.operators[cond.op.unwrap_or(0)];
        let c = op.coefficients(x)?;
        co = Some(c);
        Ok(c.apply(&jet, op.dim))
    };
    let (slack, excess) = match &cond.kind {
        CondKind::FGt => (jet.v - floor, jet.v - floor - tol),
        CondKind::AfGt => {
            let a = af()?;
            (a - floor, a - floor - tol)
        }
        CondKind::FGe0 => (jet.v, jet.v + tol),
        CondKind::AfGe0 => {
            let a = af()?;
            (a, a + tol)
        }
        CondKind::FZero => {
            let mag = jet.v.abs()
                + jet.g.iter().map(|v| v.abs()).sum::<f64>()
                + jet.h.iter().flatten().map(|v| v.abs()).sum::<f64>();
            (-mag, -mag)
        }
        CondKind::FLt => (floor - jet.v, floor - jet.v - tol),
        CondKind::GradGe => {
            let g = jet.grad_norm(f.dim);
            (g - floor, g - floor + tol)
        }
        CondKind::Agree { other, rel } => {
            let g = cert.functions[*other].value(x)?;
            let s = rel * jet.v.abs().max(g.abs()).max(1.0) - (jet.v - g).abs();
            (s, s)
        }
        CondKind::ExpAgree { other, rel } => {
            let g = cert.functions[*other].value(x)?;
            let s = rel - (jet.v - g).exp_m1().abs();
            (s, s)
        }
    };
    Ok(PointEval { slack, excess, co })
}

/// Evaluates every condition at `density * refine` samples.
pub fn verify(cert: &Certificate, refine: usize) -> Result<Report, ConstructError> {
    verify_with(cert, refine, 0)
}

/// [`verify`] with cell samples jittered under `seed`; seed 0 keeps the
/// plain lattice.
pub fn verify_with(cert: &Certificate, refine: usize, seed: u64) -> Result<Report, ConstructError> {
    let density = cert.density.max(1) * refine.max(1);
    let mut rng = (seed != 0).then(|| ChaCha8Rng::seed_from_u64(seed));
    let mut reports = Vec::with_capacity(cert.conditions.len());
    let mut fd_candidates: Vec<(f64, usize, Vec<f64>)> = Vec::new();
    for (ci, cond) in cert.conditions.iter().enumerate() {
        let domain = &cert.domains[cond.domain];
        let pts = cond.region.samples_jittered(domain, density, &cert.functions, rng.as_mut())?;
        let evals: Vec<PointEval> = pts.par_iter().map(|x| point_eval(cert, cond, x)).collect::<Result<_, _>>()?;
        let mut min_slack = f64::INFINITY;
        let mut argmin = Vec::new();
        let mut pass = true;
        for (x, e) in pts.iter().zip(&evals) {
            if e.slack < min_slack || argmin.is_empty() {
                min_slack = e.slack;
                argmin = x.clone();
            }
            if !(e.excess >= 0.0) {
                pass = false;
            }
        }
        if pts.is_empty() {
            min_slack = f64::INFINITY;
        }
        if cond.op.is_some() {
            for (x, e) in pts.iter().zip(&evals) {
                if e.co.is_some() {
                    fd_candidates.push((e.excess, ci, x.clone()));
                }
            }
        }
        reports.push(ConditionReport {
            name: cond.name.clone(),
            region: cond.region.describe(),
            min_slack,
            argmin,
            pass,
            samples: pts.len(),
        });
    }
    fd_candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut errs: Vec<f64> = Vec::new();
    for chunk in fd_candidates.chunks(FD_POINTS) {
        let got: Vec<Option<f64>> =
            chunk.par_iter().map(|(_, ci, x)| fd_rel_err(cert, &cert.conditions[*ci], x)).collect::<Result<_, _>>()?;
        errs.extend(got.into_iter().flatten());
        if errs.len() >= FD_POINTS {
            errs.truncate(FD_POINTS);
            break;
        }
    }
    let max_rel_err = errs.iter().copied().fold(0.0, f64::max);
    let pass = reports.iter().all(|r| r.pass);
    Ok(Report {
        conditions: reports,
        constants: cert.constants.clone(),
        fd_crosscheck: FdCrosscheck { max_rel_err, points: errs.len() },
        density,
        pass,
    })
}

/// Relative disagreement between exact and Richardson-extrapolated finite
/// difference application, scaled by the size of the individual terms.
const FD_LEVELS: usize = 12;
/// Points, among the tightest with a nonzero operator term, that get the crosscheck.
const FD_POINTS: usize = 10;

fn fd_rel_err(cert: &Certificate, cond: &Condition, x: &[f64]) -> Result<Option<f64>, ConstructError> {
    let f = &cert.functions[cond.func];
    let op = &cert.operators[cond.op.unwrap_or(0)];
    let h = cert.domains[cond.domain].h;
    let jet = f.eval(x)?;
    let co = op.coefficients(x)?;
    let exact = co.apply(&jet, op.dim);
    let mut scale = (co.c * jet.v).abs();
    for i in 0..op.dim {
        scale += (co.b[i] * jet.g[i]).abs();
        for k in 0..op.dim {
            scale += (co.a[i][k] * jet.h[i][k]).abs();
        }
    }
    if scale == 0.0 {
        return Ok(None);
    }
    // Richardson values on a halving ladder; keep the most self-consistent one.
    let mut d = Vec::with_capacity(FD_LEVELS + 1);
    let mut s = h / 64.0;
    for _ in 0..=FD_LEVELS {
        d.push(op.fd_apply(f, x, s)?);
        s *= 0.5;
    }
    let rich: Vec<f64> = d.windows(2).map(|w| (4.0 * w[1] - w[0]) / 3.0).collect();
    let fd = rich
        .windows(2)
        .min_by(|a, b| (a[1] - a[0]).abs().total_cmp(&(b[1] - b[0]).abs()))
        .map(|w| w[1])
        .unwrap_or(rich[0]);
    Ok(Some((fd - exact).abs() / (exact.abs() + scale)))
}

impl Certificate {
    pub fn new(domain: GridDomain, operator: EllipticOperator, density: usize) -> Certificate {
        Certificate {
            domains: vec![domain],
            functions: vec![],
            operators: vec![operator],
            conditions: vec![],
            density,
            margins: vec![],
            constants: Constants::default(),
        }
    }

    pub fn add_function(&mut self, f: SmoothFn) -> usize {
        self.functions.push(f);
        self.functions.len() - 1
    }

    /// Records the per-condition minimum slack at the certificate density.
    pub fn finalize(&mut self) -> Result<Report, ConstructError> {
        let r = verify(self, 1)?;
        self.margins = r.conditions.iter().map(|c| c.min_slack).collect();
        Ok(r)
    }
}
