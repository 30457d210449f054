//! Single bumps that are subsolutions away from a small set, and chains of
//! them that push the bad set out to the margin strip.

use super::certificate::{box_lattice_size, Certificate, CondKind, Condition, FloorSpec, Region};
use super::{check_points, pow2_ceil, ConstructError, Probe};
use crate::geometry::{box_intersect, Cuboid, GridDomain};
use crate::operator::{bounds_for, Coeffs, EllipticOperator, OperatorBounds};
use crate::smoothfn::{convexifier, cube_bump, Fn1D, Jet, SmoothFn, FLUSH_EXPONENT};
use crate::topology::Chain;
use rayon::prelude::*;

const R_CAP_EXP: i32 = 30;
const BUMP_R_CAP_EXP: i32 = 20;
const CHAIN_RATIO_CAP: f64 = 1_152_921_504_606_846_976.0; // 2^60

#[derive(Debug, Clone, PartialEq)]
pub struct SelectedR {
    pub r: f64,
    pub bounds: OperatorBounds,
}

/// `A[χ(Rφ)] / χ''(Rφ)` for `χ = exp(t - 1/t)`, or `None` where `χ'' = 0`.
pub fn lemma_ratio(co: &Coeffs, jet: &Jet, dim: usize, r: f64) -> Option<f64> {
    let t = r * jet.v;
    if t <= 0.0 || t - 1.0 / t < FLUSH_EXPONENT {
        return None;
    }
    let d1 = 1.0 + 1.0 / (t * t);
    let d2 = d1 * d1 - 2.0 / (t * t * t);
    let (mut quad, mut lin) = (0.0, 0.0);
    for i in 0..dim {
        lin += co.b[i] * jet.g[i];
        for k in 0..dim {
            quad += co.a[i][k] * jet.g[i] * jet.g[k];
            lin += co.a[i][k] * jet.h[i][k];
        }
    }
    Some(r * r * quad + (d1 / d2) * r * lin + co.c / d2)
}

/// Smallest `R = 2^k` with `δR² - RN - N ≥ εR²` that also passes the sampled
/// inequality `A[χ(Rφ)] ≥ εR²χ''(Rφ)` on `k_samples`.
pub fn select_r(
    phi: &SmoothFn,
    op: &EllipticOperator,
    k_samples: &[Vec<f64>],
    eps: f64,
) -> Result<SelectedR, ConstructError> {
    let bounds = bounds_for(op, phi, k_samples)?;
    let data: Vec<(Coeffs, Jet)> =
        k_samples.par_iter().map(|x| Ok((op.coefficients(x)?, phi.eval(x)?))).collect::<Result<_, ConstructError>>()?;
    for k in 0..=R_CAP_EXP {
        let r = 2f64.powi(k);
        if bounds.delta * r * r - r * bounds.n - bounds.n < eps * r * r {
            continue;
        }
        let want = eps * r * r;
        let ok = data.iter().all(|(co, j)| match lemma_ratio(co, j, op.dim, r) {
            Some(v) => v >= want - 1e-9 * (1.0 + want),
            None => true,
        });
        if ok {
            return Ok(SelectedR { r, bounds });
        }
    }
    Err(ConstructError::NoR)
}

/// Per-point data for `A[χ(R(ρ - ε))]`.
#[derive(Clone, Copy)]
struct BumpPoint {
    rho: f64,
    quad: f64,
    lin: f64,
    c: f64,
}

impl BumpPoint {
    fn new(co: &Coeffs, j: &Jet, dim: usize) -> BumpPoint {
        let (mut quad, mut lin) = (0.0, 0.0);
        for i in 0..dim {
            lin += co.b[i] * j.g[i];
            for k in 0..dim {
                quad += co.a[i][k] * j.g[i] * j.g[k];
                lin += co.a[i][k] * j.h[i][k];
            }
        }
        BumpPoint { rho: j.v, quad, lin, c: co.c }
    }

    fn a_beta(&self, r: f64, eps: f64) -> Option<f64> {
        let t = r * (self.rho - eps);
        let (f0, f1, f2) = CHI.eval(t).ok()?;
        Some(f2 * r * r * self.quad + f1 * r * self.lin + self.c * f0)
    }
}

const CHI: Fn1D = Fn1D::Chi { a: 1.0, b: 1.0 };

pub(crate) struct BumpCore {
    pub beta: SmoothFn,
    pub r: f64,
    pub eps: f64,
    pub scale: f64,
}

fn bump_points(op: &EllipticOperator, rho: &SmoothFn, pts: &[Vec<f64>]) -> Result<Vec<BumpPoint>, ConstructError> {
    pts.par_iter().map(|x| Ok(BumpPoint::new(&op.coefficients(x)?, &rho.eval(x)?, op.dim))).collect()
}

/// `s·χ(R(ρ - ε))` with `ρ` the bump on `v` peaking at the center of `w`.
/// `R` is the smallest power of two with `Aβ ≥ 0` on the sampled part of
/// `v` outside `w` (also at `0.8R`) and `Aβ > 0` on `d_pts`; `s` makes
/// `Aβ ≥ 2` on `d_pts`.
pub(crate) fn bump_core(
    v: &Cuboid,
    d_pts: &[Vec<f64>],
    w: &Cuboid,
    op: &EllipticOperator,
    lattice_n: usize,
    extra: &[Vec<f64>],
) -> Result<BumpCore, ConstructError> {
    if d_pts.is_empty() {
        return Err(ConstructError::EmptyD);
    }
    if !v.compactly_contains(w) {
        return Err(ConstructError::Precondition("W must lie inside V".into()));
    }
    if d_pts.iter().any(|x| w.contains_open(x)) {
        return Err(ConstructError::Precondition("D and W must be disjoint".into()));
    }
    let q = w.center();
    let rho = cube_bump(v, &q)?;
    let d_rho: Vec<f64> = d_pts.iter().map(|x| rho.value(x)).collect::<Result<_, _>>()?;
    let min_d = d_rho.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min_d > 0.0) {
        return Err(ConstructError::Precondition("D must lie inside V".into()));
    }
    let eps = 0.5 * min_d;
    let mut k_pts: Vec<Vec<f64>> = v.lattice(lattice_n);
    k_pts.extend(extra.iter().filter(|x| v.contains_open(x)).cloned());
    k_pts.retain(|x| !w.contains_open(x) && v.contains_open(x));
    let k_data = bump_points(op, &rho, &k_pts)?;
    let d_data = bump_points(op, &rho, d_pts)?;
    let mut chosen = None;
    for k in 0..=BUMP_R_CAP_EXP {
        let r = 2f64.powi(k);
        let off_w = k_data.par_iter().all(|p| {
            matches!(p.a_beta(r, eps), Some(a) if a >= 0.0) && matches!(p.a_beta(0.8 * r, eps), Some(a) if a >= 0.0)
        });
        if !off_w {
            continue;
        }
        let on_d: Option<Vec<f64>> = d_data.iter().map(|p| p.a_beta(r, eps)).collect();
        match on_d {
            Some(vals) if vals.iter().all(|a| *a > 0.0) => {
                chosen = Some((r, vals.iter().copied().fold(f64::INFINITY, f64::min)));
                break;
            }
            None => return Err(ConstructError::NoR),
            _ => {}
        }
    }
    let (r, min_a) = chosen.ok_or(ConstructError::NoR)?;
    let scale = pow2_ceil(2.0 / min_a);
    let beta = rho
        .add(SmoothFn::constant(v.dim(), -eps))
        .scale(r)
        .compose(convexifier(1.0, 1.0))
        .with_support(v.clone())
        .scale(scale);
    Ok(BumpCore { beta, r, eps, scale })
}

fn lattice_cap(dim: usize) -> usize {
    match dim {
        1 => 400,
        2 => 49,
        _ => 17,
    }
}

fn apply_pts(op: &EllipticOperator, f: &SmoothFn, pts: &[Vec<f64>]) -> Result<Vec<(f64, f64)>, ConstructError> {
    pts.par_iter()
        .map(|x| {
            let j = f.eval(x)?;
            Ok((j.v, op.coefficients(x)?.apply(&j, op.dim)))
        })
        .collect()
}

/// `β ≥ 0`, `β ≡ 0` off `V`, `Aβ ≥ 0` off `W`, `β > 0` and `Aβ > 1` on `D`.
pub fn bump_subsolution(
    v: &Cuboid,
    d: &Region,
    w: &Cuboid,
    op: &EllipticOperator,
    domain: &GridDomain,
    density: usize,
) -> Result<(SmoothFn, Certificate), ConstructError> {
    let mut d_pts = d.samples(domain, density, &[])?;
    d_pts.extend(d.samples(domain, 2 * density, &[])?);
    let n = box_lattice_size(v, domain.h, 4).min(lattice_cap(domain.dim));
    let extra = check_points(domain, density);
    let core = bump_core(v, &d_pts, w, op, n, &extra)?;
    let mut cert = Certificate::new(domain.clone(), op.clone(), density);
    let f = cert.add_function(core.beta.clone());
    let zero = FloorSpec::constant(0.0);
    cert.conditions = vec![
        Condition::new("beta_nonneg", f, Region::mask(), CondKind::FGe0, zero.clone()),
        Condition::new("beta_zero_off_V", f, Region::mask().excluding(vec![v.clone()]), CondKind::FZero, zero.clone()),
        Condition::new(
            "A_beta_nonneg_off_W",
            f,
            Region::mask().excluding(vec![w.clone()]),
            CondKind::AfGe0,
            zero.clone(),
        ),
        Condition::new("beta_positive_on_D", f, d.clone(), CondKind::FGt, zero),
        Condition::new("A_beta_gt_1_on_D", f, d.clone(), CondKind::AfGt, FloorSpec::constant(1.0)),
    ];
    cert.constants.r = vec![core.r];
    cert.constants.eps = vec![core.eps];
    cert.constants.extra.insert("scale".into(), core.scale);
    cert.finalize()?;
    Ok((core.beta, cert))
}

/// A chain sum with its values on the probe and near the start point.
pub(crate) struct ChainCore {
    pub alpha: SmoothFn,
    pub r: Vec<f64>,
    pub eps: Vec<f64>,
    /// `(α, Aα)` at every probe point.
    pub probe: Vec<(f64, f64)>,
    /// Lattice of the closed start waypoint and `(α, Aα)` there.
    pub start_pts: Vec<Vec<f64>>,
    pub start_vals: Vec<(f64, f64)>,
}

/// Smallest bump value tolerated on a step's source set before an
/// intermediate waypoint is inserted inside the same box.
const MIN_SOURCE_RHO: f64 = 0.01;
const SPLIT_DEPTH: usize = 8;

/// One bump of a chain: support box, source set and waypoint.
#[derive(Debug, Clone)]
struct Step {
    v: Cuboid,
    d: Cuboid,
    w: Cuboid,
}

fn min_rho_on(v: &Cuboid, d: &Cuboid, w: &Cuboid) -> Result<f64, ConstructError> {
    let rho = cube_bump(v, &w.center())?;
    let mut m = f64::INFINITY;
    for x in d.lattice(5) {
        m = m.min(rho.value(&x)?);
    }
    Ok(m)
}

/// Chebyshev distance from `x` to the closed box `b`.
fn box_distance(x: &[f64], b: &Cuboid) -> f64 {
    (0..b.dim()).map(|i| (b.lo[i] - x[i]).max(x[i] - b.hi[i]).max(0.0)).fold(0.0, f64::max)
}

/// Chebyshev distance from an interior point `x` to the boundary of `v`.
fn inner_distance(x: &[f64], v: &Cuboid) -> f64 {
    (0..v.dim()).map(|i| (x[i] - v.lo[i]).min(v.hi[i] - x[i])).fold(f64::INFINITY, f64::min)
}

/// Rough log of the factor one bump step multiplies the chain by: `R` from
/// the waypoint's relative size, then the peak-to-source ratio.
fn growth_estimate(local: &Cuboid, w: &Cuboid, rho_d: f64) -> f64 {
    let rel = w.half_widths().iter().zip(local.half_widths()).map(|(a, b)| a / b).fold(f64::INFINITY, f64::min);
    let r = 2.0 / (rel * rel);
    r * (1.0 - 0.5 * rho_d) + 2.0 / (r * rho_d)
}

/// Cube on the segment from the center of `d` toward the center of `w`,
/// with a local support box around `d`, chosen for the least estimated
/// growth per unit gain (in log bump value) toward `w`.
fn approach(v: &Cuboid, d: &Cuboid, w: &Cuboid, now: f64) -> Result<Option<(Cuboid, Cuboid)>, ConstructError> {
    let (cd, cw) = (d.center(), w.center());
    let g = inner_distance(&cd, v);
    let mut best: Option<(f64, Cuboid, Cuboid)> = None;
    for lambda in [1.5, 2.0, 2.5, 3.0, 4.0, 6.0, 8.0, f64::INFINITY] {
        let local = if lambda.is_finite() {
            let r = lambda * g;
            let cube = Cuboid { lo: cd.iter().map(|c| c - r).collect(), hi: cd.iter().map(|c| c + r).collect() };
            match box_intersect(v, &cube)? {
                Some(b) => b,
                None => continue,
            }
        } else {
            v.clone()
        };
        if !local.compactly_contains(d) {
            continue;
        }
        for k in 1..20 {
            let f = k as f64 / 20.0;
            let q: Vec<f64> = cd.iter().zip(&cw).map(|(a, b)| a + f * (b - a)).collect();
            let r = (0.9 * box_distance(&q, d))
                .min(0.9 * box_distance(&q, w))
                .min(0.9 * inner_distance(&q, &local))
                .min(0.5 * inner_distance(&q, v));
            if !(r > 0.0) {
                continue;
            }
            let cand = Cuboid { lo: q.iter().map(|c| c - r).collect(), hi: q.iter().map(|c| c + r).collect() };
            if !local.compactly_contains(&cand) || cand.touches(d) || cand.touches(w) {
                continue;
            }
            let rho_d = min_rho_on(&local, d, &cand)?;
            let next = min_rho_on(v, &cand, w)?;
            if !(rho_d > 0.0) || next <= now {
                continue;
            }
            let gain = (next.min(MIN_SOURCE_RHO) / now).ln();
            if !(gain > 0.0) {
                continue;
            }
            let score = growth_estimate(&local, &cand, rho_d) / gain;
            if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
                best = Some((score, local.clone(), cand));
            }
        }
    }
    Ok(best.map(|(_, l, c)| (l, c)))
}

fn push_steps(v: &Cuboid, d: &Cuboid, w: &Cuboid, out: &mut Vec<Step>) -> Result<(), ConstructError> {
    let mut cur = d.clone();
    for _ in 0..SPLIT_DEPTH {
        let now = min_rho_on(v, &cur, w)?;
        if now >= MIN_SOURCE_RHO {
            break;
        }
        match approach(v, &cur, w, now)? {
            Some((local, next)) => {
                out.push(Step { v: local, d: cur, w: next.clone() });
                cur = next;
            }
            None => break,
        }
    }
    out.push(Step { v: v.clone(), d: cur, w: w.clone() });
    Ok(())
}

fn plan_steps(chain: &Chain) -> Result<Vec<Step>, ConstructError> {
    let mut out = Vec::new();
    for (m, v) in chain.boxes.iter().enumerate() {
        push_steps(v, &chain.waypoints[m], &chain.waypoints[m + 1], &mut out)?;
    }
    Ok(out)
}

pub(crate) fn chain_core(
    chain: &Chain,
    op: &EllipticOperator,
    domain: &GridDomain,
    probe: &Probe,
    density: usize,
) -> Result<ChainCore, ConstructError> {
    let l = chain.boxes.len();
    if l == 0 || chain.waypoints.len() != l + 1 {
        return Err(ConstructError::Precondition("malformed chain".into()));
    }
    let cap = lattice_cap(domain.dim);
    let waypoint_pts = |w: &Cuboid| -> Vec<Vec<f64>> {
        let mut pts = w.lattice(box_lattice_size(w, domain.h, 2 * density).min(cap));
        pts.extend(probe.inside(w).into_iter().map(|i| probe.pts[i].clone()));
        pts
    };
    let start_pts = waypoint_pts(&chain.waypoints[0]);
    let mut start_a = vec![0.0; start_pts.len()];
    let mut start_v = vec![0.0; start_pts.len()];
    let mut cur = vec![(0.0, 0.0); probe.pts.len()];
    let mut terms: Vec<SmoothFn> = Vec::with_capacity(l);
    let mut rs = Vec::with_capacity(l);
    let mut epss = Vec::with_capacity(l);
    let steps = plan_steps(chain)?;
    for (m, step) in steps.iter().enumerate() {
        let (v, w) = (&step.v, &step.w);
        let d_pts = if m == 0 { start_pts.clone() } else { waypoint_pts(&step.d) };
        let n = box_lattice_size(v, domain.h, 4).min(cap);
        let idx = probe.inside(v);
        let extra: Vec<Vec<f64>> = idx.iter().map(|&i| probe.pts[i].clone()).collect();
        let core = bump_core(v, &d_pts, w, op, n, &extra)?;
        let on_probe = probe.eval_at(&core.beta, &idx)?;
        let on_start = apply_pts(op, &core.beta, &start_pts)?;
        let r = if m == 0 {
            1.0
        } else {
            let on_d = apply_pts(op, &core.beta, &d_pts)?;
            let mut prev_d = vec![0.0; d_pts.len()];
            for t in &terms {
                for (acc, (_, a)) in prev_d.iter_mut().zip(apply_pts(op, t, &d_pts)?) {
                    *acc += a;
                }
            }
            let base = rs[m - 1];
            let mut r = base;
            loop {
                let ok_d = prev_d.iter().zip(&on_d).all(|(p, (_, a))| p + r * a >= 1.0 && r * a >= 2.0 * (-p).max(0.0));
                let ok_probe = idx
                    .iter()
                    .zip(&on_probe)
                    .all(|(&i, (_, a))| w.contains_open(&probe.pts[i]) || cur[i].1 + r * a >= 0.0);
                let ok_start = start_a.iter().zip(&on_start).all(|(p, (_, a))| p + r * a >= 1.0);
                if ok_d && ok_probe && ok_start {
                    break r;
                }
                r *= 2.0;
                if r / base > CHAIN_RATIO_CAP {
                    return Err(ConstructError::RunawayR);
                }
            }
        };
        for (&i, (bv, ba)) in idx.iter().zip(&on_probe) {
            cur[i].0 += r * bv;
            cur[i].1 += r * ba;
        }
        for (k, (bv, ba)) in on_start.iter().enumerate() {
            start_v[k] += r * bv;
            start_a[k] += r * ba;
        }
        terms.push(core.beta.scale(r));
        rs.push(r);
        epss.push(core.eps);
    }
    let alpha = SmoothFn::sum(domain.dim, terms);
    Ok(ChainCore {
        alpha,
        r: rs,
        eps: epss,
        probe: cur,
        start_pts,
        start_vals: start_v.into_iter().zip(start_a).collect(),
    })
}

/// `α = Σ R_m β_m` along the chain, with `Aα > 1` near the start.
pub fn chain_subsolution(
    chain: &Chain,
    op: &EllipticOperator,
    domain: &GridDomain,
    density: usize,
) -> Result<(SmoothFn, Certificate), ConstructError> {
    let probe = Probe::new(op, check_points(domain, density))?;
    let core = chain_core(chain, op, domain, &probe, density)?;
    let mut cert = Certificate::new(domain.clone(), op.clone(), density);
    let f = cert.add_function(core.alpha.clone());
    let zero = FloorSpec::constant(0.0);
    cert.conditions = vec![
        Condition::new("alpha_nonneg", f, Region::mask(), CondKind::FGe0, zero.clone()),
        Condition::new("A_alpha_nonneg", f, Region::mask(), CondKind::AfGe0, zero.clone()),
        Condition::new(
            "alpha_zero_off_chain",
            f,
            Region::mask().excluding(chain.boxes.clone()),
            CondKind::FZero,
            zero.clone(),
        ),
        Condition::new("alpha_positive_at_start", f, Region::points(vec![chain.start.clone()]), CondKind::FGt, zero),
        Condition::new(
            "A_alpha_gt_1_near_start",
            f,
            Region::cuboid(chain.waypoints[0].clone()),
            CondKind::AfGt,
            FloorSpec::constant(1.0),
        ),
    ];
    cert.constants.r = core.r.clone();
    cert.constants.eps = core.eps.clone();
    cert.finalize()?;
    Ok((core.alpha, cert))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{mask_from_spec, DomainSpec};
    use crate::smoothfn::Node;
    use crate::topology::find_chain;

    fn square() -> GridDomain {
        let spec: DomainSpec = serde_json::from_value(serde_json::json!({
            "dim": 2, "window": {"lo": [-1.0, -1.0], "hi": [1.0, 1.0]}, "h": 0.125, "shape": {"op": "all"}
        }))
        .unwrap();
        mask_from_spec(&spec).unwrap()
    }

    fn strip(lo: [f64; 2], hi: [f64; 2], n: usize) -> Vec<Vec<f64>> {
        let b = Cuboid::new(lo.to_vec(), hi.to_vec()).unwrap();
        b.lattice(n)
    }

    #[test]
    fn linear_phi_needs_no_scaling() {
        let phi = SmoothFn::coord(2, 0);
        let k = strip([1.0, 0.0], [2.0, 1.0], 9);
        let got = select_r(&phi, &EllipticOperator::laplace(2), &k, 0.5).unwrap();
        assert_eq!(got.r, 1.0);
        assert_eq!((got.bounds.delta, got.bounds.n), (1.0, 0.0));
    }

    #[test]
    fn eps_above_delta_has_no_r() {
        let phi = SmoothFn::coord(2, 0);
        let k = strip([1.0, 0.0], [2.0, 1.0], 9);
        assert_eq!(select_r(&phi, &EllipticOperator::laplace(2), &k, 1.5), Err(ConstructError::NoR));
    }

    #[test]
    fn bump_subsolution_near_a_corner_waypoint() {
        let domain = square();
        let v = Cuboid::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let w = Cuboid::new(vec![0.65, 0.65], vec![0.75, 0.75]).unwrap();
        let d = Region::cuboid(Cuboid::new(vec![-0.2, -0.2], vec![0.2, 0.2]).unwrap());
        let (beta, cert) = bump_subsolution(&v, &d, &w, &EllipticOperator::laplace(2), &domain, 3).unwrap();
        for refine in [1, 2] {
            assert!(super::super::verify(&cert, refine).unwrap().pass);
        }
        let j = beta.eval(&[1.0, 0.3]).unwrap();
        assert!(j.is_zero());
    }

    #[test]
    fn partial_sums_never_lose_subharmonicity_off_the_waypoints() {
        let domain = square();
        let op = EllipticOperator::laplace(2);
        let chain = find_chain(&[0.1, 0.05], &domain.mask_set(), &domain, 0.5).unwrap();
        assert!(chain.boxes.len() >= 2);
        let probe = Probe::new(&op, check_points(&domain, 3)).unwrap();
        let core = chain_core(&chain, &op, &domain, &probe, 3).unwrap();
        let Node::Sum { children } = &core.alpha.node else { panic!("chain sum expected") };
        let steps = plan_steps(&chain).unwrap();
        assert_eq!(children.len(), steps.len());
        let mut partial = vec![0.0; probe.pts.len()];
        for (m, term) in children.iter().enumerate() {
            let add = probe.eval(term).unwrap();
            for (i, x) in probe.pts.iter().enumerate() {
                let next = partial[i] + add[i].1;
                let off = !steps[m].w.contains_open(x) && (m == 0 || !steps[m - 1].w.contains_open(x));
                if off {
                    assert!(next >= partial[i] - 1e-12 * (1.0 + partial[i].abs()), "step {m} at {x:?}");
                }
                partial[i] = next;
            }
        }
    }
}
