//! Greedy covering by scaled chain sums, and the global exhaustion
//! subsolution built on it.

use super::bump::{chain_core, ChainCore};
use super::certificate::{Certificate, CondKind, Condition, FloorSpec, Region};
use super::{balanced_sum, check_points, coarse_count, pow2_ceil, ConstructError, Probe, Settings};
use crate::geometry::{CellSet, GridDomain};
use crate::operator::EllipticOperator;
use crate::smoothfn::{Fn1D, SmoothFn};

/// Allowed relative drop of a minimum slack from coarse to fine samples
/// before a lift is added.
const STABILITY: f64 = 0.05;
use crate::topology::{components, exhaustion_sequence, BoxCover, TopologyError};
use std::collections::HashMap;

/// Running sum of scaled chains with its values on the probe.
pub(crate) struct Greedy<'a> {
    pub domain: &'a GridDomain,
    pub op: &'a EllipticOperator,
    pub probe: Probe,
    pub settings: Settings,
    pub terms: Vec<SmoothFn>,
    pub v: Vec<f64>,
    pub a: Vec<f64>,
    pub scales: Vec<f64>,
    pub chain_r: Vec<f64>,
    covers: HashMap<(Vec<usize>, i64), BoxCover<'a>>,
}

impl<'a> Greedy<'a> {
    pub fn new(domain: &'a GridDomain, op: &'a EllipticOperator, settings: &Settings) -> Result<Self, ConstructError> {
        let probe = Probe::new(op, check_points(domain, settings.density))?;
        let n = probe.pts.len();
        Ok(Greedy {
            domain,
            op,
            probe,
            settings: settings.clone(),
            terms: vec![],
            v: vec![0.0; n],
            a: vec![0.0; n],
            scales: vec![],
            chain_r: vec![],
            covers: HashMap::new(),
        })
    }

    /// Chain from probe point `i` staying inside `u`, on the coarsest
    /// single-size box cover that yields a usable chain.
    pub fn chain_at(&mut self, i: usize, u: &CellSet) -> Result<ChainCore, ConstructError> {
        let domain = self.domain;
        let mut cells = ((self.settings.box_cells).round() as i64).max(2);
        cells += cells % 2;
        let p = self.probe.pts[i].clone();
        let mut last;
        loop {
            let cover =
                self.covers.entry((u.cells.clone(), cells)).or_insert_with(|| BoxCover::single_level(u, domain, cells));
            let attempt = cover
                .central_chain_from(&p, u)
                .map_err(ConstructError::from)
                .and_then(|chain| chain_core(&chain, self.op, domain, &self.probe, self.settings.density));
            match attempt {
                Ok(core) => return Ok(core),
                Err(ConstructError::Topology(TopologyError::PointOutside)) => {
                    return Err(TopologyError::PointOutside.into())
                }
                Err(e) => last = e,
            }
            if cells <= 2 {
                return Err(last);
            }
            cells = (cells / 2).max(2);
            cells += cells % 2;
        }
    }

    pub fn commit(&mut self, core: ChainCore, scale: f64) {
        for (k, (v, a)) in core.probe.iter().enumerate() {
            self.v[k] += scale * v;
            self.a[k] += scale * a;
        }
        self.chain_r.extend(core.r.iter().copied());
        self.scales.push(scale);
        self.terms.push(core.alpha.scale(scale));
    }

    /// Lifts `L·ψ + C` with `Aψ > 0` and `C ≥ 0` so that, for both `φ - ρ` and
    /// `Aφ - ρ`, the minimum over the coarse probe samples exceeds the
    /// minimum over the fine ones by at most a twentieth of itself. `C` is
    /// capped where the zeroth-order coefficient is negative so that `Aφ`
    /// keeps half its margin over `ρ`.
    pub fn lift(&self, rho_vals: &[f64], n_coarse: usize) -> Result<(SmoothFn, f64, f64), ConstructError> {
        let dim = self.domain.dim;
        let n = self.v.len();
        let spread = |f: &dyn Fn(usize) -> f64| -> (f64, f64) {
            let coarse = (0..n_coarse).map(f).fold(f64::INFINITY, f64::min);
            let fine = (n_coarse..n).map(f).fold(f64::INFINITY, f64::min);
            (coarse, fine)
        };
        let stable = |(coarse, fine): (f64, f64)| coarse - fine <= STABILITY * coarse;
        let mut a = self.a.clone();
        let mut v = self.v.clone();
        let mut out = SmoothFn::constant(dim, 0.0);
        let mut weight = 0.0;
        if !stable(spread(&|i| a[i] - rho_vals[i])) {
            if let Some((psi, vals)) = strict_profile(self.domain, &self.probe, None)? {
                let (coarse, fine) = spread(&|i| self.a[i] - rho_vals[i]);
                let amin = vals.iter().map(|(_, a)| *a).fold(f64::INFINITY, f64::min);
                let mut l = pow2_ceil(((coarse - fine) / (STABILITY * amin)).max(f64::MIN_POSITIVE));
                for _ in 0..64 {
                    let shifted: Vec<f64> = (0..n).map(|i| self.a[i] + l * vals[i].1).collect();
                    if stable(spread(&|i| shifted[i] - rho_vals[i])) {
                        break;
                    }
                    l *= 2.0;
                }
                for i in 0..n {
                    a[i] += l * vals[i].1;
                    v[i] += l * vals[i].0;
                }
                out = psi.scale(l);
                weight = l;
            }
        }
        let (coarse, fine) = spread(&|i| v[i] - rho_vals[i]);
        let need = (coarse - fine) / STABILITY - coarse;
        let mut shift = if need > 0.0 { pow2_ceil(need) } else { 0.0 };
        let cmin = self.probe.co.iter().map(|c| c.c).fold(0.0, f64::min);
        if cmin < 0.0 && shift > 0.0 {
            let margin = a.iter().zip(rho_vals).map(|(a, r)| a - r).fold(f64::INFINITY, f64::min);
            shift = shift.min(0.5 * margin.max(0.0) / -cmin);
        }
        Ok((out.add(SmoothFn::constant(dim, shift)), weight, shift))
    }

    pub fn function(&self) -> SmoothFn {
        balanced_sum(self.domain.dim, self.terms.clone())
    }

    pub fn floor_values(&self, rho: &FloorSpec) -> Result<Vec<f64>, ConstructError> {
        self.probe.pts.iter().map(|x| rho.eval(x, self.domain).map_err(ConstructError::from)).collect()
    }

    /// Adds scaled chains until `φ ≥ k·ρ` and `Aφ ≥ k·ρ` at every listed
    /// probe point, each chain scaled to reach `2k·ρ` on its start waypoint.
    /// `regions_of` lists the sets a chain from a point may stay in, in
    /// order of preference.
    pub fn cover_points(
        &mut self,
        order: &[usize],
        rho_vals: &[f64],
        rho: &FloorSpec,
        k: f64,
        mut regions_of: impl FnMut(usize) -> Result<Vec<CellSet>, ConstructError>,
    ) -> Result<(), ConstructError> {
        for &i in order {
            if self.v[i] >= k * rho_vals[i] && self.a[i] >= k * rho_vals[i] {
                continue;
            }
            let core = self.chain_over(i, &mut regions_of)?;
            let mut need: f64 = 0.0;
            for (x, (v, a)) in core.start_pts.iter().zip(&core.start_vals) {
                let r = rho.eval(x, self.domain)?;
                need = need.max(2.0 * k * r / v.min(*a));
            }
            // The chain itself already certifies α > 0 and Aα ≥ 1 on the start.
            let scale = pow2_ceil(need.max(f64::MIN_POSITIVE));
            self.commit(core, scale);
        }
        Ok(())
    }
}

/// Which sampled quantity a target constrains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Quantity {
    Value,
    Applied,
}

impl Greedy<'_> {
    fn quantity(&self, q: Quantity, i: usize) -> f64 {
        match q {
            Quantity::Value => self.v[i],
            Quantity::Applied => self.a[i],
        }
    }

    /// Adds `ε_m α_m`, `α_m` a chain normalized to at least 1 on its start
    /// waypoint, at each listed point still below `threshold`, with
    /// `ε_m = budget / ((m+1)(m+2)(1 + sampled negative part of Aα_m))`.
    pub fn positive_series(
        &mut self,
        pts: &[(usize, Quantity)],
        threshold: f64,
        budget: f64,
        mut regions_of: impl FnMut(usize) -> Result<Vec<CellSet>, ConstructError>,
    ) -> Result<usize, ConstructError> {
        let mut m = 0usize;
        for &(i, q) in pts {
            if self.quantity(q, i) >= threshold {
                continue;
            }
            let core = self.chain_over(i, &mut regions_of)?;
            let norm = core.start_vals.iter().map(|(v, a)| v.min(*a)).fold(f64::INFINITY, f64::min);
            let neg = core.probe.iter().map(|(_, a)| (-a / norm).max(0.0)).fold(0.0, f64::max);
            let eps = budget / ((m as f64 + 1.0) * (m as f64 + 2.0) * (1.0 + neg));
            self.commit(core, eps / norm);
            m += 1;
        }
        Ok(m)
    }

    fn chain_over(
        &mut self,
        i: usize,
        regions_of: &mut impl FnMut(usize) -> Result<Vec<CellSet>, ConstructError>,
    ) -> Result<ChainCore, ConstructError> {
        let mut found = Err(ConstructError::Topology(TopologyError::NoExit));
        for u in regions_of(i)? {
            found = self.chain_at(i, &u);
            if found.is_ok() {
                break;
            }
        }
        found
    }
}

/// Smooth function with `Aψ > 0` at the probe points (all, or the listed
/// ones): half the squared distance to the window center, or else an
/// exponential along the first axis. Returns `(ψ, Aψ)` at those points.
pub(crate) fn strict_profile(
    domain: &GridDomain,
    probe: &Probe,
    idx: Option<&[usize]>,
) -> Result<Option<(SmoothFn, Vec<(f64, f64)>)>, ConstructError> {
    let dim = domain.dim;
    let c = domain.window.center();
    let hw = domain.window.half_widths();
    let mut quad = SmoothFn::constant(dim, 0.0);
    for i in 0..dim {
        let t = SmoothFn::coord(dim, i).add(SmoothFn::constant(dim, -c[i]));
        quad = quad.add(t.clone().mul(t).scale(0.5));
    }
    let mut cands = vec![quad];
    for k in 0..7 {
        let mu = 2f64.powi(k) / hw[0];
        cands.push(SmoothFn::coord(dim, 0).compose(Fn1D::Exp { a: mu, b: -mu * c[0] }));
    }
    for psi in cands {
        let vals = match idx {
            Some(i) => probe.eval_at(&psi, i)?,
            None => probe.eval(&psi)?,
        };
        if vals.iter().all(|(_, a)| *a > 0.0) {
            return Ok(Some((psi, vals)));
        }
    }
    Ok(None)
}

/// Layer index (1-based) of every cell in an exhaustion sequence.
pub(crate) fn layer_of(sets: &[CellSet], total: usize) -> Vec<usize> {
    let mut out = vec![usize::MAX; total];
    for (nu, s) in sets.iter().enumerate().rev() {
        for &c in &s.cells {
            out[c] = nu + 1;
        }
    }
    out
}

/// Component of `region` containing `cell`, with a per-call cache.
pub(crate) struct ComponentIndex {
    comps: Vec<CellSet>,
    owner: Vec<usize>,
}

impl ComponentIndex {
    pub fn new(region: &CellSet, domain: &GridDomain) -> ComponentIndex {
        let comps = components(region, domain);
        let mut owner = vec![usize::MAX; domain.total_cells()];
        for (k, c) in comps.iter().enumerate() {
            for &cell in &c.cells {
                owner[cell] = k;
            }
        }
        ComponentIndex { comps, owner }
    }

    pub fn of(&self, cell: usize) -> Option<&CellSet> {
        self.comps.get(*self.owner.get(cell)?)
    }
}

/// `φ > ρ` and `Aφ > ρ` on every mask sample.
pub fn global_subsolution(
    domain: &GridDomain,
    op: &EllipticOperator,
    rho: &FloorSpec,
    settings: &Settings,
) -> Result<(SmoothFn, Certificate), ConstructError> {
    let mask = domain.mask_set();
    for comp in components(&mask, domain) {
        if !comp.cells.iter().any(|&c| domain.is_end_adjacent(c)) {
            return Err(TopologyError::NoExit.into());
        }
    }
    let mut layers = settings.layers.max(1);
    let seq = loop {
        match exhaustion_sequence(domain, layers) {
            Ok(s) => break s,
            Err(TopologyError::CountTooLarge(_)) if layers > 1 => layers -= 1,
            Err(e) => return Err(e.into()),
        }
    };
    let layer = layer_of(&seq.sets, domain.total_cells());
    let mut complements = vec![ComponentIndex::new(&mask, domain)];
    for nu in 1..seq.sets.len() {
        complements.push(ComponentIndex::new(&mask.difference(&seq.sets[nu - 1]), domain));
    }
    let mut g = Greedy::new(domain, op, settings)?;
    let rho_vals = g.floor_values(rho)?;
    let cell_of: Vec<usize> = g.probe.pts.iter().map(|x| domain.cell_of(x).expect("mask sample")).collect();
    let mut order: Vec<usize> = (0..g.probe.pts.len()).collect();
    order.sort_by_key(|&i| (layer[cell_of[i]], i));
    // Chains from layer ν stay off K_{ν-1} when they can; otherwise they may
    // use the whole component, since each chain is a subsolution everywhere.
    g.cover_points(&order, &rho_vals, rho, 1.5, |i| {
        let c = cell_of[i];
        let nu = layer[c];
        let mut out: Vec<CellSet> = complements[nu - 1].of(c).cloned().into_iter().collect();
        if nu > 1 {
            out.extend(complements[0].of(c).cloned());
        }
        if out.is_empty() {
            return Err(TopologyError::NoExit.into());
        }
        Ok(out)
    })?;
    let (lift, weight, shift) = g.lift(&rho_vals, coarse_count(domain, settings.density))?;
    let phi = g.function().add(lift);
    let mut cert = Certificate::new(domain.clone(), op.clone(), settings.density);
    let f = cert.add_function(phi.clone());
    cert.conditions = vec![
        Condition::new("phi_gt_rho", f, Region::mask(), CondKind::FGt, rho.clone()),
        Condition::new("A_phi_gt_rho", f, Region::mask(), CondKind::AfGt, rho.clone()),
    ];
    cert.constants.r = g.chain_r.clone();
    cert.constants.eps = g.scales.clone();
    cert.constants.extra.insert("chains".into(), g.terms.len() as f64);
    cert.constants.extra.insert("layers".into(), seq.sets.len() as f64);
    cert.constants.extra.insert("shift".into(), shift);
    cert.constants.extra.insert("lift_weight".into(), weight);
    cert.finalize()?;
    Ok((phi, cert))
}
