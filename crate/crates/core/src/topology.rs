//! Point-set topology on cell grids: components, hulls, exhaustions, chains of
//! boxes to infinity, nested opens and closed-set decompositions.

use crate::geometry::{box_intersect, CellKind, CellSet, Cuboid, GridDomain};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("set is not contained in its ambient set")]
    NotContained,
    #[error("NoExit: no box path from the start reaches an End face")]
    NoExit,
    #[error("BoxTooCoarse: the box cover disconnects U at this side length")]
    BoxTooCoarse,
    #[error("window too small for {0} exhaustion levels")]
    CountTooLarge(usize),
    #[error("start point does not lie in a cell of U")]
    PointOutside,
    #[error("set has a component that does not reach an End face")]
    NotNoncompact,
    #[error("CompactComponent: a component of D reaches no End face")]
    CompactComponent,
    #[error("NoRoom: cover cells cannot avoid K at grid resolution")]
    NoRoom,
    #[error("U has a component that does not meet C")]
    UnreachedComponent,
    #[error("terminal waypoint cannot be separated from its predecessor")]
    WaypointClash,
}

/// Face-connected pieces of `s`, ordered by smallest flat index.
pub fn components(s: &CellSet, domain: &GridDomain) -> Vec<CellSet> {
    let total = domain.total_cells();
    let inside = s.flags(total);
    let mut seen = vec![false; total];
    let mut out = Vec::new();
    for &start in &s.cells {
        if seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(c) = queue.pop_front() {
            comp.push(c);
            for nb in domain.neighbors(c) {
                if inside[nb] && !seen[nb] {
                    seen[nb] = true;
                    queue.push_back(nb);
                }
            }
        }
        out.push(CellSet::new(comp));
    }
    out
}

/// `K` together with the components of `ambient \ K` that reach no
/// End-adjacent cell. `ambient` defaults to the mask.
pub fn hull(k: &CellSet, domain: &GridDomain, ambient: Option<&CellSet>) -> Result<CellSet, TopologyError> {
    let total = domain.total_cells();
    let amb = match ambient {
        Some(a) => a.flags(total),
        None => domain.mask.clone(),
    };
    let kf = k.flags(total);
    if k.cells.iter().any(|c| !amb[*c]) {
        return Err(TopologyError::NotContained);
    }
    let mut reach = vec![false; total];
    let mut queue = VecDeque::new();
    for c in 0..total {
        if amb[c] && !kf[c] && domain.is_end_adjacent(c) {
            reach[c] = true;
            queue.push_back(c);
        }
    }
    while let Some(c) = queue.pop_front() {
        for nb in domain.neighbors(c) {
            if amb[nb] && !kf[nb] && !reach[nb] {
                reach[nb] = true;
                queue.push_back(nb);
            }
        }
    }
    Ok(CellSet::from_flags(&(0..total).map(|c| amb[c] && (kf[c] || !reach[c])).collect::<Vec<_>>()))
}

/// Cells of `s` all of whose face neighbors in the mask also lie in `s`.
pub fn interior(s: &CellSet, domain: &GridDomain) -> CellSet {
    let f = s.flags(domain.total_cells());
    CellSet {
        cells: s
            .cells
            .iter()
            .copied()
            .filter(|c| domain.neighbors(*c).into_iter().all(|nb| !domain.mask[nb] || f[nb]))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExhaustionSeq {
    pub sets: Vec<CellSet>,
    pub stride: usize,
}

/// Nested self-hulled sets `K_1 ⊂ … ⊂ K_count = mask`. Level ν keeps the mask
/// cells at end distance at least `(count - ν) * stride`.
pub fn exhaustion_sequence(domain: &GridDomain, count: usize) -> Result<ExhaustionSeq, TopologyError> {
    if count == 0 {
        return Err(TopologyError::CountTooLarge(0));
    }
    let dist = domain.end_distance();
    let dmax = (0..domain.total_cells()).filter(|c| domain.mask[*c]).map(|c| dist[c]).max().unwrap_or(0);
    let stride = if count == 1 { 1 } else { dmax / (count - 1) };
    if stride == 0 {
        return Err(TopologyError::CountTooLarge(count));
    }
    let mut sets = Vec::with_capacity(count);
    for nu in 1..=count {
        let need = (count - nu) * stride;
        let raw = CellSet::new((0..domain.total_cells()).filter(|c| domain.mask[*c] && dist[*c] >= need).collect());
        sets.push(hull(&raw, domain, None)?);
    }
    Ok(ExhaustionSeq { sets, stride })
}

/// Sequence of overlapping boxes from `start` to the margin strip with
/// interleaved waypoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    pub start: Vec<f64>,
    pub boxes: Vec<Cuboid>,
    /// `waypoints[0]` contains the start; `waypoints[m]` sits in the overlap of
    /// boxes `m` and `m+1` (1-based); the last one lies in the margin strip.
    pub waypoints: Vec<Cuboid>,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct BoxKey {
    level: usize,
    origin: [i64; 3],
}

/// Admissible boxes covering `U ∪ margin` at dyadic side lengths.
pub struct BoxCover<'a> {
    domain: &'a GridDomain,
    sides: Vec<i64>,
    nodes: Vec<BoxKey>,
    index: BTreeMap<BoxKey, usize>,
    terminal: Vec<Option<Cuboid>>,
    dist_to_end: Vec<usize>,
    u_flags: Vec<bool>,
}

impl<'a> BoxCover<'a> {
    pub fn new(u: &CellSet, domain: &'a GridDomain, box_side: f64) -> Self {
        let mut c0 = ((box_side / domain.h).round() as i64).max(2);
        if c0 % 2 == 1 {
            c0 += 1;
        }
        let mut sides = vec![c0];
        let mut c = c0;
        while c % 2 == 0 && c / 2 >= 2 && (c / 2) % 2 == 0 {
            c /= 2;
            sides.push(c);
        }
        if *sides.last().unwrap() != 2 {
            sides.push(2);
        }
        Self::with_sides(u, domain, sides)
    }

    /// Cover by boxes of one side only (`cells`, even, at least 2).
    pub fn single_level(u: &CellSet, domain: &'a GridDomain, cells: i64) -> Self {
        Self::with_sides(u, domain, vec![(cells + cells % 2).max(2)])
    }

    fn with_sides(u: &CellSet, domain: &'a GridDomain, sides: Vec<i64>) -> Self {
        let u_flags = u.flags(domain.total_cells());
        let mut cover = BoxCover {
            domain,
            sides,
            nodes: Vec::new(),
            index: BTreeMap::new(),
            terminal: Vec::new(),
            dist_to_end: Vec::new(),
            u_flags,
        };
        cover.enumerate();
        cover.distances();
        cover
    }

    fn cell_ok(&self, e: [i64; 3]) -> Option<bool> {
        // Some(true) for margin, Some(false) for a U cell, None otherwise.
        match self.domain.kind_ext(e) {
            CellKind::Margin => Some(true),
            CellKind::Mask => {
                let idx = self.domain.flat_of_ext(e).unwrap();
                if self.u_flags[idx] {
                    Some(false)
                } else {
                    None
                }
            }
            CellKind::Void => None,
        }
    }

    fn enumerate(&mut self) {
        let d = self.domain;
        let m = d.margin as i64;
        for (level, &side) in self.sides.iter().enumerate() {
            let step = side / 2;
            let mut lo = [0i64; 3];
            let mut hi = [0i64; 3];
            for a in 0..3 {
                if a < d.dim {
                    lo[a] = (-m - side).div_euclid(step) * step;
                    hi[a] = d.n[a] as i64 + m;
                }
            }
            let mut o = lo;
            loop {
                if let Some(term) = self.admissible(o, side) {
                    let key = BoxKey { level, origin: o };
                    self.index.insert(key, self.nodes.len());
                    self.nodes.push(key);
                    self.terminal.push(term);
                }
                // Advance the origin odometer.
                let mut a = 0;
                loop {
                    if a >= d.dim {
                        break;
                    }
                    o[a] += step;
                    if o[a] <= hi[a] {
                        break;
                    }
                    o[a] = lo[a];
                    a += 1;
                }
                if a >= d.dim {
                    break;
                }
            }
        }
    }

    /// `None` if inadmissible, `Some(None)` for an ordinary box, `Some(Some(half))`
    /// for a terminal box with its first all-margin half.
    fn admissible(&self, o: [i64; 3], side: i64) -> Option<Option<Cuboid>> {
        let d = self.domain;
        let dim = d.dim;
        let ext = |a: usize| if a < dim { side } else { 1 };
        let mut any_u = false;
        let mut cells = Vec::new();
        for k in 0..ext(2) {
            for j in 0..ext(1) {
                for i in 0..ext(0) {
                    let e = [o[0] + i, o[1] + j, o[2] + k];
                    let margin = self.cell_ok(e)?;
                    any_u |= !margin;
                    cells.push(([i, j, k], margin));
                }
            }
        }
        if !any_u {
            return None;
        }
        let step = side / 2;
        for a in 0..dim {
            for upper in [false, true] {
                let all_margin = cells.iter().filter(|(loc, _)| (loc[a] >= step) == upper).all(|(_, m)| *m);
                if all_margin {
                    let b = self.key_box(o, side);
                    let mut half = b.clone();
                    let mid = 0.5 * (b.lo[a] + b.hi[a]);
                    if upper {
                        half.lo[a] = mid;
                    } else {
                        half.hi[a] = mid;
                    }
                    return Some(Some(half));
                }
            }
        }
        Some(None)
    }

    fn key_box(&self, o: [i64; 3], side: i64) -> Cuboid {
        let d = self.domain;
        let lo: Vec<f64> = (0..d.dim).map(|a| d.window.lo[a] + o[a] as f64 * d.h).collect();
        let hi = lo.iter().map(|v| v + side as f64 * d.h).collect();
        Cuboid { lo, hi }
    }

    pub fn node_box(&self, i: usize) -> Cuboid {
        let k = self.nodes[i];
        self.key_box(k.origin, self.sides[k.level])
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_terminal(&self, i: usize) -> bool {
        self.terminal[i].is_some()
    }

    /// Boxes whose open interiors intersect that of node `i`.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        let d = self.domain;
        let k = self.nodes[i];
        let side = self.sides[k.level];
        let mut out = Vec::new();
        for (level, &s2) in self.sides.iter().enumerate() {
            let step = s2 / 2;
            let mut lo = [0i64; 3];
            let mut hi = [0i64; 3];
            for a in 0..3 {
                if a < d.dim {
                    // Need o' < o + side and o' + s2 > o.
                    lo[a] = (k.origin[a] - s2 + 1).div_euclid(step) * step;
                    if lo[a] <= k.origin[a] - s2 {
                        lo[a] += step;
                    }
                    hi[a] = k.origin[a] + side - 1;
                }
            }
            let mut o = lo;
            loop {
                let key = BoxKey { level, origin: o };
                if key != k {
                    if let Some(&j) = self.index.get(&key) {
                        out.push(j);
                    }
                }
                let mut a = 0;
                loop {
                    if a >= d.dim {
                        break;
                    }
                    o[a] += step;
                    if o[a] <= hi[a] {
                        break;
                    }
                    o[a] = lo[a];
                    a += 1;
                }
                if a >= d.dim {
                    break;
                }
            }
        }
        out.sort_by_key(|j| self.nodes[*j]);
        out
    }

    fn distances(&mut self) {
        let n = self.nodes.len();
        let mut dist = vec![usize::MAX; n];
        let mut queue = VecDeque::new();
        for i in 0..n {
            if self.terminal[i].is_some() {
                dist[i] = 1;
                queue.push_back(i);
            }
        }
        while let Some(i) = queue.pop_front() {
            for j in self.neighbors(i) {
                if dist[j] == usize::MAX {
                    dist[j] = dist[i] + 1;
                    queue.push_back(j);
                }
            }
        }
        self.dist_to_end = dist;
    }

    /// Nodes whose open box contains `p`, with their chain length to the margin.
    pub fn start_nodes(&self, p: &[f64]) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, _) in self.nodes.iter().enumerate() {
            if self.node_box(i).contains_open(p) {
                out.push((i, self.dist_to_end[i]));
            }
        }
        out
    }

    /// Minimal chain from `p`. Ties prefer a central start and wide overlaps,
    /// then (level, origin).
    pub fn chain_from(&self, p: &[f64], u: &CellSet) -> Result<Chain, TopologyError> {
        self.chain_with(p, u, false)
    }

    /// Like `chain_from`, but the first box holds `p` at least a quarter of
    /// its side from every face whenever such a box reaches the margin;
    /// the chain may then be longer than minimal.
    pub fn central_chain_from(&self, p: &[f64], u: &CellSet) -> Result<Chain, TopologyError> {
        self.chain_with(p, u, true)
    }

    fn chain_with(&self, p: &[f64], u: &CellSet, central: bool) -> Result<Chain, TopologyError> {
        let d = self.domain;
        let cell = d.cell_of(p).ok_or(TopologyError::PointOutside)?;
        if !self.u_flags[cell] {
            return Err(TopologyError::PointOutside);
        }
        let starts = self.start_nodes(p);
        // Shortest distance first; among those, the box holding `p` most centrally.
        let centrality = |i: usize| -> f64 {
            let b = self.node_box(i);
            (0..d.dim).map(|a| (p[a] - b.lo[a]).min(b.hi[a] - p[a]) / (b.hi[a] - b.lo[a])).fold(f64::INFINITY, f64::min)
        };
        let mut cands: Vec<(usize, usize)> = starts.into_iter().filter(|(_, dd)| *dd != usize::MAX).collect();
        cands.sort_by(|(i, di), (j, dj)| {
            let (ci, cj) = (centrality(*i), centrality(*j));
            let first = if central { (ci < 0.24).cmp(&(cj < 0.24)) } else { std::cmp::Ordering::Equal };
            let level = |k: usize| if central { self.nodes[k].level } else { 0 };
            first
                .then(level(*i).cmp(&level(*j)))
                .then(di.cmp(dj))
                .then(cj.total_cmp(&ci))
                .then(self.nodes[*i].cmp(&self.nodes[*j]))
        });
        if cands.is_empty() {
            return Err(if reaches_end_by_cells(cell, u, d) {
                TopologyError::BoxTooCoarse
            } else {
                TopologyError::NoExit
            });
        }
        let mut last_err = TopologyError::WaypointClash;
        for &(first, len) in &cands {
            match self.build_chain(p, first, len) {
                Ok(c) => return Ok(c),
                Err(e) => last_err = e,
            }
        }
        Err(last_err)
    }

    fn build_chain(&self, p: &[f64], first: usize, len: usize) -> Result<Chain, TopologyError> {
        let d = self.domain;
        let mut ids = vec![first];
        let mut cur = first;
        for step in (1..len).rev() {
            // Prefer the widest overlap so waypoints stay well inside both boxes.
            let here = self.node_box(cur);
            let overlap = |j: usize| -> f64 {
                let b = self.node_box(j);
                let vol = |c: &Cuboid| (0..d.dim).map(|a| c.hi[a] - c.lo[a]).product::<f64>();
                let inter = box_intersect(&here, &b).unwrap().map(|c| vol(&c)).unwrap_or(0.0);
                inter / vol(&here).max(vol(&b))
            };
            let next = self
                .neighbors(cur)
                .into_iter()
                .filter(|j| self.dist_to_end[*j] == step)
                .min_by(|&i, &j| overlap(j).total_cmp(&overlap(i)).then(self.nodes[i].cmp(&self.nodes[j])))
                .expect("distance labels are consistent");
            ids.push(next);
            cur = next;
        }
        let boxes: Vec<Cuboid> = ids.iter().map(|i| self.node_box(*i)).collect();
        let mut waypoints = Vec::with_capacity(boxes.len() + 1);
        for m in 0..boxes.len().saturating_sub(1) {
            let ov = box_intersect(&boxes[m], &boxes[m + 1]).unwrap().expect("consecutive boxes overlap");
            waypoints.push(ov.shrink(0.5));
        }
        let half = self.terminal[*ids.last().unwrap()].clone().unwrap();
        let mut last = half.shrink(0.5);
        if let Some(prev) = waypoints.last() {
            if last.touches(prev) {
                last = half.shrink(0.25);
                if last.touches(prev) {
                    return Err(TopologyError::WaypointClash);
                }
            }
        }
        waypoints.push(last);
        if waypoints[0].contains_closed(p) {
            return Err(TopologyError::WaypointClash);
        }
        let b1 = &boxes[0];
        let mut r = (0..d.dim).map(|a| (p[a] - b1.lo[a]).min(b1.hi[a] - p[a])).fold(f64::INFINITY, f64::min) * 0.5;
        let w0 = loop {
            let w = Cuboid { lo: p.iter().map(|v| v - r).collect(), hi: p.iter().map(|v| v + r).collect() };
            if !w.touches(&waypoints[0]) {
                break w;
            }
            r *= 0.5;
        };
        waypoints.insert(0, w0);
        Ok(Chain { start: p.to_vec(), boxes, waypoints })
    }
}

/// Face-adjacency search from `cell` inside `u` to an End-adjacent cell.
fn reaches_end_by_cells(cell: usize, u: &CellSet, domain: &GridDomain) -> bool {
    let inside = u.flags(domain.total_cells());
    let mut seen = vec![false; domain.total_cells()];
    let mut queue = VecDeque::from([cell]);
    seen[cell] = true;
    while let Some(c) = queue.pop_front() {
        if domain.is_end_adjacent(c) {
            return true;
        }
        for nb in domain.neighbors(c) {
            if inside[nb] && !seen[nb] {
                seen[nb] = true;
                queue.push_back(nb);
            }
        }
    }
    false
}

/// Minimal chain of boxes (side `box_side`, shrunk down to `2h`) from `p` to
/// the margin strip, staying in `U`.
pub fn find_chain(p: &[f64], u: &CellSet, domain: &GridDomain, box_side: f64) -> Result<Chain, TopologyError> {
    BoxCover::new(u, domain, box_side).chain_from(p, u)
}

/// Checks every structural chain invariant, returning the first violation.
pub fn check_chain(chain: &Chain, u: &CellSet, domain: &GridDomain) -> Result<(), String> {
    let l = chain.boxes.len();
    if l == 0 {
        return Err("empty chain".into());
    }
    if chain.waypoints.len() != l + 1 {
        return Err("waypoint count must be one more than box count".into());
    }
    if !chain.boxes[0].contains_open(&chain.start) {
        return Err("start not in first box".into());
    }
    if !chain.waypoints[0].contains_open(&chain.start) {
        return Err("first waypoint misses the start".into());
    }
    if !chain.boxes[0].compactly_contains(&chain.waypoints[0]) {
        return Err("first waypoint not compactly inside first box".into());
    }
    let uf = u.flags(domain.total_cells());
    for (m, b) in chain.boxes.iter().enumerate() {
        for (n, other) in chain.boxes.iter().enumerate() {
            if m < n && b == other {
                return Err(format!("boxes {m} and {n} coincide"));
            }
        }
        // Every cell under the box is in U or the margin strip.
        let lo = domain.ext_cell_of(&b.lo);
        let hi = domain.ext_cell_of(&b.hi.iter().map(|v| v - 0.5 * domain.h).collect::<Vec<_>>());
        let mut e = lo;
        loop {
            match domain.kind_ext(e) {
                CellKind::Margin => {}
                CellKind::Mask if uf[domain.flat_of_ext(e).unwrap()] => {}
                _ => return Err(format!("box {m} leaves U")),
            }
            let mut a = 0;
            loop {
                if a >= domain.dim {
                    break;
                }
                e[a] += 1;
                if e[a] <= hi[a] {
                    break;
                }
                e[a] = lo[a];
                a += 1;
            }
            if a >= domain.dim {
                break;
            }
        }
        if m + 1 < l {
            let ov = box_intersect(b, &chain.boxes[m + 1]).map_err(|e| e.to_string())?;
            let Some(ov) = ov else { return Err(format!("boxes {m},{} do not overlap", m + 1)) };
            if !ov.compactly_contains(&chain.waypoints[m + 1]) {
                return Err(format!("waypoint {} not inside overlap", m + 1));
            }
        }
    }
    let last = &chain.waypoints[l];
    if !chain.boxes[l - 1].compactly_contains(last) {
        return Err("terminal waypoint not inside last box".into());
    }
    for corner in last.lattice(2) {
        if domain.kind_ext(domain.ext_cell_of(&corner)) != CellKind::Margin {
            return Err("terminal waypoint leaves the margin strip".into());
        }
    }
    for i in 0..chain.waypoints.len() {
        for j in i + 1..chain.waypoints.len() {
            if chain.waypoints[i].touches(&chain.waypoints[j]) {
                return Err(format!("waypoints {i} and {j} meet"));
            }
        }
    }
    Ok(())
}

/// Vertices: the start, a point in each consecutive overlap, and a margin point.
pub fn path_to_infinity(chain: &Chain) -> Vec<Vec<f64>> {
    let mut out = vec![chain.start.clone()];
    for w in &chain.waypoints[1..] {
        out.push(w.center());
    }
    out
}

/// Dilation tubes from `C` out to `U`.
pub fn nested_opens(c: &CellSet, u: &CellSet, domain: &GridDomain) -> Result<Vec<CellSet>, TopologyError> {
    if !c.is_subset(u) {
        return Err(TopologyError::NotContained);
    }
    for comp in components(c, domain) {
        if !comp.cells.iter().any(|x| domain.is_end_adjacent(*x)) {
            return Err(TopologyError::NotNoncompact);
        }
    }
    let total = domain.total_cells();
    let uf = u.flags(total);
    let mut cur = c.flags(total);
    let mut out = vec![CellSet::from_flags(&cur)];
    loop {
        let mut next = cur.clone();
        for x in 0..total {
            if cur[x] {
                for nb in domain.neighbors(x) {
                    if uf[nb] {
                        next[nb] = true;
                    }
                }
            }
        }
        if next == cur {
            break;
        }
        out.push(CellSet::from_flags(&next));
        cur = next;
    }
    if out.last().unwrap() != u {
        return Err(TopologyError::UnreachedComponent);
    }
    Ok(out)
}

fn chebyshev_dilate(s: &[bool], r: usize, domain: &GridDomain) -> Vec<bool> {
    let total = domain.total_cells();
    let mut out = s.to_vec();
    let ri = r as i64;
    for x in 0..total {
        if !s[x] {
            continue;
        }
        let c = domain.coords(x);
        let range = |a: usize| if a < domain.dim { -ri..=ri } else { 0..=0 };
        for dz in range(2) {
            for dy in range(1) {
                for dx in range(0) {
                    let e = [c[0] as i64 + dx, c[1] as i64 + dy, c[2] as i64 + dz];
                    if let Some(i) = domain.flat_of_ext(e) {
                        out[i] = true;
                    }
                }
            }
        }
    }
    out
}

/// A closed pair `(C, U)` with `C ⊂ U` and `closure(U)` disjoint from `K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedFamily {
    pub c: CellSet,
    pub u: CellSet,
}

/// Splits `D` into disjoint noncompact closed families with tubular opens
/// avoiding `K`.
pub fn decompose_closed(d: &CellSet, k: &CellSet, domain: &GridDomain) -> Result<Vec<ClosedFamily>, TopologyError> {
    let total = domain.total_cells();
    if d.cells.iter().any(|x| !domain.mask[*x] || k.contains(*x)) {
        return Err(TopologyError::NotContained);
    }
    let comps = components(d, domain);
    for comp in &comps {
        if !comp.cells.iter().any(|x| domain.is_end_adjacent(*x)) {
            return Err(TopologyError::CompactComponent);
        }
    }
    let near_k = chebyshev_dilate(&k.flags(total), 1, domain);
    let mut tubes = Vec::with_capacity(comps.len());
    for comp in &comps {
        if comp.cells.iter().any(|x| near_k[*x]) {
            return Err(TopologyError::NoRoom);
        }
        let grown = chebyshev_dilate(&comp.flags(total), 2, domain);
        tubes.push((0..total).map(|x| grown[x] && domain.mask[x] && !near_k[x]).collect::<Vec<bool>>());
    }
    // Merge families whose tubes meet or touch across a face.
    let mut parent: Vec<usize> = (0..comps.len()).collect();
    fn find(p: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while p[r] != r {
            r = p[r];
        }
        p[i] = r;
        r
    }
    for i in 0..comps.len() {
        let closure = chebyshev_dilate(&tubes[i], 1, domain);
        for j in i + 1..comps.len() {
            if (0..total).any(|x| closure[x] && tubes[j][x]) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: BTreeMap<usize, (Vec<bool>, Vec<bool>)> = BTreeMap::new();
    for i in 0..comps.len() {
        let r = find(&mut parent, i);
        let e = groups.entry(r).or_insert_with(|| (vec![false; total], vec![false; total]));
        for &x in &comps[i].cells {
            e.0[x] = true;
        }
        for x in 0..total {
            e.1[x] |= tubes[i][x];
        }
    }
    Ok(groups
        .into_values()
        .map(|(c, u)| ClosedFamily { c: CellSet::from_flags(&c), u: CellSet::from_flags(&u) })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{mask_from_spec, DomainSpec, FaceMark, Shape};

    fn square(n: usize) -> GridDomain {
        mask_from_spec(&DomainSpec {
            dim: 2,
            window: Cuboid::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap(),
            h: 1.0 / n as f64,
            shape: Shape::All,
            faces: Default::default(),
            margin: 8,
            ends: None,
        })
        .unwrap()
    }

    fn cells(d: &GridDomain, ij: &[(usize, usize)]) -> CellSet {
        CellSet::new(ij.iter().map(|(i, j)| d.index([*i, *j, 0])).collect())
    }

    #[test]
    fn components_of_separated_blocks() {
        let d = square(8);
        let s = cells(&d, &[(0, 0), (1, 0), (0, 1), (1, 1), (5, 5), (6, 5), (5, 6), (6, 6)]);
        assert_eq!(components(&s, &d).len(), 2);
    }

    #[test]
    fn diagonal_cells_are_separate_components() {
        let d = square(8);
        let s = cells(&d, &[(2, 2), (3, 3)]);
        assert_eq!(components(&s, &d).len(), 2);
    }

    #[test]
    fn hull_fills_an_enclosed_hole() {
        let d = square(8);
        let mut ring = Vec::new();
        for i in 2..6 {
            for j in 2..6 {
                if !(3..5).contains(&i) || !(3..5).contains(&j) {
                    ring.push((i, j));
                }
            }
        }
        let k = cells(&d, &ring);
        let hole = cells(&d, &[(3, 3), (3, 4), (4, 3), (4, 4)]);
        assert_eq!(hull(&k, &d, None).unwrap(), k.union(&hole));
    }

    #[test]
    fn hull_trivial_cases() {
        let d = square(8);
        let single = cells(&d, &[(4, 4)]);
        assert_eq!(hull(&single, &d, None).unwrap(), single);
        assert_eq!(hull(&CellSet::default(), &d, None).unwrap(), CellSet::default());
    }

    #[test]
    fn exhaustion_on_full_square_is_nested_squares() {
        let d = square(12);
        let seq = exhaustion_sequence(&d, 3).unwrap();
        assert_eq!(seq.sets.len(), 3);
        let sizes: Vec<usize> = seq.sets.iter().map(|s| s.len()).collect();
        // dmax = 5, stride = 2: distance >= 4 is the central 4x4 block.
        assert_eq!(sizes, vec![16, 64, 144]);
    }

    #[test]
    fn exhaustion_count_one_is_whole_mask() {
        let d = square(6);
        let seq = exhaustion_sequence(&d, 1).unwrap();
        assert_eq!(seq.sets, vec![d.mask_set()]);
        assert_eq!(exhaustion_sequence(&d, 9), Err(TopologyError::CountTooLarge(9)));
    }

    #[test]
    fn chain_from_center_of_square() {
        let d = square(16);
        let u = d.mask_set();
        let chain = find_chain(&[0.53, 0.53], &u, &d, 0.25).unwrap();
        check_chain(&chain, &u, &d).unwrap();
        assert!(chain.len() >= 2);
        assert_eq!(path_to_infinity(&chain).len(), chain.len() + 1);
    }

    #[test]
    fn sealed_pocket_has_no_exit() {
        let d = square(8);
        let mut wall = Vec::new();
        for i in 1..7 {
            for j in 1..7 {
                if !(3..5).contains(&i) || !(3..5).contains(&j) {
                    wall.push((i, j));
                }
            }
        }
        let u = d.mask_set().difference(&cells(&d, &wall));
        assert_eq!(find_chain(&[0.5, 0.5], &u, &d, 0.25).unwrap_err(), TopologyError::NoExit);
    }

    #[test]
    fn one_cell_corridor_is_too_coarse() {
        let d = square(8);
        let mut u = Vec::new();
        for i in 0..8 {
            u.push((i, 4));
        }
        let u = cells(&d, &u);
        let err = find_chain(&[0.5 + 1.0 / 16.0, 0.5 + 1.0 / 16.0], &u, &d, 0.25).unwrap_err();
        assert_eq!(err, TopologyError::BoxTooCoarse);
    }

    #[test]
    fn nested_opens_from_ray() {
        let d = square(8);
        let ray = cells(&d, &[(4, 4), (5, 4), (6, 4), (7, 4)]);
        let tubes = nested_opens(&ray, &d.mask_set(), &d).unwrap();
        assert_eq!(tubes.first().unwrap(), &ray);
        assert_eq!(tubes.last().unwrap(), &d.mask_set());
        assert_eq!(nested_opens(&d.mask_set(), &d.mask_set(), &d).unwrap().len(), 1);
        let isolated = cells(&d, &[(4, 4)]);
        assert_eq!(nested_opens(&isolated, &d.mask_set(), &d), Err(TopologyError::NotNoncompact));
    }

    #[test]
    fn decompose_two_rays() {
        let d = square(16);
        let dset = cells(&d, &[(12, 3), (13, 3), (14, 3), (15, 3), (12, 12), (13, 12), (14, 12), (15, 12)]);
        let k = cells(&d, &[(2, 7), (3, 7), (2, 8), (3, 8)]);
        let fams = decompose_closed(&dset, &k, &d).unwrap();
        assert_eq!(fams.len(), 2);
        let isolated = cells(&d, &[(8, 8)]);
        assert_eq!(decompose_closed(&isolated, &k, &d), Err(TopologyError::CompactComponent));
        assert!(decompose_closed(&CellSet::default(), &k, &d).unwrap().is_empty());
    }

    #[test]
    fn excluded_faces_block_exit() {
        let mut spec = DomainSpec {
            dim: 2,
            window: Cuboid::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap(),
            h: 0.125,
            shape: Shape::All,
            faces: Default::default(),
            margin: 8,
            ends: None,
        };
        for k in ["-x", "-y", "+y"] {
            spec.faces.insert(k.into(), FaceMark::Excluded);
        }
        let d = mask_from_spec(&spec).unwrap();
        let u = d.mask_set();
        let chain = find_chain(&[0.1, 0.5], &u, &d, 0.25).unwrap();
        check_chain(&chain, &u, &d).unwrap();
        assert!(chain.waypoints.last().unwrap().lo[0] >= 1.0);
    }
}
