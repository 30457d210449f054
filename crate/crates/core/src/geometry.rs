//! Axis-aligned boxes, cell grids and domain specifications.
//!
//! A [`GridDomain`] models a noncompact manifold truncated to a window. Cells
//! are closed cubes of side `h`; a cell belongs to a set iff its center does.
//! Window faces are marked [`FaceMark::End`] (at infinity) or excluded, and
//! interior holes can be flagged as ends through the `ends` shape. Cells beyond
//! End faces (up to `margin` deep) and end-hole cells form the margin strip:
//! constructions may place terminal waypoints there, verification never samples
//! it.

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("invalid box: lo must be strictly below hi on every axis")]
    InvalidBox,
    #[error("dimension must be 1, 2 or 3 (got {0})")]
    BadDimension(usize),
    #[error("window extent is not a whole number of cells of side {0}")]
    WindowNotAligned(f64),
    #[error("mask is empty")]
    EmptyMask,
    #[error("no End face is adjacent to a mask cell")]
    NoEndFace,
    #[error("invalid domain spec: {0}")]
    Spec(String),
}

/// Axis-aligned box `lo < hi`. Whether it is read as open or closed is decided
/// at each use site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cuboid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Cuboid {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, GeometryError> {
        if lo.len() != hi.len() {
            return Err(GeometryError::DimensionMismatch(lo.len(), hi.len()));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a < b)) {
            return Err(GeometryError::InvalidBox);
        }
        Ok(Cuboid { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    pub fn half_widths(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (b - a)).collect()
    }

    /// Open containment.
    pub fn contains_open(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (a, b))| *v > *a && *v < *b)
    }

    /// Closed containment.
    pub fn contains_closed(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (a, b))| *v >= *a && *v <= *b)
    }

    /// `other` lies inside the closure of `self`.
    pub fn contains_box(&self, other: &Cuboid) -> bool {
        (0..self.dim()).all(|i| other.lo[i] >= self.lo[i] && other.hi[i] <= self.hi[i])
    }

    /// Compact containment: closure of `other` inside the open `self`.
    pub fn compactly_contains(&self, other: &Cuboid) -> bool {
        (0..self.dim()).all(|i| other.lo[i] > self.lo[i] && other.hi[i] < self.hi[i])
    }

    /// Concentric sub-box scaled by `factor` in (0, 1].
    pub fn shrink(&self, factor: f64) -> Cuboid {
        let c = self.center();
        let hw = self.half_widths();
        Cuboid {
            lo: c.iter().zip(&hw).map(|(c, w)| c - factor * w).collect(),
            hi: c.iter().zip(&hw).map(|(c, w)| c + factor * w).collect(),
        }
    }

    /// Closed boxes share at least one point.
    pub fn touches(&self, other: &Cuboid) -> bool {
        (0..self.dim()).all(|i| self.lo[i] <= other.hi[i] && other.lo[i] <= self.hi[i])
    }

    /// Lattice including the boundary: `per_axis` points on every axis.
    pub fn lattice(&self, per_axis: usize) -> Vec<Vec<f64>> {
        let n = per_axis.max(2);
        let d = self.dim();
        let total = n.pow(d as u32);
        let mut out = Vec::with_capacity(total);
        for flat in 0..total {
            let mut rem = flat;
            let mut p = Vec::with_capacity(d);
            for i in 0..d {
                let k = rem % n;
                rem /= n;
                let t = k as f64 / (n - 1) as f64;
                p.push(self.lo[i] + t * (self.hi[i] - self.lo[i]));
            }
            out.push(p);
        }
        out
    }
}

/// Open intersection of two boxes, absent when empty on some axis.
pub fn box_intersect(a: &Cuboid, b: &Cuboid) -> Result<Option<Cuboid>, GeometryError> {
    if a.dim() != b.dim() {
        return Err(GeometryError::DimensionMismatch(a.dim(), b.dim()));
    }
    let mut lo = Vec::with_capacity(a.dim());
    let mut hi = Vec::with_capacity(a.dim());
    for i in 0..a.dim() {
        let l = a.lo[i].max(b.lo[i]);
        let h = a.hi[i].min(b.hi[i]);
        if !(l < h) {
            return Ok(None);
        }
        lo.push(l);
        hi.push(h);
    }
    Ok(Some(Cuboid { lo, hi }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaceMark {
    End,
    Excluded,
}

/// Primitive shape expression evaluated at cell centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Shape {
    All,
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
    Union { args: Vec<Shape> },
    Intersect { args: Vec<Shape> },
    Diff { a: std::boxed::Box<Shape>, b: std::boxed::Box<Shape> },
}

impl Shape {
    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Shape::All => true,
            Shape::Box { lo, hi } => x.iter().zip(lo.iter().zip(hi)).all(|(v, (a, b))| *v >= *a && *v <= *b),
            Shape::Ball { center, radius } => {
                let r2: f64 = x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
                r2 <= radius * radius
            }
            Shape::Union { args } => args.iter().any(|s| s.contains(x)),
            Shape::Intersect { args } => args.iter().all(|s| s.contains(x)),
            Shape::Diff { a, b } => a.contains(x) && !b.contains(x),
        }
    }
}

fn default_margin() -> usize {
    8
}

/// JSON description of a domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub dim: usize,
    pub window: Cuboid,
    pub h: f64,
    pub shape: Shape,
    /// Keys `-x`, `+x`, `-y`, `+y`, `-z`, `+z`; missing faces default to End.
    #[serde(default)]
    pub faces: std::collections::BTreeMap<String, FaceMark>,
    #[serde(default = "default_margin")]
    pub margin: usize,
    /// Non-mask cells whose centers satisfy this shape are end holes.
    #[serde(default)]
    pub ends: Option<Shape>,
}

/// Classification of an (extended) cell index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Mask,
    /// In the margin strip: an end hole or beyond an End face.
    Margin,
    /// Neither in M nor in the margin.
    Void,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDomain {
    pub dim: usize,
    pub window: Cuboid,
    pub h: f64,
    /// Cells per axis; unused axes hold 1.
    pub n: [usize; 3],
    #[serde(with = "bitstring")]
    pub mask: Vec<bool>,
    #[serde(with = "bitstring")]
    pub end_cells: Vec<bool>,
    /// `faces[axis][0]` is the low face, `faces[axis][1]` the high face.
    pub faces: Vec<[FaceMark; 2]>,
    pub margin: usize,
}

mod bitstring {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[bool], s: S) -> Result<S::Ok, S::Error> {
        let text: String = v.iter().map(|b| if *b { '1' } else { '0' }).collect();
        s.serialize_str(&text)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        let text = String::deserialize(d)?;
        text.chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                _ => Err(serde::de::Error::custom("bit strings hold only 0 and 1")),
            })
            .collect()
    }
}

/// A set of mask cells, stored as sorted flat indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct CellSet {
    pub cells: Vec<usize>,
}

impl CellSet {
    pub fn new(mut cells: Vec<usize>) -> Self {
        cells.sort_unstable();
        cells.dedup();
        CellSet { cells }
    }

    pub fn from_flags(flags: &[bool]) -> Self {
        CellSet { cells: flags.iter().enumerate().filter(|(_, f)| **f).map(|(i, _)| i).collect() }
    }

    pub fn flags(&self, total: usize) -> Vec<bool> {
        let mut f = vec![false; total];
        for &c in &self.cells {
            f[c] = true;
        }
        f
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn contains(&self, c: usize) -> bool {
        self.cells.binary_search(&c).is_ok()
    }

    pub fn union(&self, other: &CellSet) -> CellSet {
        let mut v = self.cells.clone();
        v.extend_from_slice(&other.cells);
        CellSet::new(v)
    }

    pub fn difference(&self, other: &CellSet) -> CellSet {
        CellSet { cells: self.cells.iter().copied().filter(|c| !other.contains(*c)).collect() }
    }

    pub fn intersection(&self, other: &CellSet) -> CellSet {
        CellSet { cells: self.cells.iter().copied().filter(|c| other.contains(*c)).collect() }
    }

    pub fn is_subset(&self, other: &CellSet) -> bool {
        self.cells.iter().all(|c| other.contains(*c))
    }
}

impl GridDomain {
    /// Builds a domain directly from flags. `end_cells` may be empty.
    pub fn from_parts(
        window: Cuboid,
        h: f64,
        mask: Vec<bool>,
        end_cells: Vec<bool>,
        faces: Vec<[FaceMark; 2]>,
        margin: usize,
    ) -> Result<Self, GeometryError> {
        let dim = window.dim();
        if !(1..=3).contains(&dim) {
            return Err(GeometryError::BadDimension(dim));
        }
        if faces.len() != dim {
            return Err(GeometryError::DimensionMismatch(faces.len(), dim));
        }
        let mut n = [1usize; 3];
        for i in 0..dim {
            let ext = (window.hi[i] - window.lo[i]) / h;
            let k = ext.round();
            if k < 1.0 || (ext - k).abs() > 1e-6 {
                return Err(GeometryError::WindowNotAligned(h));
            }
            n[i] = k as usize;
        }
        let total = n[0] * n[1] * n[2];
        let end_cells = if end_cells.is_empty() { vec![false; total] } else { end_cells };
        if mask.len() != total || end_cells.len() != total {
            return Err(GeometryError::Spec("flag length does not match grid".into()));
        }
        let end_cells: Vec<bool> = end_cells.iter().zip(&mask).map(|(e, m)| *e && !*m).collect();
        let d = GridDomain { dim, window, h, n, mask, end_cells, faces, margin: margin.max(1) };
        if !d.mask.iter().any(|m| *m) {
            return Err(GeometryError::EmptyMask);
        }
        if !(0..total).any(|c| d.mask[c] && d.is_end_adjacent(c)) {
            return Err(GeometryError::NoEndFace);
        }
        Ok(d)
    }

    pub fn total_cells(&self) -> usize {
        self.n[0] * self.n[1] * self.n[2]
    }

    pub fn index(&self, ijk: [usize; 3]) -> usize {
        ijk[0] + self.n[0] * (ijk[1] + self.n[1] * ijk[2])
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.n[0];
        let j = (idx / self.n[0]) % self.n[1];
        let k = idx / (self.n[0] * self.n[1]);
        [i, j, k]
    }

    pub fn cell_center(&self, idx: usize) -> Vec<f64> {
        let c = self.coords(idx);
        (0..self.dim).map(|a| self.window.lo[a] + (c[a] as f64 + 0.5) * self.h).collect()
    }

    pub fn cell_box(&self, idx: usize) -> Cuboid {
        let c = self.coords(idx);
        let lo: Vec<f64> = (0..self.dim).map(|a| self.window.lo[a] + c[a] as f64 * self.h).collect();
        let hi = lo.iter().map(|v| v + self.h).collect();
        Cuboid { lo, hi }
    }

    /// Extended cell coordinate containing `x` (may lie outside the window).
    pub fn ext_cell_of(&self, x: &[f64]) -> [i64; 3] {
        let mut out = [0i64; 3];
        for a in 0..self.dim {
            out[a] = ((x[a] - self.window.lo[a]) / self.h).floor() as i64;
        }
        out
    }

    /// Flat index of the in-window cell containing `x`.
    pub fn cell_of(&self, x: &[f64]) -> Option<usize> {
        let e = self.ext_cell_of(x);
        self.flat_of_ext(e)
    }

    pub fn flat_of_ext(&self, e: [i64; 3]) -> Option<usize> {
        for a in 0..3 {
            if e[a] < 0 || e[a] >= self.n[a] as i64 {
                return None;
            }
        }
        Some(self.index([e[0] as usize, e[1] as usize, e[2] as usize]))
    }

    /// Classifies any integer cell coordinate, including the strip outside the window.
    pub fn kind_ext(&self, e: [i64; 3]) -> CellKind {
        if let Some(idx) = self.flat_of_ext(e) {
            if self.mask[idx] {
                return CellKind::Mask;
            }
            if self.end_cells[idx] {
                return CellKind::Margin;
            }
            return CellKind::Void;
        }
        for a in 0..self.dim {
            let n = self.n[a] as i64;
            if e[a] < 0 {
                if self.faces[a][0] != FaceMark::End || -e[a] > self.margin as i64 {
                    return CellKind::Void;
                }
            } else if e[a] >= n && (self.faces[a][1] != FaceMark::End || e[a] - n + 1 > self.margin as i64) {
                return CellKind::Void;
            }
        }
        CellKind::Margin
    }

    /// Face neighbors within the window.
    pub fn neighbors(&self, idx: usize) -> Vec<usize> {
        let c = self.coords(idx);
        let mut out = Vec::with_capacity(2 * self.dim);
        for a in 0..self.dim {
            if c[a] > 0 {
                let mut d = c;
                d[a] -= 1;
                out.push(self.index(d));
            }
            if c[a] + 1 < self.n[a] {
                let mut d = c;
                d[a] += 1;
                out.push(self.index(d));
            }
        }
        out
    }

    /// A mask cell with a face across which lies the margin strip.
    pub fn is_end_adjacent(&self, idx: usize) -> bool {
        let c = self.coords(idx);
        for a in 0..self.dim {
            if c[a] == 0 && self.faces[a][0] == FaceMark::End {
                return true;
            }
            if c[a] + 1 == self.n[a] && self.faces[a][1] == FaceMark::End {
                return true;
            }
        }
        self.neighbors(idx).into_iter().any(|nb| self.end_cells[nb])
    }

    pub fn mask_set(&self) -> CellSet {
        CellSet::from_flags(&self.mask)
    }

    /// True for points inside a mask cell (closed cells, window only).
    pub fn in_mask(&self, x: &[f64]) -> bool {
        if !self.window.contains_closed(x) {
            return false;
        }
        let mut e = self.ext_cell_of(x);
        for a in 0..self.dim {
            if e[a] == self.n[a] as i64 {
                e[a] -= 1;
            }
        }
        self.flat_of_ext(e).map(|i| self.mask[i]).unwrap_or(false)
    }

    /// Chebyshev cell distance from each cell to the margin strip, minus one:
    /// End-adjacent cells get 0. Cells with no End anywhere get `usize::MAX`.
    pub fn end_distance(&self) -> Vec<usize> {
        let total = self.total_cells();
        let mut dist = vec![usize::MAX; total];
        for idx in 0..total {
            let c = self.coords(idx);
            for a in 0..self.dim {
                if self.faces[a][0] == FaceMark::End {
                    dist[idx] = dist[idx].min(c[a]);
                }
                if self.faces[a][1] == FaceMark::End {
                    dist[idx] = dist[idx].min(self.n[a] - 1 - c[a]);
                }
            }
        }
        // Multi-source king-move search from end holes.
        let mut hole = vec![usize::MAX; total];
        let mut queue = VecDeque::new();
        for idx in 0..total {
            if self.end_cells[idx] {
                hole[idx] = 0;
                queue.push_back(idx);
            }
        }
        while let Some(idx) = queue.pop_front() {
            let c = self.coords(idx);
            for nb in self.king_neighbors(c) {
                if hole[nb] == usize::MAX {
                    hole[nb] = hole[idx] + 1;
                    queue.push_back(nb);
                }
            }
        }
        for idx in 0..total {
            if hole[idx] != usize::MAX && hole[idx] > 0 {
                dist[idx] = dist[idx].min(hole[idx] - 1);
            }
        }
        dist
    }

    fn king_neighbors(&self, c: [usize; 3]) -> Vec<usize> {
        let mut out = Vec::new();
        let r = |a: usize| if a < self.dim { -1i64..=1 } else { 0..=0 };
        for dz in r(2) {
            for dy in r(1) {
                for dx in r(0) {
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    let e = [c[0] as i64 + dx, c[1] as i64 + dy, c[2] as i64 + dz];
                    if let Some(i) = self.flat_of_ext(e) {
                        out.push(i);
                    }
                }
            }
        }
        out
    }

    /// Continuous distance (in cells, L∞) from a point to the margin strip.
    pub fn end_distance_at(&self, x: &[f64]) -> f64 {
        let mut best = f64::INFINITY;
        for a in 0..self.dim {
            if self.faces[a][0] == FaceMark::End {
                best = best.min((x[a] - self.window.lo[a]) / self.h);
            }
            if self.faces[a][1] == FaceMark::End {
                best = best.min((self.window.hi[a] - x[a]) / self.h);
            }
        }
        for idx in 0..self.total_cells() {
            if !self.end_cells[idx] {
                continue;
            }
            let b = self.cell_box(idx);
            let mut d: f64 = 0.0;
            for a in 0..self.dim {
                let g = (b.lo[a] - x[a]).max(x[a] - b.hi[a]).max(0.0);
                d = d.max(g);
            }
            best = best.min(d / self.h);
        }
        best.max(0.0)
    }

    /// Lattice samples inside a cell: `density` points per axis at offsets
    /// `(i + 1/2)/density`, strictly interior to the cell.
    pub fn cell_samples(&self, idx: usize, density: usize, out: &mut Vec<Vec<f64>>) {
        let d = density.max(1);
        let b = self.cell_box(idx);
        let total = d.pow(self.dim as u32);
        for flat in 0..total {
            let mut rem = flat;
            let mut p = Vec::with_capacity(self.dim);
            for a in 0..self.dim {
                let k = rem % d;
                rem /= d;
                p.push(b.lo[a] + (k as f64 + 0.5) / d as f64 * self.h);
            }
            out.push(p);
        }
    }

    /// Cells whose closed cube meets the open box.
    pub fn cells_overlapping(&self, b: &Cuboid) -> Vec<usize> {
        let mut lo = [0i64; 3];
        let mut hi = [0i64; 3];
        for a in 0..3 {
            if a < self.dim {
                lo[a] = ((b.lo[a] - self.window.lo[a]) / self.h).floor() as i64;
                hi[a] = ((b.hi[a] - self.window.lo[a]) / self.h).ceil() as i64 - 1;
                lo[a] = lo[a].max(0);
                hi[a] = hi[a].min(self.n[a] as i64 - 1);
            }
        }
        let mut out = Vec::new();
        if (0..self.dim).any(|a| lo[a] > hi[a]) {
            return out;
        }
        for k in lo[2]..=hi[2] {
            for j in lo[1]..=hi[1] {
                for i in lo[0]..=hi[0] {
                    out.push(self.index([i as usize, j as usize, k as usize]));
                }
            }
        }
        out
    }
}

const FACE_KEYS: [[&str; 2]; 3] = [["-x", "+x"], ["-y", "+y"], ["-z", "+z"]];

/// Deterministic rasterization of a [`DomainSpec`].
pub fn mask_from_spec(spec: &DomainSpec) -> Result<GridDomain, GeometryError> {
    if !(1..=3).contains(&spec.dim) {
        return Err(GeometryError::BadDimension(spec.dim));
    }
    if spec.window.dim() != spec.dim {
        return Err(GeometryError::DimensionMismatch(spec.window.dim(), spec.dim));
    }
    if !(spec.h > 0.0) {
        return Err(GeometryError::Spec("h must be positive".into()));
    }
    for key in spec.faces.keys() {
        if !FACE_KEYS[..spec.dim].iter().flatten().any(|k| k == key) {
            return Err(GeometryError::Spec(format!("unknown face key {key}")));
        }
    }
    let faces: Vec<[FaceMark; 2]> = (0..spec.dim)
        .map(|a| {
            let get = |s: &str| spec.faces.get(s).copied().unwrap_or(FaceMark::End);
            [get(FACE_KEYS[a][0]), get(FACE_KEYS[a][1])]
        })
        .collect();
    // Probe grid shape with an all-true mask, then rasterize.
    let mut n = [1usize; 3];
    for a in 0..spec.dim {
        let ext = (spec.window.hi[a] - spec.window.lo[a]) / spec.h;
        let k = ext.round();
        if k < 1.0 || (ext - k).abs() > 1e-6 {
            return Err(GeometryError::WindowNotAligned(spec.h));
        }
        n[a] = k as usize;
    }
    let total = n[0] * n[1] * n[2];
    let mut mask = vec![false; total];
    let mut ends = vec![false; total];
    for idx in 0..total {
        let i = idx % n[0];
        let j = (idx / n[0]) % n[1];
        let k = idx / (n[0] * n[1]);
        let c = [i, j, k];
        let x: Vec<f64> = (0..spec.dim).map(|a| spec.window.lo[a] + (c[a] as f64 + 0.5) * spec.h).collect();
        mask[idx] = spec.shape.contains(&x);
        if !mask[idx] {
            ends[idx] = spec.ends.as_ref().map(|s| s.contains(&x)).unwrap_or(false);
        }
    }
    GridDomain::from_parts(spec.window.clone(), spec.h, mask, ends, faces, spec.margin)
}
