//! Shared fixtures and brute-force oracles for the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use std::collections::VecDeque;
use subsol::construct::FloorSpec;
use subsol::geometry::{mask_from_spec, CellSet, Cuboid, DomainSpec, FaceMark, GridDomain};
use subsol::operator::{riemannian_laplacian, Coef, EllipticOperator};
use subsol::smoothfn::{Fn1D, SmoothFn};

pub fn domain(v: serde_json::Value) -> GridDomain {
    let spec: DomainSpec = serde_json::from_value(v).expect("domain spec");
    mask_from_spec(&spec).expect("valid domain")
}

pub fn square() -> GridDomain {
    domain(json!({"dim":2,"window":{"lo":[-1.0,-1.0],"hi":[1.0,1.0]},"h":0.125,"shape":{"op":"all"}}))
}

/// Square with a small disk removed; the hole is an end.
pub fn punctured() -> GridDomain {
    domain(json!({"dim":2,"window":{"lo":[-1.0,-1.0],"hi":[1.0,1.0]},"h":0.125,
        "shape":{"op":"diff","a":{"op":"all"},"b":{"op":"ball","center":[0.0,0.0],"radius":0.3}},
        "ends":{"op":"ball","center":[0.0,0.0],"radius":0.3}}))
}

/// Annulus whose inner and outer rings are both ends.
pub fn annulus() -> GridDomain {
    domain(json!({"dim":2,"window":{"lo":[-1.0,-1.0],"hi":[1.0,1.0]},"h":0.125,
        "shape":{"op":"diff","a":{"op":"ball","center":[0.0,0.0],"radius":0.95},"b":{"op":"ball","center":[0.0,0.0],"radius":0.35}},
        "ends":{"op":"all"}}))
}

pub fn cells_where(d: &GridDomain, f: impl Fn(&[f64]) -> bool) -> CellSet {
    CellSet::new((0..d.total_cells()).filter(|&c| d.mask[c] && f(&d.cell_center(c))).collect())
}

/// Cells `i0..i1 × j0..j1` of a planar grid.
pub fn block(d: &GridDomain, i0: usize, i1: usize, j0: usize, j1: usize) -> CellSet {
    let mut v = vec![];
    for i in i0..i1 {
        for j in j0..j1 {
            v.push(d.index([i, j, 0]));
        }
    }
    CellSet::new(v)
}

/// `base + amp·cos(k·x + phase)` in the plane.
pub fn wave(k: [f64; 2], amp: f64, base: f64, phase: f64) -> SmoothFn {
    let arg = SmoothFn::coord(2, 0).scale(k[0]).add(SmoothFn::coord(2, 1).scale(k[1]));
    arg.compose(Fn1D::Cos { freq: 1.0, phase }).scale(amp).add(SmoothFn::constant(2, base))
}

fn grid_samples() -> Vec<Vec<f64>> {
    (0..21).flat_map(|i| (0..21).map(move |j| vec![-1.0 + 0.1 * i as f64, -1.0 + 0.1 * j as f64])).collect()
}

/// Laplace-Beltrami operator of a conformal metric `e^{2u}·I`.
pub fn conformal_laplacian() -> EllipticOperator {
    let conf = wave([1.3, 0.7], 0.2, 0.0, 0.3).compose(Fn1D::Exp { a: 2.0, b: 0.0 });
    let zero = SmoothFn::constant(2, 0.0);
    riemannian_laplacian(vec![vec![conf.clone(), zero.clone()], vec![zero, conf]], &grid_samples()).expect("metric")
}

/// Variable-coefficient operator with smallest eigenvalue at least 0.25.
pub fn wavy_operator() -> EllipticOperator {
    EllipticOperator::generic(
        2,
        vec![
            vec![Coef::Field(wave([1.1, 0.4], 0.3, 1.0, 0.2)), Coef::Field(wave([0.5, 0.9], 0.2, 0.0, 1.0))],
            vec![Coef::Field(wave([0.5, 0.9], 0.2, 0.0, 1.0)), Coef::Field(wave([0.3, 1.7], 0.3, 1.0, 2.0))],
        ],
        vec![Coef::Field(wave([2.0, 0.1], 0.8, 0.0, 0.0)), Coef::Field(wave([0.4, 1.5], 0.8, 0.0, 1.0))],
        Coef::Const(0.0),
        0.25,
    )
    .expect("elliptic")
}

/// Random operator: diagonal entries in `[0.5, 1.5] ± 0.2` waves, an
/// off-diagonal wave of amplitude below 0.15, and drift waves.
pub fn random_operator(rng: &mut ChaCha8Rng) -> EllipticOperator {
    let mut w = |amp: f64, base: f64| {
        let k = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
        let phase = rng.gen_range(0.0..6.0);
        wave(k, amp, base, phase)
    };
    let a00 = w(0.2, 1.0);
    let a11 = w(0.2, 1.2);
    let a01 = w(0.1, 0.0);
    let b0 = w(0.5, 0.0);
    let b1 = w(0.5, 0.0);
    EllipticOperator::generic(
        2,
        vec![vec![Coef::Field(a00), Coef::Field(a01.clone())], vec![Coef::Field(a01), Coef::Field(a11)]],
        vec![Coef::Field(b0), Coef::Field(b1)],
        Coef::Const(0.0),
        0.25,
    )
    .expect("elliptic")
}

pub fn floors() -> [FloorSpec; 2] {
    [FloorSpec::constant(1.0), FloorSpec::EndProxy]
}

/// Random `n × n` domain on the unit square: cells kept with probability
/// `fill`, random face marks with at least one End face, optional random
/// end holes. Retries until the domain is valid.
pub fn random_domain(rng: &mut ChaCha8Rng, n: usize, fill: f64, holes: bool) -> GridDomain {
    loop {
        let total = n * n;
        let mask: Vec<bool> = (0..total).map(|_| rng.gen_bool(fill)).collect();
        let end_cells: Vec<bool> = (0..total).map(|_| holes && rng.gen_bool(0.03)).collect();
        let mut faces = vec![[FaceMark::End, FaceMark::End]; 2];
        for f in faces.iter_mut().flatten() {
            if rng.gen_bool(0.5) {
                *f = FaceMark::Excluded;
            }
        }
        let window = Cuboid::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        if let Ok(d) = GridDomain::from_parts(window, 1.0 / n as f64, mask, end_cells, faces, 4) {
            return d;
        }
    }
}

fn ij(d: &GridDomain, c: usize) -> (i64, i64) {
    let k = d.coords(c);
    (k[0] as i64, k[1] as i64)
}

/// Planar face neighbors inside the window.
pub fn grid_neighbors(d: &GridDomain, c: usize) -> Vec<usize> {
    let (i, j) = ij(d, c);
    let mut out = Vec::new();
    for (di, dj) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
        let (a, b) = (i + di, j + dj);
        if a >= 0 && b >= 0 && (a as usize) < d.n[0] && (b as usize) < d.n[1] {
            out.push(d.index([a as usize, b as usize, 0]));
        }
    }
    out
}

/// A planar cell touches an end: a window face marked End, or an end hole.
pub fn touches_end(d: &GridDomain, c: usize) -> bool {
    let (i, j) = ij(d, c);
    let faces = [
        (i == 0, d.faces[0][0]),
        (i as usize == d.n[0] - 1, d.faces[0][1]),
        (j == 0, d.faces[1][0]),
        (j as usize == d.n[1] - 1, d.faces[1][1]),
    ];
    if faces.iter().any(|(at, mark)| *at && *mark == FaceMark::End) {
        return true;
    }
    grid_neighbors(d, c).into_iter().any(|nb| d.end_cells[nb])
}

/// Hull by flood fill: `K` plus the cells of `mask ∖ K` not reachable from a
/// cell touching an end.
pub fn hull_oracle(d: &GridDomain, k: &CellSet) -> CellSet {
    let total = d.total_cells();
    let in_k = k.flags(total);
    let free = |c: usize| d.mask[c] && !in_k[c];
    let mut seen = vec![false; total];
    let mut queue: VecDeque<usize> = (0..total).filter(|&c| free(c) && touches_end(d, c)).collect();
    for &c in &queue {
        seen[c] = true;
    }
    while let Some(c) = queue.pop_front() {
        for nb in grid_neighbors(d, c) {
            if free(nb) && !seen[nb] {
                seen[nb] = true;
                queue.push_back(nb);
            }
        }
    }
    CellSet::new((0..total).filter(|&c| in_k[c] || (free(c) && !seen[c])).collect())
}

/// Components by union-find over face adjacency.
pub fn components_oracle(d: &GridDomain, s: &CellSet) -> Vec<CellSet> {
    let total = d.total_cells();
    let inside = s.flags(total);
    let mut parent: Vec<usize> = (0..total).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for &c in &s.cells {
        for nb in grid_neighbors(d, c) {
            if inside[nb] {
                let (a, b) = (find(&mut parent, c), find(&mut parent, nb));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for &c in &s.cells {
        let r = find(&mut parent, c);
        groups.entry(r).or_default().push(c);
    }
    groups.into_values().map(CellSet::new).collect()
}

/// Random planar tree of bounded depth over waves, bumps and 1-D maps that
/// are smooth on all of the window.
pub fn random_tree(rng: &mut ChaCha8Rng, depth: usize) -> SmoothFn {
    let leaf = |rng: &mut ChaCha8Rng| -> SmoothFn {
        match rng.gen_range(0..4) {
            0 => SmoothFn::constant(2, rng.gen_range(-2.0..2.0)),
            1 => SmoothFn::coord(2, rng.gen_range(0..2)),
            2 => {
                let b = Cuboid::new(vec![-1.2, -1.1], vec![1.1, 1.3]).unwrap();
                subsol::smoothfn::cube_bump(&b, &[rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)]).unwrap()
            }
            _ => {
                let k = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
                wave(k, rng.gen_range(0.1..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.0..6.0))
            }
        }
    };
    if depth == 0 {
        return leaf(rng);
    }
    match rng.gen_range(0..6) {
        0 => random_tree(rng, depth - 1).add(random_tree(rng, depth - 1)),
        1 => random_tree(rng, depth - 1).mul(random_tree(rng, depth - 1)),
        2 => random_tree(rng, depth - 1).scale(rng.gen_range(-3.0..3.0)),
        3 => random_tree(rng, depth - 1)
            .compose(Fn1D::Cos { freq: rng.gen_range(0.2..2.0), phase: rng.gen_range(0.0..6.0) }),
        4 => random_tree(rng, depth - 1).compose(Fn1D::Exp { a: rng.gen_range(-0.5..0.5), b: 0.0 }),
        _ => leaf(rng),
    }
}
