//! Constructions of strict subsolutions and their certificates.

mod bump;
mod certificate;
mod cover;
mod defining;
mod urysohn;

pub use bump::{bump_subsolution, chain_subsolution, lemma_ratio, select_r, SelectedR};
pub use certificate::{
    box_lattice_size, verify, verify_with, Band, Certificate, CondKind, Condition, ConditionReport, Constants, Disk,
    FdCrosscheck, FloorSpec, Region, RegionBase, Report, BASE_TOL,
};
pub use cover::global_subsolution;
pub use defining::defining_function;
pub use urysohn::{urysohn_subsolution, UrysohnTarget};

use crate::geometry::{Cuboid, GeometryError, GridDomain};
use crate::operator::{Coeffs, EllipticOperator, OperatorError};
use crate::smoothfn::{EvalError, SmoothFn};
use crate::topology::TopologyError;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstructError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("no admissible R below the doubling cap")]
    NoR,
    #[error("target set D has no samples")]
    EmptyD,
    #[error("constant search exceeded its doubling cap")]
    RunawayR,
    #[error("K differs from its hull")]
    HullRequired,
    #[error("interface gradient below the floor ({0:e})")]
    InterfaceDegenerate(f64),
    #[error("precondition failed: {0}")]
    Precondition(String),
}

impl ConstructError {
    /// Short variant name for reports.
    pub fn kind(&self) -> String {
        match self {
            ConstructError::Topology(t) => format!("{t:?}").split(['(', ' ']).next().unwrap_or("Topology").to_string(),
            ConstructError::Operator(OperatorError::GradientVanishes(_)) => "GradientVanishes".into(),
            ConstructError::Operator(_) => "Operator".into(),
            ConstructError::Eval(_) => "Eval".into(),
            ConstructError::Geometry(_) => "Geometry".into(),
            ConstructError::NoR => "NoR".into(),
            ConstructError::EmptyD => "EmptyD".into(),
            ConstructError::RunawayR => "RunawayR".into(),
            ConstructError::HullRequired => "HullRequired".into(),
            ConstructError::InterfaceDegenerate(_) => "InterfaceDegenerate".into(),
            ConstructError::Precondition(_) => "Precondition".into(),
        }
    }
}

/// Knobs shared by the constructions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    /// Certificate samples per cell per axis.
    pub density: usize,
    /// Largest chain box side, in cells.
    pub box_cells: f64,
    /// Number of exhaustion layers.
    pub layers: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings { density: 3, box_cells: 8.0, layers: 3 }
    }
}

/// Sample points with cached operator coefficients.
pub(crate) struct Probe {
    pub dim: usize,
    pub pts: Vec<Vec<f64>>,
    pub co: Vec<Coeffs>,
}

impl Probe {
    pub fn new(op: &EllipticOperator, pts: Vec<Vec<f64>>) -> Result<Probe, ConstructError> {
        let co = pts.par_iter().map(|x| op.coefficients(x)).collect::<Result<Vec<_>, _>>()?;
        Ok(Probe { dim: op.dim, pts, co })
    }

    /// `(f, Af)` at the listed indices.
    pub fn eval_at(&self, f: &SmoothFn, idx: &[usize]) -> Result<Vec<(f64, f64)>, ConstructError> {
        idx.par_iter()
            .map(|&i| {
                let j = f.eval(&self.pts[i])?;
                Ok((j.v, self.co[i].apply(&j, self.dim)))
            })
            .collect()
    }

    pub fn eval(&self, f: &SmoothFn) -> Result<Vec<(f64, f64)>, ConstructError> {
        let all: Vec<usize> = (0..self.pts.len()).collect();
        self.eval_at(f, &all)
    }

    /// Indices of points in the closed box.
    pub fn inside(&self, b: &Cuboid) -> Vec<usize> {
        (0..self.pts.len()).filter(|&i| b.contains_closed(&self.pts[i])).collect()
    }
}

/// Mask samples at `density` and `2 * density`.
pub(crate) fn check_points(domain: &GridDomain, density: usize) -> Vec<Vec<f64>> {
    let mut pts = Vec::new();
    for d in [density, 2 * density] {
        for c in 0..domain.total_cells() {
            if domain.mask[c] {
                domain.cell_samples(c, d, &mut pts);
            }
        }
    }
    pts
}

/// Number of leading `check_points` entries sampled at the coarse density.
pub(crate) fn coarse_count(domain: &GridDomain, density: usize) -> usize {
    domain.mask.iter().filter(|m| **m).count() * density.pow(domain.dim as u32)
}

/// Sum arranged as a bounding-box tree so that evaluation skips far terms.
pub fn balanced_sum(dim: usize, mut terms: Vec<SmoothFn>) -> SmoothFn {
    if terms.len() <= 4 || terms.iter().any(|t| t.support.is_none()) {
        return SmoothFn::sum(dim, terms);
    }
    let centers: Vec<Vec<f64>> = terms.iter().map(|t| t.support.as_ref().unwrap().center()).collect();
    let axis = (0..dim)
        .max_by(|&a, &b| {
            let spread = |k: usize| {
                let lo = centers.iter().map(|c| c[k]).fold(f64::INFINITY, f64::min);
                let hi = centers.iter().map(|c| c[k]).fold(f64::NEG_INFINITY, f64::max);
                hi - lo
            };
            spread(a).total_cmp(&spread(b)).then(b.cmp(&a))
        })
        .unwrap_or(0);
    let mut order: Vec<usize> = (0..terms.len()).collect();
    order.sort_by(|&i, &j| centers[i][axis].total_cmp(&centers[j][axis]).then(i.cmp(&j)));
    let mut slots: Vec<Option<SmoothFn>> = terms.drain(..).map(Some).collect();
    let sorted: Vec<SmoothFn> = order.iter().map(|&i| slots[i].take().unwrap()).collect();
    let mut right = sorted;
    let left: Vec<SmoothFn> = right.drain(..right.len() / 2).collect();
    SmoothFn::sum(dim, vec![balanced_sum(dim, left), balanced_sum(dim, right)])
}

/// Smallest power of two at least `x` (for `x > 0`).
pub(crate) fn pow2_ceil(x: f64) -> f64 {
    2f64.powi(x.log2().ceil() as i32)
}
