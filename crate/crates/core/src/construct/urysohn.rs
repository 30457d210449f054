//! Subsolutions that vanish on a compact set `K` and are large either away
//! from a neighborhood of `K` or along a closed set with no compact
//! components.

use super::certificate::{Certificate, CondKind, Condition, FloorSpec, Region};
use super::cover::{layer_of, ComponentIndex, Greedy, Quantity};
use super::{ConstructError, Settings};
use crate::geometry::{CellSet, GridDomain};
use crate::operator::EllipticOperator;
use crate::smoothfn::SmoothFn;
use crate::topology::{decompose_closed, exhaustion_sequence, hull, TopologyError};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum UrysohnTarget {
    /// `φ > ρ` and `Aφ > ρ` off the cell set `w ⊃ K`.
    Neighborhood { w: CellSet },
    /// `φ > ρ` and `Aφ > ρ` on the closed cell set `d`, disjoint from `K`.
    Closed { d: CellSet },
}

/// Level the positivity series pushes `φ` (and `Aφ` on the `E` sets) above.
const POSITIVE_LEVEL: f64 = 1e-7;

fn precondition(msg: &str) -> ConstructError {
    ConstructError::Precondition(msg.into())
}

/// `φ ≡ 0` on `K`, `φ ≥ 0`, `Aφ ≥ 0`, `φ > 0` off `K`, the target's
/// `φ > ρ`, `Aφ > ρ` requirement, and `Aφ ≥ δ_j > 0` on each `E_j`.
pub fn urysohn_subsolution(
    domain: &GridDomain,
    op: &EllipticOperator,
    k: &CellSet,
    target: &UrysohnTarget,
    rho: &FloorSpec,
    e_sets: &[CellSet],
    settings: &Settings,
) -> Result<(SmoothFn, Certificate), ConstructError> {
    let mask = domain.mask_set();
    if !k.is_subset(&mask) {
        return Err(precondition("K must lie in the mask"));
    }
    let rest = mask.difference(k);
    if e_sets.iter().any(|e| !e.is_subset(&rest)) {
        return Err(precondition("every E must lie in the mask and avoid K"));
    }
    let total = domain.total_cells();
    let mut g = Greedy::new(domain, op, settings)?;
    let n = g.probe.pts.len();
    let cell_of: Vec<usize> = g.probe.pts.iter().map(|x| domain.cell_of(x).expect("mask sample")).collect();
    let rho_vals = g.floor_values(rho)?;
    let rest_comps = ComponentIndex::new(&rest, domain);
    let in_rest = |i: usize| -> Result<Vec<CellSet>, ConstructError> {
        Ok(rest_comps.of(cell_of[i]).cloned().into_iter().collect())
    };

    let (protected, label) = match target {
        UrysohnTarget::Neighborhood { w } => {
            if !k.is_subset(w) || !w.is_subset(&mask) {
                return Err(precondition("W must contain K and lie in the mask"));
            }
            if hull(k, domain, None)? != *k {
                return Err(ConstructError::HullRequired);
            }
            let mut layers = settings.layers.max(1);
            let seq = loop {
                match exhaustion_sequence(domain, layers) {
                    Ok(s) => break s,
                    Err(TopologyError::CountTooLarge(_)) if layers > 1 => layers -= 1,
                    Err(e) => return Err(e.into()),
                }
            };
            let layer = layer_of(&seq.sets, total);
            let mut shells = vec![ComponentIndex::new(&rest, domain)];
            for nu in 1..seq.sets.len() {
                shells.push(ComponentIndex::new(&rest.difference(&seq.sets[nu - 1]), domain));
            }
            let off_w = mask.difference(w);
            let flags = off_w.flags(total);
            let mut order: Vec<usize> = (0..n).filter(|&i| flags[cell_of[i]]).collect();
            order.sort_by_key(|&i| (layer[cell_of[i]], i));
            g.cover_points(&order, &rho_vals, rho, 1.5, |i| {
                let c = cell_of[i];
                let mut out: Vec<CellSet> = shells[layer[c] - 1].of(c).cloned().into_iter().collect();
                out.extend(rest_comps.of(c).cloned());
                Ok(out)
            })?;
            (off_w, "off_W")
        }
        UrysohnTarget::Closed { d } => {
            let families = decompose_closed(d, k, domain)?;
            let tubes: Vec<ComponentIndex> = families.iter().map(|f| ComponentIndex::new(&f.u, domain)).collect();
            let flags = d.flags(total);
            let order: Vec<usize> = (0..n).filter(|&i| flags[cell_of[i]]).collect();
            g.cover_points(&order, &rho_vals, rho, 1.5, |i| {
                Ok(tubes.iter().filter_map(|t| t.of(cell_of[i]).cloned()).collect())
            })?;
            (d.clone(), "on_D")
        }
    };
    let prot_flags = protected.flags(total);
    let prot_idx: Vec<usize> = (0..n).filter(|&i| prot_flags[cell_of[i]]).collect();
    let chains_main = g.terms.len();

    let achieved =
        prot_idx.iter().map(|&i| (g.v[i] - rho_vals[i]).min(g.a[i] - rho_vals[i])).fold(f64::INFINITY, f64::min);
    let budget = 0.5 * achieved.min(1.0);
    let budget = if budget > 0.0 { budget } else { 0.5 };
    let rest_flags = rest.flags(total);
    let rest_idx: Vec<usize> = (0..n).filter(|&i| rest_flags[cell_of[i]]).collect();
    let e_idx: Vec<Vec<usize>> = e_sets
        .iter()
        .map(|e| {
            let f = e.flags(total);
            (0..n).filter(|&i| f[cell_of[i]]).collect()
        })
        .collect();
    let mut wanted: Vec<(usize, Quantity)> = rest_idx.iter().map(|&i| (i, Quantity::Value)).collect();
    for idx in &e_idx {
        wanted.extend(idx.iter().map(|&i| (i, Quantity::Applied)));
    }
    let series = g.positive_series(&wanted, POSITIVE_LEVEL, budget, in_rest)?;

    let deltas: Vec<f64> =
        e_idx.iter().map(|idx| 0.5 * idx.iter().map(|&i| g.a[i]).fold(f64::INFINITY, f64::min)).collect();
    if let Some(j) = deltas.iter().position(|d| !(*d > 0.0)) {
        return Err(precondition(&format!("E{j} has no samples or Aφ did not become positive there")));
    }

    let phi = g.function();
    let mut cert = Certificate::new(domain.clone(), op.clone(), settings.density);
    let f = cert.add_function(phi.clone());
    let zero = FloorSpec::constant(0.0);
    let mut conds = Vec::new();
    if !k.is_empty() {
        conds.push(Condition::new("phi_zero_on_K", f, Region::cells(k.clone()), CondKind::FZero, zero.clone()));
    }
    conds.extend([
        Condition::new("phi_nonneg", f, Region::mask(), CondKind::FGe0, zero.clone()),
        Condition::new("A_phi_nonneg", f, Region::mask(), CondKind::AfGe0, zero.clone()),
        Condition::new(&format!("phi_gt_rho_{label}"), f, Region::cells(protected.clone()), CondKind::FGt, rho.clone()),
        Condition::new(&format!("A_phi_gt_rho_{label}"), f, Region::cells(protected), CondKind::AfGt, rho.clone()),
        Condition::new("phi_pos_off_K", f, Region::cells(rest), CondKind::FGt, zero),
    ]);
    for (j, (e, d)) in e_sets.iter().zip(&deltas).enumerate() {
        conds.push(Condition::new(
            &format!("A_phi_ge_delta_E{j}"),
            f,
            Region::cells(e.clone()),
            CondKind::AfGt,
            FloorSpec::constant(*d),
        ));
    }
    cert.conditions = conds;
    cert.constants.r = g.chain_r.clone();
    cert.constants.eps = g.scales.clone();
    cert.constants.extra.insert("chains".into(), chains_main as f64);
    cert.constants.extra.insert("series_terms".into(), series as f64);
    for (j, d) in deltas.iter().enumerate() {
        cert.constants.extra.insert(format!("delta_E{j}"), *d);
    }
    cert.finalize()?;
    Ok((phi, cert))
}
