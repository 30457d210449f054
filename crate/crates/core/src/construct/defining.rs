//! Defining functions: `φ < 0` exactly on a cell domain `Ω`, `0` a regular
//! value, `Aφ > ρ` everywhere and `φ > ρ` off a neighborhood `W` of `Ω̄`.

use super::certificate::{Band, Certificate, CondKind, Condition, FloorSpec, Region};
use super::cover::strict_profile;
use super::urysohn::{urysohn_subsolution, UrysohnTarget};
use super::{balanced_sum, check_points, pow2_ceil, ConstructError, Probe, Settings};
use crate::geometry::{CellSet, Cuboid, GridDomain};
use crate::operator::{EllipticOperator, GRAD_FLOOR};
use crate::smoothfn::{convexifier, cube_bump, flatten_cutoff, Fn1D, SmoothFn};
use crate::topology::hull;

/// Signed distances are clipped to this many cells.
const CLIP_CELLS: f64 = 3.0;
/// Half-width of the interpolating bumps, in cells. Above one cell every
/// point sees two centers per axis, so monotone data stays strictly monotone.
const BUMP_CELLS: f64 = 1.5;
/// Band half-width as a fraction of the separation gap at cell centers.
const EPS_FRACTION: f64 = 0.4;
/// Level of the flattening cutoff that builds `α`.
const FLAT_N: f64 = 1.0;
const DOUBLING_CAP: i32 = 60;

fn precondition(msg: &str) -> ConstructError {
    ConstructError::Precondition(msg.into())
}

/// All window cells sharing at least a corner with `c`.
fn touching(domain: &GridDomain, c: usize) -> Vec<usize> {
    let base = domain.coords(c);
    let mut out = Vec::new();
    let span = |a: usize| if a < domain.dim { -1i64..=1 } else { 0..=0 };
    for dz in span(2) {
        for dy in span(1) {
            for dx in span(0) {
                if (dx, dy, dz) == (0, 0, 0) {
                    continue;
                }
                let e = [base[0] as i64 + dx, base[1] as i64 + dy, base[2] as i64 + dz];
                if let Some(i) = domain.flat_of_ext(e) {
                    out.push(i);
                }
            }
        }
    }
    out
}

/// Clipped signed distance from each window cell center to the cell faces
/// of `Ω`, measured through centers of the other kind: `-h/2` next to the
/// interface inside, `+h/2` outside.
fn signed_cell_distance(domain: &GridDomain, omega: &[bool]) -> Vec<f64> {
    let h = domain.h;
    let clip = CLIP_CELLS * h;
    let reach = CLIP_CELLS.ceil() as i64 + 1;
    (0..domain.total_cells())
        .map(|c| {
            let base = domain.coords(c);
            let inside = omega[c];
            let mut best = f64::INFINITY;
            let span = |a: usize| if a < domain.dim { -reach..=reach } else { 0..=0 };
            for dz in span(2) {
                for dy in span(1) {
                    for dx in span(0) {
                        let e = [base[0] as i64 + dx, base[1] as i64 + dy, base[2] as i64 + dz];
                        // Cells beyond the window count as outside `Ω`.
                        let other = domain.flat_of_ext(e).is_none_or(|i| !omega[i]);
                        if other == inside {
                            let d = ((dx * dx + dy * dy + dz * dz) as f64).sqrt() * h;
                            best = best.min(d);
                        }
                    }
                }
            }
            let d = (best - 0.5 * h).min(clip);
            if inside {
                -d
            } else {
                d
            }
        })
        .collect()
}

/// `L - Σ w_c (L - d_c) / Σ w_c` over a partition of unity of cell-centered
/// bumps. Far from `Ω` the numerator vanishes identically.
fn level_function(domain: &GridDomain, omega: &[bool]) -> Result<SmoothFn, ConstructError> {
    let dim = domain.dim;
    let h = domain.h;
    let clip = CLIP_CELLS * h;
    let d = signed_cell_distance(domain, omega);
    let weight = |c: usize| -> Result<SmoothFn, ConstructError> {
        let x = domain.cell_center(c);
        let r = BUMP_CELLS * h;
        let b = Cuboid { lo: x.iter().map(|v| v - r).collect(), hi: x.iter().map(|v| v + r).collect() };
        Ok(cube_bump(&b, &x)?.with_support(b))
    };
    let mut num = Vec::new();
    let mut den = Vec::new();
    for c in 0..domain.total_cells() {
        let w = weight(c)?;
        if d[c] < clip {
            let b = w.support.clone().expect("bump support");
            num.push(w.clone().scale(clip - d[c]).with_support(b));
        }
        den.push(w);
    }
    let ratio = balanced_sum(dim, num).mul(balanced_sum(dim, den).compose(Fn1D::Pow { p: -1.0 }));
    Ok(SmoothFn::constant(dim, clip).add(ratio.scale(-1.0)))
}

/// Smallest `2^k`, `k ≤ DOUBLING_CAP`, passing `ok`.
fn doubling(mut ok: impl FnMut(f64) -> Result<bool, ConstructError>) -> Result<f64, ConstructError> {
    for k in 0..=DOUBLING_CAP {
        let r = 2f64.powi(k);
        if ok(r)? {
            return Ok(r);
        }
    }
    Err(ConstructError::RunawayR)
}

pub fn defining_function(
    domain: &GridDomain,
    op: &EllipticOperator,
    omega: &CellSet,
    w: &CellSet,
    rho: &FloorSpec,
    settings: &Settings,
) -> Result<(SmoothFn, Certificate), ConstructError> {
    let mask = domain.mask_set();
    let total = domain.total_cells();
    if omega.is_empty() || !omega.is_subset(&mask) {
        return Err(precondition("Ω must be a nonempty set of mask cells"));
    }
    if !omega.is_subset(w) || !w.is_subset(&mask) {
        return Err(precondition("W must contain Ω and lie in the mask"));
    }
    let omega_flags = omega.flags(total);
    let mut ring = Vec::new();
    for &c in &omega.cells {
        if domain.is_end_adjacent(c) {
            return Err(precondition("the closure of Ω must stay away from the ends"));
        }
        let near = touching(domain, c);
        if near.len() + 1 < 3usize.pow(domain.dim as u32) {
            return Err(precondition("the closure of Ω must lie inside the window"));
        }
        for n in near {
            if !omega_flags[n] {
                if !domain.mask[n] {
                    return Err(precondition("the closure of Ω must lie inside the mask"));
                }
                ring.push(n);
            }
        }
    }
    if hull(omega, domain, None)? != *omega {
        return Err(precondition("the complement of Ω has a compact component"));
    }
    let near_set = omega.union(&CellSet::new(ring));

    // Shift the level function to the middle of the gap between its values
    // at the centers of Ω and at the other mask centers.
    let raw = level_function(domain, &omega_flags)?;
    let mut top_in = f64::NEG_INFINITY;
    let mut low_out = f64::INFINITY;
    for &c in &mask.cells {
        let v = raw.value(&domain.cell_center(c))?;
        if omega_flags[c] {
            top_in = top_in.max(v);
        } else {
            low_out = low_out.min(v);
        }
    }
    if !(top_in < low_out) {
        return Err(precondition("the level function does not separate the cells of Ω"));
    }
    let gap = 0.5 * (low_out - top_in);
    let eps = EPS_FRACTION * gap;
    let tau = raw.add(SmoothFn::constant(domain.dim, -0.5 * (top_in + low_out)));
    let mut pts = check_points(domain, settings.density);
    pts.extend(mask.cells.iter().map(|&c| domain.cell_center(c)));
    let probe = Probe::new(op, pts)?;
    let n = probe.pts.len();
    let cell_of: Vec<usize> = probe.pts.iter().map(|x| domain.cell_of(x).expect("mask sample")).collect();
    let tau_at = probe.eval(&tau)?;
    let rho_at: Vec<f64> = probe.pts.iter().map(|x| rho.eval(x, domain)).collect::<Result<_, _>>()?;
    let near_flags = near_set.flags(total);
    let w_flags = w.flags(total);
    let deep: Vec<usize> = (0..n).filter(|&i| tau_at[i].0 <= -eps).collect();
    if deep.is_empty() {
        return Err(precondition("Ω has no samples away from its boundary"));
    }

    // α = 2N - λ_N(C - u), u = kψ + (C - N + 1)·χ((2/ε)(τ + ε)): nonpositive,
    // zero where τ ≥ -ε/2, and equal to kψ - C + 2N where τ ≤ -ε.
    let (psi, psi_at) = strict_profile(domain, &probe, Some(&deep))?
        .ok_or_else(|| precondition("no strictly subharmonic profile on Ω"))?;
    let psi_max = psi_at.iter().map(|(v, _)| *v).fold(0.0, f64::max);
    let psi_min_a = psi_at.iter().map(|(_, a)| *a).fold(f64::INFINITY, f64::min);
    let rho_deep = deep.iter().map(|&i| rho_at[i]).fold(0.0, f64::max);
    let base_k = (rho_deep + 1.0) / psi_min_a;
    let build_alpha = |k: f64| -> (SmoothFn, f64) {
        let c = 3.0 * FLAT_N + k * base_k * psi_max + 1.0;
        let outer = tau
            .clone()
            .add(SmoothFn::constant(domain.dim, eps))
            .scale(2.0 / eps)
            .compose(convexifier(1.0, 1.0))
            .scale(c - FLAT_N + 1.0);
        let u = psi.clone().scale(k * base_k).add(outer);
        let alpha = SmoothFn::constant(domain.dim, c)
            .add(u.scale(-1.0))
            .compose(flatten_cutoff(FLAT_N))
            .scale(-1.0)
            .add(SmoothFn::constant(domain.dim, 2.0 * FLAT_N));
        (alpha, c)
    };
    let mut alpha_c = None;
    let k = doubling(|k| {
        let (alpha, c) = build_alpha(k);
        let vals = probe.eval_at(&alpha, &deep)?;
        let ok = deep.iter().zip(&vals).all(|(&i, (_, a))| *a > rho_at[i]);
        if ok {
            alpha_c = Some((alpha, c));
        }
        Ok(ok)
    })?;
    let (alpha, big_c) = alpha_c.expect("set on success");
    let alpha_at = probe.eval(&alpha)?;

    // χ(R1(τ + 2ε)): A ≥ 0 where τ ≤ 2ε, and > 0 on the near cells where τ > -ε.
    let chi_tau = |r1: f64| -> SmoothFn {
        tau.clone().add(SmoothFn::constant(domain.dim, 2.0 * eps)).scale(r1).compose(convexifier(1.0, 1.0))
    };
    let r1 = doubling(|r1| {
        let vals = probe.eval(&chi_tau(r1))?;
        Ok((0..n).all(|i| {
            let (t, a) = (tau_at[i].0, vals[i].1);
            let strict = near_flags[cell_of[i]] && t > -eps;
            if strict {
                a > 0.0
            } else if t <= 2.0 * eps {
                a >= 0.0
            } else {
                true
            }
        }))
    })?;
    let offset = convexifier(1.0, 1.0).eval(2.0 * r1 * eps)?;
    let chi1 = chi_tau(r1).add(SmoothFn::constant(domain.dim, -offset.0));
    let chi1_at = probe.eval(&chi1)?;

    // Nonnegative, zero on Ω̄, Aβ > ρ + 1 and β > ρ + 1 off the near cells.
    let (beta, _) = urysohn_subsolution(
        domain,
        op,
        omega,
        &UrysohnTarget::Neighborhood { w: near_set.clone() },
        &rho.clone().affine(1.0, 1.0),
        &[],
        settings,
    )?;
    let beta_at = probe.eval(&beta)?;

    // R2: Aα + R2·Aχ1 > ρ on the near cells.
    let near_idx: Vec<usize> = (0..n).filter(|&i| near_flags[cell_of[i]]).collect();
    let r2 = doubling(|r2| Ok(near_idx.iter().all(|&i| alpha_at[i].1 + r2 * chi1_at[i].1 > rho_at[i])))?;

    // R3: the remaining Aφ > ρ everywhere and φ > ρ off W.
    let part = |i: usize| (alpha_at[i].0 + r2 * chi1_at[i].0, alpha_at[i].1 + r2 * chi1_at[i].1);
    let mut need: f64 = 1.0;
    for i in 0..n {
        let (v, a) = part(i);
        let (bv, ba) = beta_at[i];
        if a <= rho_at[i] {
            if !(ba > 0.0) {
                return Err(ConstructError::RunawayR);
            }
            need = need.max(2.0 * (rho_at[i] - a) / ba);
        }
        if !w_flags[cell_of[i]] && v <= rho_at[i] {
            if !(bv > 0.0) {
                return Err(ConstructError::RunawayR);
            }
            need = need.max(2.0 * (rho_at[i] - v) / bv);
        }
    }
    let r3 = pow2_ceil(need);
    let phi = SmoothFn::sum(domain.dim, vec![alpha, chi1.scale(r2), beta.scale(r3)]);

    // Interface gradient on the band |τ| ≤ ε, relative to its value on τ = 0.
    let band: Vec<usize> = (0..n).filter(|&i| tau_at[i].0.abs() <= eps).collect();
    let mut eta = f64::INFINITY;
    for &i in &band {
        eta = eta.min(phi.eval(&probe.pts[i])?.grad_norm(domain.dim));
    }
    let interface = r1 * r2 * offset.1;
    let eta_scaled = eta / interface;
    if !(eta_scaled >= GRAD_FLOOR) {
        return Err(ConstructError::InterfaceDegenerate(eta_scaled));
    }

    let mut cert = Certificate::new(domain.clone(), op.clone(), settings.density);
    let f = cert.add_function(phi.clone());
    let t = cert.add_function(tau);
    let zero = FloorSpec::constant(0.0);
    let outside = mask.difference(omega);
    let mut band_region = Region::mask();
    band_region.band = Some(Band { func: t, max_abs: eps });
    cert.conditions = vec![
        Condition::new("phi_neg_on_Omega_centers", f, Region::centers(omega.clone()), CondKind::FLt, zero.clone()),
        Condition::new("phi_pos_off_Omega_centers", f, Region::centers(outside), CondKind::FGt, zero),
        Condition::new("grad_phi_ge_eta_on_band", f, band_region, CondKind::GradGe, FloorSpec::constant(0.5 * eta)),
        Condition::new("A_phi_gt_rho", f, Region::mask(), CondKind::AfGt, rho.clone()),
        Condition::new("phi_gt_rho_off_W", f, Region::cells(mask.difference(w)), CondKind::FGt, rho.clone()),
    ];
    cert.constants.r = vec![r1, r2, r3];
    cert.constants.n = Some(FLAT_N);
    cert.constants.eps = vec![eps];
    cert.constants.extra.insert("eta".into(), eta);
    cert.constants.extra.insert("eta_scaled".into(), eta_scaled);
    cert.constants.extra.insert("alpha_k".into(), k * base_k);
    cert.constants.extra.insert("alpha_c".into(), big_c);
    cert.finalize()?;
    Ok((phi, cert))
}
