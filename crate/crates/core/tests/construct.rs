//! Worked examples for the constructions and certificate verification.

mod common;

use common::*;
use subsol::construct::*;
use subsol::geometry::{Cuboid, FaceMark, GridDomain};
use subsol::operator::EllipticOperator;
use subsol::topology::find_chain;

fn laplace() -> EllipticOperator {
    EllipticOperator::laplace(2)
}

/// Full mask minus a one-cell ring, leaving a sealed 3x3 pocket.
fn pocketed() -> GridDomain {
    let n = 16;
    let mut mask = vec![true; n * n];
    for i in 0..n {
        for j in 0..n {
            if (i as i64 - 7).abs().max((j as i64 - 7).abs()) == 2 {
                mask[i + n * j] = false;
            }
        }
    }
    let window = Cuboid::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
    GridDomain::from_parts(window, 0.125, mask, vec![], vec![[FaceMark::End; 2]; 2], 4).unwrap()
}

fn assert_passes(cert: &Certificate) {
    for refine in [1, 2] {
        let rep = verify(cert, refine).unwrap();
        let bad: Vec<_> = rep.conditions.iter().filter(|c| !c.pass).map(|c| &c.name).collect();
        assert!(rep.pass, "refine {refine}: failing {bad:?}");
    }
}

#[test]
fn chain_across_the_square() {
    let d = square();
    let chain = find_chain(&[0.05, 0.1], &d.mask_set(), &d, 0.5).unwrap();
    assert!(chain.boxes.len() >= 3);
    let (alpha, cert) = chain_subsolution(&chain, &laplace(), &d, 3).unwrap();
    assert_passes(&cert);
    assert!(alpha.value(&[0.05, 0.1]).unwrap() > 0.0);
}

#[test]
fn one_box_chain_is_a_single_bump() {
    let d = square();
    let chain = find_chain(&[0.94, 0.0], &d.mask_set(), &d, 0.5).unwrap();
    assert_eq!(chain.boxes.len(), 1);
    let (_, cert) = chain_subsolution(&chain, &laplace(), &d, 3).unwrap();
    assert_eq!(cert.constants.r.len(), 1);
    assert_passes(&cert);
}

#[test]
fn chain_to_the_inner_end_of_a_punctured_square() {
    let d = punctured();
    let chain = find_chain(&[0.42, 0.05], &d.mask_set(), &d, 0.25).unwrap();
    let (_, cert) = chain_subsolution(&chain, &wavy_operator(), &d, 3).unwrap();
    assert_passes(&cert);
}

#[test]
fn global_subsolution_on_the_square() {
    let (_, cert) = global_subsolution(&square(), &laplace(), &FloorSpec::constant(1.0), &Settings::default()).unwrap();
    assert!(cert.margins.iter().all(|m| *m > 0.0));
    assert_passes(&cert);
}

#[test]
fn sealed_component_has_no_exit() {
    let err = global_subsolution(&pocketed(), &laplace(), &FloorSpec::constant(1.0), &Settings::default()).unwrap_err();
    assert_eq!(err.kind(), "NoExit");
}

#[test]
fn larger_floor_still_certifies() {
    let d = square();
    let (_, small) = global_subsolution(&d, &laplace(), &FloorSpec::constant(1.0), &Settings::default()).unwrap();
    let (_, big) = global_subsolution(&d, &laplace(), &FloorSpec::constant(10.0), &Settings::default()).unwrap();
    assert_passes(&big);
    assert_ne!(small.functions, big.functions);
}

#[test]
fn urysohn_neighborhood_mode() {
    let d = square();
    let k = block(&d, 6, 10, 6, 10);
    let w = block(&d, 4, 12, 4, 12);
    let e = vec![block(&d, 1, 3, 1, 3)];
    let target = UrysohnTarget::Neighborhood { w };
    let (phi, cert) =
        urysohn_subsolution(&d, &laplace(), &k, &target, &FloorSpec::constant(1.0), &e, &Settings::default()).unwrap();
    assert_passes(&cert);
    for &c in &k.cells {
        let j = phi.eval(&d.cell_center(c)).unwrap();
        assert!(j.is_zero());
    }
}

#[test]
fn urysohn_closed_set_mode() {
    let d = square();
    let k = block(&d, 6, 9, 6, 9);
    let ray = block(&d, 11, 16, 7, 8);
    let target = UrysohnTarget::Closed { d: ray.clone() };
    let (phi, cert) =
        urysohn_subsolution(&d, &laplace(), &k, &target, &FloorSpec::constant(1.0), &[], &Settings::default()).unwrap();
    assert_passes(&cert);
    for &c in &ray.cells {
        assert!(phi.value(&d.cell_center(c)).unwrap() > 1.0);
    }
}

#[test]
fn urysohn_requires_a_hulled_set() {
    let d = square();
    let ring = block(&d, 5, 11, 5, 11).difference(&block(&d, 7, 9, 7, 9));
    let target = UrysohnTarget::Neighborhood { w: block(&d, 3, 13, 3, 13) };
    let err = urysohn_subsolution(&d, &laplace(), &ring, &target, &FloorSpec::constant(1.0), &[], &Settings::default())
        .unwrap_err();
    assert_eq!(err, ConstructError::HullRequired);
}

#[test]
fn defining_function_of_a_disk() {
    let d = square();
    let omega = cells_where(&d, |x| x[0] * x[0] + x[1] * x[1] < 0.4 * 0.4);
    let w = cells_where(&d, |x| x[0] * x[0] + x[1] * x[1] < 0.65 * 0.65);
    let (phi, cert) =
        defining_function(&d, &laplace(), &omega, &w, &FloorSpec::constant(1.0), &Settings::default()).unwrap();
    assert_passes(&cert);
    assert!(cert.constants.extra["eta_scaled"] > 0.0);
    assert!(phi.value(&[0.0, 0.0]).unwrap() < 0.0);
    assert!(phi.value(&[0.95, 0.95]).unwrap() > 0.0);
}

#[test]
fn defining_function_rejects_an_enclosed_complement() {
    let d = square();
    let ring = block(&d, 5, 11, 5, 11).difference(&block(&d, 7, 9, 7, 9));
    let w = block(&d, 3, 13, 3, 13);
    let err =
        defining_function(&d, &laplace(), &ring, &w, &FloorSpec::constant(1.0), &Settings::default()).unwrap_err();
    assert_eq!(err.kind(), "Precondition");
}

#[test]
fn raised_floor_fails_at_the_same_argmin() {
    let (_, mut cert) =
        global_subsolution(&square(), &laplace(), &FloorSpec::constant(1.0), &Settings::default()).unwrap();
    let before = verify(&cert, 1).unwrap();
    let i = cert.conditions.iter().position(|c| c.kind == CondKind::AfGt).unwrap();
    let lift = before.conditions[i].min_slack + 1.0;
    cert.conditions[i].floor = cert.conditions[i].floor.clone().affine(1.0, lift);
    let after = verify(&cert, 1).unwrap();
    assert!(!after.pass && !after.conditions[i].pass);
    assert_eq!(after.conditions[i].argmin, before.conditions[i].argmin);
    assert!((after.conditions[i].min_slack + 1.0).abs() < 1e-9);
}

#[test]
fn finite_difference_crosscheck_agrees() {
    let (_, cert) =
        global_subsolution(&punctured(), &wavy_operator(), &FloorSpec::EndProxy, &Settings::default()).unwrap();
    let rep = verify(&cert, 1).unwrap();
    assert_eq!(rep.fd_crosscheck.points, 10);
    assert!(rep.fd_crosscheck.max_rel_err <= 1e-4, "{:e}", rep.fd_crosscheck.max_rel_err);
}

#[test]
fn jittered_verification_still_passes() {
    let (_, cert) =
        global_subsolution(&annulus(), &laplace(), &FloorSpec::constant(1.0), &Settings::default()).unwrap();
    assert!(verify_with(&cert, 1, 7).unwrap().pass);
}
