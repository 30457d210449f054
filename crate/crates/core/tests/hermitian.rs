//! Curvature examples on planar charts and the two-chart sphere.

mod common;

use common::*;
use subsol::construct::{verify, Settings};
use subsol::geometry::Cuboid;
use subsol::hermitian::*;
use subsol::smoothfn::{cube_bump, Fn1D, SmoothFn};

fn flat_plane() -> Atlas {
    Atlas::plane("plane", square(), SmoothFn::constant(2, 1.0))
}

fn z_abs2() -> SmoothFn {
    let x = SmoothFn::coord(2, 0);
    let y = SmoothFn::coord(2, 1);
    x.clone().mul(x).add(y.clone().mul(y))
}

fn weight(u: SmoothFn) -> HermitianWeight {
    HermitianWeight::smooth(0, vec![u])
}

#[test]
fn curvature_of_the_norm_square_is_one() {
    for z in [[0.0, 0.0], [0.3, -0.7], [-0.9, 0.9]] {
        let r = scalar_curvature(&flat_plane(), &weight(z_abs2()), 0, &z).unwrap();
        assert!((r - 1.0).abs() < 1e-14, "{r}");
    }
}

#[test]
fn harmonic_weight_is_flat() {
    let x = SmoothFn::coord(2, 0);
    let y = SmoothFn::coord(2, 1);
    let re_z2 = x.clone().mul(x).add(y.clone().mul(y).scale(-1.0));
    for z in [[0.2, 0.1], [-0.5, 0.8]] {
        assert_eq!(scalar_curvature(&flat_plane(), &weight(re_z2.clone()), 0, &z).unwrap(), 0.0);
    }
}

#[test]
fn fubini_study_weight_at_the_origin() {
    let d = 3.0;
    let u = z_abs2().add(SmoothFn::constant(2, 1.0)).compose(Fn1D::Log).scale(d);
    let r = scalar_curvature(&flat_plane(), &weight(u.clone()), 0, &[0.0, 0.0]).unwrap();
    assert!((r - d).abs() < 1e-13, "{r}");
    let atlas = flat_plane();
    let op = atlas.charts[0].operator().unwrap();
    let fd = op.fd_apply(&u, &[0.0, 0.0], 1e-3).unwrap();
    assert!((fd - d).abs() < 1e-5, "{fd}");
}

fn annulus_plane(metric: SmoothFn) -> Atlas {
    let d = domain(serde_json::json!({"dim":2,"window":{"lo":[-2.0,-2.0],"hi":[2.0,2.0]},"h":0.125,
        "shape":{"op":"diff","a":{"op":"ball","center":[0.0,0.0],"radius":2.0},"b":{"op":"ball","center":[0.0,0.0],"radius":1.0}},
        "ends":{"op":"all"}}));
    Atlas::plane("annulus", d, metric)
}

#[test]
fn noncompact_branch_with_spherical_metric() {
    let g = z_abs2().add(SmoothFn::constant(2, 1.0)).compose(Fn1D::Pow { p: -2.0 });
    let atlas = annulus_plane(g);
    let u_k = SmoothFn::coord(2, 0).compose(Fn1D::Cos { freq: std::f64::consts::TAU, phase: 0.0 }).scale(-1.0);
    let (_, cert) = positive_metric_noncompact(&atlas, &u_k, &Settings::default()).unwrap();
    let (r1, r2) = (verify(&cert, 1).unwrap(), verify(&cert, 2).unwrap());
    assert!(r1.pass && r2.pass);
    let (s1, s2) = (r1.conditions[0].min_slack, r2.conditions[0].min_slack);
    assert!(s1 > 0.0 && (s1 - s2) / s1 <= 0.10);
}

#[test]
fn noncompact_branch_with_positive_start() {
    let atlas = annulus_plane(SmoothFn::constant(2, 1.0));
    let (_, cert) = positive_metric_noncompact(&atlas, &z_abs2(), &Settings::default()).unwrap();
    assert!(verify(&cert, 2).unwrap().pass);
}

fn sphere() -> Atlas {
    Atlas::sphere(1.25, 1.0 / 16.0, None).unwrap()
}

fn fubini_study(deg: i32) -> HermitianWeight {
    let atlas = sphere();
    let fs = z_abs2().add(SmoothFn::constant(2, 1.0)).compose(Fn1D::Log).scale(deg as f64);
    HermitianWeight::smooth(deg, vec![fs; atlas.charts.len()])
}

#[test]
fn fubini_study_weight_is_consistent_across_charts() {
    let rep = chart_transition_check(&sphere(), &fubini_study(1), 3).unwrap();
    assert!(rep.samples > 0);
    assert!(rep.max_rel_err <= 1e-9, "{:e}", rep.max_rel_err);
}

#[test]
fn trivial_bundle_transition_is_exact() {
    let u = SmoothFn::constant(2, 0.5);
    let w = HermitianWeight::smooth(0, vec![u.clone(), u]);
    assert!(chart_transition_check(&sphere(), &w, 3).unwrap().max_rel_err <= 1e-12);
}

#[test]
fn missing_frame_factor_is_reported() {
    // u_w(w) = u_z(1/w), without the -log|z|² frame term.
    let mut w = fubini_study(1);
    w.u[1] = w.u[0].clone().inversion().unwrap();
    assert!(chart_transition_check(&sphere(), &w, 3).unwrap().max_rel_err > 1e-2);
}

#[test]
fn divisor_branch_without_wiggle() {
    let atlas = sphere();
    let roots = [DivisorPoint { re: 0.0, im: 0.0, mult: 1 }];
    let (weight, cert) =
        positive_metric_divisor(&atlas, &roots, &SmoothFn::constant(2, 0.0), &Settings::default()).unwrap();
    assert!(verify(&cert, 1).unwrap().pass);
    assert!(chart_transition_check(&atlas, &weight, 3).unwrap().max_rel_err <= 1e-9);
}

#[test]
fn divisor_branch_with_off_center_roots() {
    let atlas = sphere();
    let bump = cube_bump(&Cuboid::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap(), &[0.0, 0.0]).unwrap();
    let eta = SmoothFn::coord(2, 1).compose(Fn1D::Cos { freq: 2.0, phase: 0.5 }).scale(0.2).mul(bump);
    let roots = [DivisorPoint { re: 0.3, im: -0.2, mult: 1 }, DivisorPoint { re: -0.4, im: 0.35, mult: 1 }];
    let (weight, cert) = positive_metric_divisor(&atlas, &roots, &eta, &Settings::default()).unwrap();
    assert!(verify(&cert, 1).unwrap().pass);
    assert_eq!(weight.degree, 2);
    assert!(matches!(scalar_curvature(&atlas, &weight, 0, &[0.3, -0.2]), Err(HermitianError::PoleProximity(_))));
}

#[test]
fn roots_outside_the_chart_are_rejected() {
    let roots = [DivisorPoint { re: 5.0, im: 0.0, mult: 1 }];
    let err =
        positive_metric_divisor(&sphere(), &roots, &SmoothFn::constant(2, 0.0), &Settings::default()).unwrap_err();
    assert!(matches!(err, HermitianError::RootsOutside(_)), "{err:?}");
}
