mod common;

use std::f64::consts::PI;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use v2pdet::geom::{contains, corners, from_canonical, iou_3d, iou_3d_montecarlo, iou_bev, to_canonical, wrap_angle, Box3D};

fn arb_box() -> impl Strategy<Value = Box3D> {
    (
        prop::array::uniform3(-5.0..5.0f64),
        (0.3..5.0f64, 0.3..3.0f64, 0.3..2.5f64),
        -PI + 1e-6..PI,
    )
        .prop_map(|(c, (l, w, h), yaw)| Box3D::new(c, [l, w, h], yaw))
}

fn arb_near_pair() -> impl Strategy<Value = (Box3D, Box3D)> {
    (arb_box(), prop::array::uniform3(-2.0..2.0f64), (0.3..5.0f64, 0.3..3.0f64, 0.3..2.5f64), -PI + 1e-6..PI).prop_map(
        |(a, off, (l, w, h), yaw)| {
            let b = Box3D::new([a.center[0] + off[0], a.center[1] + off[1], a.center[2] + off[2] / 2.0], [l, w, h], yaw);
            (a, b)
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn iou_is_symmetric((a, b) in arb_near_pair()) {
        prop_assert!((iou_3d(&a, &b) - iou_3d(&b, &a)).abs() <= 1e-12);
        prop_assert!((iou_bev(&a, &b) - iou_bev(&b, &a)).abs() <= 1e-12);
    }

    #[test]
    fn iou_is_bounded((a, b) in arb_near_pair()) {
        let v = iou_3d(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn iou_rigid_invariance((a, b) in arb_near_pair(), rot in -PI..PI, t in prop::array::uniform3(-20.0..20.0f64)) {
        let before = iou_3d(&a, &b);
        let after = iou_3d(&a.rigid(rot, t), &b.rigid(rot, t));
        prop_assert!((before - after).abs() <= 1e-9, "{before} vs {after}");
    }

    #[test]
    fn self_iou_is_one(a in arb_box()) {
        prop_assert!((iou_3d(&a, &a) - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn corners_are_contained_and_centered(a in arb_box()) {
        let c = corners(&a);
        for p in &c {
            prop_assert!(contains(&a, *p));
        }
        // Opposite corners share the center as midpoint.
        for i in 0..8 {
            let mut best = f64::INFINITY;
            for j in 0..8 {
                let m: Vec<f64> = (0..3).map(|k| (c[i][k] + c[j][k]) / 2.0 - a.center[k]).collect();
                best = best.min(m.iter().map(|v| v.abs()).fold(0.0, f64::max));
            }
            prop_assert!(best <= 1e-9);
        }
    }

    #[test]
    fn canonical_round_trip(a in arb_box(), p in prop::array::uniform3(-10.0..10.0f64)) {
        let q = from_canonical(&a, to_canonical(&a, p));
        for k in 0..3 {
            prop_assert!((q[k] - p[k]).abs() <= 1e-9);
        }
    }

    #[test]
    fn wrapped_angles_land_in_half_open_range(t in -50.0..50.0f64) {
        let w = wrap_angle(t);
        prop_assert!(w > -PI && w <= PI);
        let k = (w - t) / (2.0 * PI);
        prop_assert!((k - k.round()).abs() <= 1e-9);
    }
}

#[test]
fn edge_lengths_reproduce_size() {
    let b = Box3D::new([1.0, 2.0, 0.5], [4.0, 1.8, 1.5], 0.7);
    let c = corners(&b);
    let mut d: Vec<f64> = Vec::new();
    for i in 0..8 {
        for j in i + 1..8 {
            d.push(((c[i][0] - c[j][0]).powi(2) + (c[i][1] - c[j][1]).powi(2) + (c[i][2] - c[j][2]).powi(2)).sqrt());
        }
    }
    for s in b.size {
        assert!(d.iter().any(|v| (v - s).abs() < 1e-9), "no edge of length {s}");
    }
}

#[test]
fn disjoint_and_nested_boxes() {
    let a = Box3D::new([0.0; 3], [2.0, 2.0, 2.0], 0.3);
    let far = Box3D::new([10.0, 0.0, 0.0], [2.0, 2.0, 2.0], 0.0);
    assert_eq!(iou_3d(&a, &far), 0.0);
    let inner = Box3D::new([0.0; 3], [1.0, 1.0, 1.0], 0.3);
    assert_abs_diff_eq!(iou_3d(&a, &inner), 1.0 / 8.0, epsilon = 1e-12);
}

#[test]
fn exact_iou_agrees_with_sampling_on_a_few_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let (a, b) = v2pdet::geom::random_box_pair(&mut rng);
        let mc = iou_3d_montecarlo(&a, &b, 200_000, &mut rng);
        assert!((iou_3d(&a, &b) - mc.iou).abs() < 5.0 * mc.stderr + 1e-3);
    }
}
