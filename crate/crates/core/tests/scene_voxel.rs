mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;

use v2pdet::geom::contains;
use v2pdet::scene::{augment, crop_to_bounds, decode_kitti_bin, encode_kitti_bin, synth_scene, Augmentation, PointCloud, SceneBounds};
use v2pdet::voxel::{devoxelize, voxelize, voxelize_with_counts, VoxelGridSpec};

fn kitti_spec() -> VoxelGridSpec {
    VoxelGridSpec::new([0.05, 0.05, 0.1], SceneBounds { min: [0.0, -40.0, -3.0], max: [70.4, 40.0, 1.0] }).unwrap()
}

fn arb_cloud(max: usize) -> impl Strategy<Value = PointCloud> {
    prop::collection::vec((0.0..70.4f64, -40.0..40.0f64, -3.0..1.0f64, 0.0..1.0f64), 1..max)
        .prop_map(|v| PointCloud::new(v.into_iter().map(|(x, y, z, r)| [x, y, z, r]).collect()))
}

fn membership(pc: &PointCloud, boxes: &[v2pdet::geom::Box3D]) -> Vec<usize> {
    boxes.iter().map(|b| pc.points.iter().filter(|p| contains(b, [p[0], p[1], p[2]])).count()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn synth_is_seed_deterministic(seed in 0u64..10_000) {
        let a = synth_scene(&common::tiny_spec(seed)).unwrap();
        let b = synth_scene(&common::tiny_spec(seed)).unwrap();
        prop_assert_eq!(encode_kitti_bin(&a.0), encode_kitti_bin(&b.0));
        prop_assert_eq!(a.1, b.1);
    }

    #[test]
    fn synth_points_stay_in_bounds(seed in 0u64..10_000) {
        let spec = common::tiny_spec(seed);
        let (pc, gt) = synth_scene(&spec).unwrap();
        prop_assert!(pc.points.iter().all(|p| spec.bounds.contains([p[0], p[1], p[2]])));
        gt.validate().unwrap();
    }

    #[test]
    fn augmentation_keeps_box_membership(seed in 0u64..1000, s in 0.95..1.05f64, rot in -0.78..0.78f64, flip in any::<bool>()) {
        let (pc, gt) = synth_scene(&common::tiny_spec(seed)).unwrap();
        let base = membership(&pc, &gt.boxes);
        let mut cur = (pc, gt);
        let mut augs = vec![Augmentation::Scale(s), Augmentation::Rotate(rot)];
        if flip {
            augs.push(Augmentation::FlipX);
        }
        for a in augs {
            cur = augment(&cur.0, &cur.1, a).unwrap();
            prop_assert_eq!(membership(&cur.0, &cur.1.boxes), base.clone());
        }
    }

    #[test]
    fn bin_round_trip_at_f32(pc in arb_cloud(200)) {
        let back = decode_kitti_bin(&encode_kitti_bin(&pc)).unwrap();
        prop_assert_eq!(back.len(), pc.len());
        for (a, b) in pc.points.iter().zip(&back.points) {
            for k in 0..4 {
                prop_assert_eq!(a[k] as f32, b[k] as f32);
            }
        }
        // A second trip is exact.
        prop_assert_eq!(encode_kitti_bin(&back), encode_kitti_bin(&pc));
    }

    #[test]
    fn crop_keeps_only_in_bounds(pc in arb_cloud(100), lo in -10.0..10.0f64) {
        let b = SceneBounds { min: [lo, lo, -1.0], max: [lo + 30.0, lo + 30.0, 0.5] };
        let c = crop_to_bounds(&pc, &b);
        prop_assert!(c.points.iter().all(|p| b.contains([p[0], p[1], p[2]])));
        let kept = pc.points.iter().filter(|p| b.contains([p[0], p[1], p[2]])).count();
        prop_assert_eq!(c.len(), kept);
    }

    #[test]
    fn voxelize_permutation_invariant(pc in arb_cloud(150), seed in 0u64..1000) {
        use rand::seq::SliceRandom;
        let spec = kitti_spec();
        let mut perm: Vec<usize> = (0..pc.len()).collect();
        perm.shuffle(&mut common::rng(seed));
        let a = voxelize(&pc, &spec).unwrap();
        let b = voxelize(&pc.permuted(&perm), &spec).unwrap();
        prop_assert_eq!(&a.indices, &b.indices);
        for (x, y) in a.features.data().iter().zip(b.features.data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn voxel_counts_conserve_points(pc in arb_cloud(150)) {
        let (t, counts) = voxelize_with_counts(&pc, &kitti_spec()).unwrap();
        prop_assert_eq!(counts.iter().sum::<usize>(), pc.len());
        t.validate().unwrap();
        let mut sorted = t.indices.clone();
        sorted.sort();
        sorted.dedup();
        prop_assert_eq!(sorted, t.indices.clone());
    }

    #[test]
    fn devoxelize_within_half_step(pc in arb_cloud(100)) {
        let spec = kitti_spec();
        for p in &pc.points {
            let idx = spec.index_of([p[0], p[1], p[2]]).unwrap();
            for s in [1u32, 2, 4, 8] {
                let coarse = idx.map(|v| v.div_euclid(s as i32));
                let c = devoxelize(coarse, &spec, s);
                for k in 0..3 {
                    prop_assert!((c[k] - p[k]).abs() <= spec.step[k] * s as f64 / 2.0 + 1e-9);
                }
            }
        }
    }
}

#[test]
fn upper_bound_is_excluded() {
    let spec = kitti_spec();
    assert!(spec.index_of([70.4, 0.0, 0.0]).is_err());
    assert!(spec.index_of([0.0, -40.0, -3.0]).is_ok());
    let pc = PointCloud::new(vec![[70.4, 0.0, 0.0, 0.5], [1.0, 0.0, 0.0, 0.5]]);
    assert_eq!(crop_to_bounds(&pc, &spec.bounds).len(), 1);
}

#[test]
fn voxel_feature_is_point_mean() {
    let spec = kitti_spec();
    let pc = PointCloud::new(vec![[1.01, 0.01, 0.01, 0.2], [1.03, 0.03, 0.05, 0.4], [5.0, 5.0, 0.0, 1.0]]);
    let (t, counts) = voxelize_with_counts(&pc, &spec).unwrap();
    let mut by_count: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (i, c) in counts.iter().enumerate() {
        by_count.insert(*c, t.features.row(i).to_vec());
    }
    let two = &by_count[&2];
    for (k, want) in [1.02, 0.02, 0.03, 0.3].iter().enumerate() {
        assert!((two[k] - want).abs() < 1e-12);
    }
}
