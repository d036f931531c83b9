mod common;

use std::collections::{BTreeSet, HashMap};

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use v2pdet::autodiff::{Ctx, Tensor};
use v2pdet::backbone::{strided_rulebook, submanifold_rulebook, SparseConvBlock, VoxelLevel};
use v2pdet::decoder::{knn_exhaustive, knn_interpolate, knn_weights, KnnIndex};
use v2pdet::geom::{rotate_z, Xyz};
use v2pdet::model::Detector;
use v2pdet::voxel::{voxelize, SparseVoxelTensor, VoxelIndex};

fn arb_indices() -> impl Strategy<Value = Vec<VoxelIndex>> {
    prop::collection::btree_set(prop::array::uniform3(0i32..12), 1..60).prop_map(|s| s.into_iter().collect())
}

fn arb_points(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Xyz>> {
    prop::collection::vec(prop::array::uniform3(-5.0..5.0f64), n)
}

fn rows_by_index(cx: &Ctx, lv: &VoxelLevel) -> HashMap<VoxelIndex, Vec<f64>> {
    let t = cx.g.value(lv.feats);
    lv.indices.iter().enumerate().map(|(i, v)| (*v, t.row(i).to_vec())).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn submanifold_keeps_index_set(idx in arb_indices()) {
        let mut store = v2pdet::autodiff::ParamStore::new();
        let block = SparseConvBlock::new(&mut store, &mut common::rng(1), "c", 2, 3, 1).unwrap();
        let mut cx = Ctx::new(&store);
        let feats = cx.g.constant(Tensor::filled(idx.len(), 2, 0.5));
        let out = block.forward(&mut cx, &VoxelLevel { stride: 1, indices: idx.clone(), feats }).unwrap();
        prop_assert_eq!(out.indices, idx.clone());
        prop_assert_eq!(submanifold_rulebook(&idx).n_out, idx.len());
    }

    #[test]
    fn strided_output_is_floor_halving(idx in arb_indices()) {
        let (out, book) = strided_rulebook(&idx);
        let want: BTreeSet<VoxelIndex> = idx.iter().map(|v| v.map(|c| c.div_euclid(2))).collect();
        let got: BTreeSet<VoxelIndex> = out.iter().copied().collect();
        prop_assert_eq!(got.len(), out.len());
        prop_assert_eq!(got, want);
        prop_assert_eq!(book.n_out, out.len());
    }

    #[test]
    fn knn_weights_sum_to_one(q in arb_points(1..30), s in arb_points(1..40), k in 1usize..5) {
        let mix = knn_weights(&q, &s, k).unwrap();
        for r in 0..q.len() {
            let total: f64 = mix.row(r).map(|(_, w)| w).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(mix.row(r).all(|(_, w)| w >= 0.0));
        }
    }

    #[test]
    fn bucketed_knn_matches_exhaustive(q in arb_points(1..30), s in arb_points(1..80), k in 1usize..6) {
        let want = knn_exhaustive(&q, &s, k);
        let index = KnnIndex::new(&s, k);
        for (qi, w) in q.iter().zip(&want) {
            prop_assert_eq!(&index.query(qi, k), w);
        }
    }

    #[test]
    fn knn_interpolation_rigid_invariant(q in arb_points(1..20), s in arb_points(3..30), rot in -3.1..3.1f64, t in prop::array::uniform3(-50.0..50.0f64)) {
        let mut g = common::rng(3);
        let feats = Tensor::from_vec(s.len(), 2, (0..s.len() * 2).map(|_| g.random_range(-1.0..1.0)).collect()).unwrap();
        let move_all = |v: &[Xyz]| -> Vec<Xyz> {
            v.iter().map(|p| { let r = rotate_z(*p, rot); [r[0] + t[0], r[1] + t[1], r[2] + t[2]] }).collect()
        };
        let store = v2pdet::autodiff::ParamStore::new();
        let mut cx = Ctx::new(&store);
        let f = cx.g.constant(feats);
        let a = knn_interpolate(&mut cx, &q, &s, f, 3).unwrap();
        let b = knn_interpolate(&mut cx, &move_all(&q), &move_all(&s), f, 3).unwrap();
        for (x, y) in cx.g.value(a).data().iter().zip(cx.g.value(b).data()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }
}

#[test]
fn knn_symmetric_and_one_two_cases() {
    let s = [[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
    let mix = knn_weights(&[[0.0, 0.0, 0.0]], &s, 2).unwrap();
    for (_, w) in mix.row(0) {
        assert!((w - 0.5).abs() <= 1e-15);
    }
    let s = [[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]];
    let mix = knn_weights(&[[0.0, 0.0, 0.0]], &s, 2).unwrap();
    let w: HashMap<usize, f64> = mix.row(0).collect();
    assert!((w[&0] - 2.0 / 3.0).abs() <= 1e-15);
    assert!((w[&1] - 1.0 / 3.0).abs() <= 1e-15);
}

#[test]
fn coincident_query_copies_source() {
    let s = [[1.0, 1.0, 1.0], [2.0, 0.0, 0.0]];
    let mix = knn_weights(&[[1.0, 1.0, 1.0]], &s, 2).unwrap();
    assert_eq!(mix.row(0).collect::<Vec<_>>(), vec![(0, 1.0)]);
}

#[test]
fn encoder_ignores_voxel_order() {
    let cfg = common::tiny_config();
    let det = Detector::new(&cfg, 2).unwrap();
    let (pc, _) = common::tiny_scene(4);
    let v0 = voxelize(&pc, &det.spec).unwrap();
    let mut perm: Vec<usize> = (0..v0.len()).collect();
    perm.shuffle(&mut common::rng(8));
    let shuffled = SparseVoxelTensor {
        indices: perm.iter().map(|&i| v0.indices[i]).collect(),
        features: v0.features.gather_rows(&perm),
        ..v0.clone()
    };
    let mut cx = Ctx::new(&det.store);
    let a = det.backbone.encode(&mut cx, &v0).unwrap();
    let b = det.backbone.encode(&mut cx, &shuffled).unwrap();
    for (la, lb) in a.levels.iter().zip(&b.levels) {
        let (ma, mb) = (rows_by_index(&cx, la), rows_by_index(&cx, lb));
        assert_eq!(ma.len(), mb.len());
        for (k, ra) in &ma {
            for (x, y) in ra.iter().zip(&mb[k]) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }
    let ba = det.backbone.to_bev(&mut cx, &a.levels[3], &det.spec).unwrap();
    let bb = det.backbone.to_bev(&mut cx, &b.levels[3], &det.spec).unwrap();
    for (x, y) in cx.g.value(ba.feats).data().iter().zip(cx.g.value(bb.feats).data()) {
        assert!((x - y).abs() <= 1e-12);
    }
}

#[test]
fn every_decoder_level_has_one_row_per_point() {
    let cfg = common::tiny_config();
    let det = Detector::new(&cfg, 2).unwrap();
    for seed in 0..4 {
        let (pc, _) = common::tiny_scene(seed);
        let mut cx = Ctx::new(&det.store);
        let f = det.forward(&mut cx, &pc).unwrap();
        let n = f.points.len();
        for (v, w) in f.decoded.levels.iter().zip(cfg.decoder.widths) {
            assert_eq!(cx.g.shape(*v), (n, w));
        }
        assert_eq!(cx.g.shape(f.decoded.p0), (n, cfg.decoder.embed_width));
        let s = cx.g.value(f.decoded.seg_prob);
        assert_eq!(s.shape(), (n, 1));
        assert!(s.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }
}

#[test]
fn zero_residual_weights_leave_the_identity_path() {
    let mut store = v2pdet::autodiff::ParamStore::new();
    let mut g = common::rng(12);
    let block = v2pdet::decoder::DecodeBlock::new(&mut store, &mut g, "d", 3, 5, 4).unwrap();
    store.get_mut(block.residual.w).data_mut().fill(0.0);
    let prev = Tensor::from_vec(6, 3, (0..18).map(|_| g.random_range(-1.0..1.0)).collect()).unwrap();
    let vox = Tensor::from_vec(6, 5, (0..30).map(|_| g.random_range(-1.0..1.0)).collect()).unwrap();
    let mut cx = Ctx::new(&store);
    let p = cx.g.constant(prev.clone());
    let x = cx.g.constant(vox);
    let out = block.forward(&mut cx, p, Some(x)).unwrap();
    // Oracle: ReLU(prev W + b) by hand.
    let (w, b) = (store.get(block.identity.w), store.get(block.identity.b.unwrap()));
    for r in 0..6 {
        for c in 0..4 {
            let want = ((0..3).map(|k| prev.get(r, k) * w.get(k, c)).sum::<f64>() + b.get(0, c)).max(0.0);
            assert!((cx.g.value(out).get(r, c) - want).abs() <= 1e-12);
        }
    }
}
