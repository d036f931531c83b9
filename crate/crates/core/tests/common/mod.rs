#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use v2pdet::autodiff::{Ctx, ParamStore, Tensor, Var};
use v2pdet::config::Config;
use v2pdet::geom::{Box3D, Xyz};
use v2pdet::scene::{synth_scene, GroundTruth, PointCloud, SceneBounds, SynthClass, SynthSpec};
use v2pdet::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A few-channel detector over a 6.4 x 6.4 m patch; small enough that finite
/// differences over every parameter tensor stay cheap.
pub fn tiny_config() -> Config {
    let mut c = Config::default();
    c.scene.bounds = tiny_bounds();
    c.scene.voxel_size = [0.2, 0.2, 0.4];
    c.classes.truncate(1);
    c.classes[0].anchor_size = [1.2, 0.8, 0.8];
    c.classes[0].anchor_bottom_z = -1.0;
    c.classes[0].eval_iou = 0.5;
    c.backbone.widths = [3, 4, 5, 6];
    c.backbone.bev_channels = 4;
    c.rpn.head_channels = 4;
    c.rpn.post_nms_top_n = 20;
    c.decoder.widths = [5, 4, 4, 3];
    c.decoder.embed_width = 4;
    c.decoder.knn_k = 3;
    c.decoder.seg_hidden = vec![4];
    c.roi.grid_size = 2;
    c.roi.radii = vec![0.4, 0.8];
    c.roi.neighbors = 3;
    c.roi.margin = 0.8;
    c.roi.mlp1 = vec![4];
    c.roi.mlp2 = vec![4];
    c.roi.mlp3 = vec![4];
    c.roi.c_h = 4;
    c.roi.c_m = 3;
    c.roi.c_b = 3;
    c.roi.c_b_prime = 2;
    c.roi.fc_fused = vec![6];
    c.roi.fc_final = vec![6];
    c.roi.branch_hidden = vec![4];
    c.train.proposals_per_scene = 8;
    c.train.batch_size = 1;
    c
}

pub fn tiny_bounds() -> SceneBounds {
    SceneBounds { min: [0.0, -3.2, -2.0], max: [6.4, 3.2, 1.2] }
}

pub fn tiny_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        bounds: tiny_bounds(),
        num_boxes: 2,
        classes: vec![SynthClass { class_id: 0, size_min: [1.0, 0.6, 0.6], size_max: [1.4, 0.9, 0.9], bottom_z: -1.0 }],
        points_per_box: 25,
        background_density: 0.3,
        noise_std: 0.02,
        clearance: 0.3,
        seed,
    }
}

pub fn tiny_scene(seed: u64) -> (PointCloud, GroundTruth) {
    synth_scene(&tiny_spec(seed)).unwrap()
}

pub fn random_box<R: Rng>(rng: &mut R, center_span: f64) -> Box3D {
    Box3D::new(
        [rng.random_range(-center_span..center_span), rng.random_range(-center_span..center_span), rng.random_range(-1.0..1.0)],
        [rng.random_range(0.5..4.0), rng.random_range(0.5..2.5), rng.random_range(0.5..2.0)],
        rng.random_range(-3.1..3.1),
    )
}

pub fn random_points<R: Rng>(rng: &mut R, n: usize, span: f64) -> Vec<Xyz> {
    (0..n).map(|_| [rng.random_range(-span..span), rng.random_range(-span..span), rng.random_range(-span..span)]).collect()
}

/// `sum(v * W)` for a fixed random `W`, so every output entry gets its own
/// weight in the scalar under test.
pub fn probe(cx: &mut Ctx, v: Var, seed: u64) -> Result<Var> {
    let (r, c) = cx.g.shape(v);
    let mut g = rng(seed);
    let w = Tensor::from_vec(r, c, (0..r * c).map(|_| g.random_range(-1.0..1.0)).collect())?;
    let w = cx.g.constant(w);
    let m = cx.g.mul(v, w)?;
    Ok(cx.g.sum(m))
}

#[derive(Debug)]
pub struct ParamCheck {
    /// `||analytic - numeric|| / (||analytic|| + ||numeric||)` over the
    /// sampled entries of all parameter tensors together.
    pub rel: f64,
    /// Tensor with the largest share of `||analytic - numeric||^2`.
    pub worst: String,
    /// Tensors with a non-zero gradient on either side.
    pub touched: usize,
}

/// Adds uniform noise in `+-amp` to every parameter. Zero-initialized biases
/// otherwise put dead units exactly on the ReLU kink.
pub fn jitter_store(store: &mut ParamStore, seed: u64, amp: f64) {
    let mut g = rng(seed);
    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += g.random_range(-amp..amp);
        }
    }
}

/// Central differences of the scalar `f` against `Ctx::backward`, over up to
/// `per_tensor` evenly spaced entries of every parameter tensor.
pub fn param_gradcheck<F>(store: &ParamStore, f: F, per_tensor: usize) -> Result<ParamCheck>
where
    F: Fn(&mut Ctx) -> Result<Var>,
{
    param_gradcheck_step(store, f, per_tensor, 1e-5)
}

pub fn param_gradcheck_step<F>(store: &ParamStore, f: F, per_tensor: usize, h: f64) -> Result<ParamCheck>
where
    F: Fn(&mut Ctx) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut cx = Ctx::new(s);
        let out = f(&mut cx)?;
        Ok(cx.g.value(out).data().iter().sum())
    };
    let mut cx = Ctx::new(store);
    let out = f(&mut cx)?;
    let out = if cx.g.shape(out) == (1, 1) { out } else { cx.g.sum(out) };
    let grads = cx.backward(out);
    let ids: Vec<_> = store.iter().map(|(id, name, t)| (id, name.to_string(), t.len())).collect();
    let mut work = store.clone();
    let mut res = ParamCheck { rel: 0.0, worst: String::new(), touched: 0 };
    let (mut d2, mut a2, mut n2, mut worst_d2) = (0.0, 0.0, 0.0, 0.0);
    for (id, name, len) in ids {
        let stride = len.div_ceil(per_tensor).max(1);
        let (mut td, mut touched) = (0.0, false);
        for i in (0..len).step_by(stride) {
            let x0 = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = x0 + h;
            let fp = eval(&work)?;
            work.get_mut(id).data_mut()[i] = x0 - h;
            let fm = eval(&work)?;
            work.get_mut(id).data_mut()[i] = x0;
            let num = (fp - fm) / (2.0 * h);
            let ana = grads.get(id).map_or(0.0, |g| g.data()[i]);
            td += (ana - num) * (ana - num);
            a2 += ana * ana;
            n2 += num * num;
            touched |= ana != 0.0 || num != 0.0;
        }
        d2 += td;
        res.touched += touched as usize;
        if td > worst_d2 {
            worst_d2 = td;
            res.worst = name;
        }
    }
    let denom = a2.sqrt() + n2.sqrt();
    res.rel = if denom > 0.0 { d2.sqrt() / denom } else { 0.0 };
    Ok(res)
}

pub mod grad {
    use std::sync::Arc;

    use rand::Rng;
    use v2pdet::autodiff::gradcheck::{check_gradients, DEFAULT_STEP};
    use v2pdet::autodiff::{Ctx, ParamStore, Tensor};
    use v2pdet::backbone::{submanifold_rulebook, SparseConvBlock, VoxelLevel};
    use v2pdet::decoder::{seg_labels_for, DecodeBlock};
    use v2pdet::geom::Box3D;
    use v2pdet::model::Detector;
    use v2pdet::roi;
    use v2pdet::rpn;
    use v2pdet::train::{total_loss, LossParts};
    use v2pdet::voxel::VoxelIndex;
    use v2pdet::Result;

    use super::{param_gradcheck, probe, rng, tiny_config, tiny_scene};

    pub const TOL: f64 = 1e-6;

    fn rand_t<R: Rng>(g: &mut R, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| g.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_voxels<R: Rng>(g: &mut R, n: usize) -> Vec<VoxelIndex> {
        let mut v: Vec<VoxelIndex> = Vec::new();
        while v.len() < n {
            let i = [g.random_range(0..4), g.random_range(0..4), g.random_range(0..3)];
            if !v.contains(&i) {
                v.push(i);
            }
        }
        v
    }

    /// Boxes around the ground truth, nudged so pooling sees uneven crops.
    fn probe_boxes(gt: &[Box3D]) -> Vec<Box3D> {
        let mut out = Vec::new();
        for (k, b) in gt.iter().enumerate() {
            out.push(*b);
            let mut j = *b;
            j.center[0] += 0.15 + 0.05 * k as f64;
            j.center[1] -= 0.1;
            j.yaw += 0.2;
            j.size[0] *= 1.1;
            out.push(j);
        }
        out
    }

    /// `(name, max relative error)` for every learned operation and loss.
    pub fn suite(per_tensor: usize) -> Result<Vec<(String, f64)>> {
        let mut out: Vec<(String, f64)> = Vec::new();
        let mut g = rng(41);

        // Sparse convolution, submanifold and strided, w.r.t. weights and input.
        for stride in [1u32, 2] {
            let mut store = ParamStore::new();
            let block = SparseConvBlock::new(&mut store, &mut g, "conv", 3, 4, stride)?;
            let idx = random_voxels(&mut g, 14);
            let x = store.insert("x", rand_t(&mut g, idx.len(), 3))?;
            let c = param_gradcheck(
                &store,
                |cx| {
                    let feats = cx.param(x);
                    let lv = VoxelLevel { stride: 1, indices: idx.clone(), feats };
                    let y = block.forward(cx, &lv)?;
                    probe(cx, y.feats, 1)
                },
                usize::MAX,
            )?;
            out.push((format!("sparse conv stride {stride}"), c.rel));
        }
        // Raw conv op against its input through the graph-level checker.
        {
            let idx = random_voxels(&mut g, 10);
            let book = Arc::new(submanifold_rulebook(&idx));
            let x = rand_t(&mut g, idx.len(), 2);
            let w = rand_t(&mut g, 27 * 2, 3);
            let r = check_gradients(&[x, w], |gr, v| gr.conv(v[0], v[1], book.clone()), DEFAULT_STEP)?;
            out.push(("conv op".into(), r.max_rel_error()));
        }
        // One decode block with and without the residual path.
        {
            let mut store = ParamStore::new();
            let block = DecodeBlock::new(&mut store, &mut g, "dec", 4, 3, 5)?;
            let p = store.insert("p", rand_t(&mut g, 7, 4))?;
            let v = store.insert("v", rand_t(&mut g, 7, 3))?;
            let c = param_gradcheck(
                &store,
                |cx| {
                    let (pp, vv) = (cx.param(p), cx.param(v));
                    let a = block.forward(cx, pp, Some(vv))?;
                    let b = block.forward(cx, pp, None)?;
                    let s = cx.g.add(a, b)?;
                    probe(cx, s, 2)
                },
                usize::MAX,
            )?;
            out.push(("decode block".into(), c.rel));
        }

        let cfg = tiny_config();
        let mut det = Detector::new(&cfg, 5)?;
        // Seed picked so no ReLU input lies within the difference step of zero.
        super::jitter_store(&mut det.store, 7, 0.1);
        let (pc, gt) = tiny_scene(1);
        let boxes = probe_boxes(&gt.boxes);
        let streams = cfg.roi.streams;
        let mut run = |name: &str, f: &dyn Fn(&mut Ctx) -> Result<v2pdet::autodiff::Var>| -> Result<()> {
            let c = param_gradcheck(&det.store, f, per_tensor)?;
            out.push((name.to_string(), c.rel));
            Ok(())
        };

        run("encoder and BEV", &|cx| {
            let f = det.forward(cx, &pc)?;
            let a = probe(cx, f.levels.levels[3].feats, 3)?;
            let b = probe(cx, f.bev.feats, 4)?;
            cx.g.add(a, b)
        })?;
        run("decoder", &|cx| {
            let f = det.forward(cx, &pc)?;
            let mut acc = probe(cx, f.decoded.p0, 5)?;
            for (k, l) in f.decoded.levels.iter().enumerate() {
                let p = probe(cx, *l, 6 + k as u64)?;
                acc = cx.g.add(acc, p)?;
            }
            Ok(acc)
        })?;
        run("segmentation head", &|cx| {
            let f = det.forward(cx, &pc)?;
            probe(cx, f.decoded.seg_logit, 10)
        })?;
        run("point stream", &|cx| {
            let f = det.forward(cx, &pc)?;
            let (h, _) = det.roi.point_roi_align(cx, &f.roi_view(), &boxes)?;
            probe(cx, h, 11)
        })?;
        run("map stream", &|cx| {
            let f = det.forward(cx, &pc)?;
            let m = det.roi.map_roi_align(cx, &f.roi_view(), &boxes)?;
            probe(cx, m, 12)
        })?;
        run("corner stream", &|cx| {
            let b = det.roi.corner_embed(cx, &boxes)?;
            probe(cx, b, 13)
        })?;
        run("rpn head", &|cx| {
            let f = det.forward(cx, &pc)?;
            let a = probe(cx, f.rpn.cls_logits, 14)?;
            let b = probe(cx, f.rpn.reg, 15)?;
            cx.g.add(a, b)
        })?;
        run("refinement heads", &|cx| {
            let f = det.forward(cx, &pc)?;
            let (o, _) = det.roi.forward(cx, &f.roi_view(), &boxes, streams)?;
            let a = probe(cx, o.cls_logit, 16)?;
            let b = probe(cx, o.reg, 17)?;
            let c = probe(cx, o.iou_logit, 18)?;
            let ab = cx.g.add(a, b)?;
            cx.g.add(ab, c)
        })?;

        let targets = rpn::assign_targets(&det.anchors, &gt.boxes, &gt.class_ids, cfg.rpn.pos_iou, cfg.rpn.neg_iou)?;
        let classes = vec![0; boxes.len()];
        let t = &cfg.train;
        let rt = roi::refine_targets(&boxes, &classes, &gt.boxes, &gt.class_ids, t.theta_h, t.theta_l, t.theta_reg, &cfg.roi.residual_std)?;
        let loss = |cx: &mut Ctx| -> Result<LossParts> {
            let f = det.forward(cx, &pc)?;
            let (rc, rr) = rpn::rpn_loss(cx, &f.rpn, &targets, &cfg.rpn)?;
            let rpn = cx.g.add(rc, rr)?;
            let labels = seg_labels_for(&f.points, &gt.boxes);
            let n_fg = labels.iter().filter(|&&l| l == 1.0).count().max(1) as f64;
            let ones = vec![1.0; labels.len()];
            let seg = cx.g.focal_loss_weighted(f.decoded.seg_prob, &labels, &ones, n_fg, cfg.loss.seg_alpha, cfg.loss.seg_gamma)?;
            let (o, _) = det.roi.forward(cx, &f.roi_view(), &boxes, streams)?;
            let (cls, reg, iou) = roi::refine_loss(cx, &o, &rt)?;
            Ok(LossParts { rpn, seg, cls, reg, iou })
        };
        run("rpn loss", &|cx| Ok(loss(cx)?.rpn))?;
        run("segmentation loss", &|cx| Ok(loss(cx)?.seg))?;
        run("refinement loss", &|cx| {
            let p = loss(cx)?;
            let cr = cx.g.add(p.cls, p.reg)?;
            cx.g.add(cr, p.iou)
        })?;
        run("total loss", &|cx| {
            let p = loss(cx)?;
            Ok(total_loss(cx, &p, &cfg.loss)?.1)
        })?;
        Ok(out)
    }
}

/// AP by direct integration: for each recall target `i/n`, the best precision
/// among all rank cutoffs whose recall reaches it.
pub fn brute_ap(hits: &[bool], n_gt: usize, n: usize) -> f64 {
    let mut total = 0.0;
    for i in 1..=n {
        let target = i as f64 / n as f64;
        let mut best = 0.0f64;
        for cut in 1..=hits.len() {
            let tp = hits[..cut].iter().filter(|&&h| h).count() as f64;
            if tp / n_gt as f64 + 1e-12 >= target {
                best = best.max(tp / cut as f64);
            }
        }
        total += best;
    }
    total / n as f64
}

pub fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

/// Proposals around one ground-truth box: the first half overlap it by well
/// over `0.55`, the second half by well under.
pub fn half_pass_set() -> (Box3D, Vec<Box3D>) {
    let gt = Box3D::new([10.0, 0.0, -1.0], [4.0, 2.0, 1.5], 0.1);
    let shift = |dx: f64, dy: f64| Box3D::new([10.0 + dx, dy, -1.0], [4.0, 2.0, 1.5], 0.1);
    let props = vec![
        shift(0.1, 0.0),
        shift(-0.2, 0.05),
        shift(0.3, -0.1),
        shift(0.0, 0.15),
        shift(2.6, 0.0),
        shift(-2.8, 0.3),
        shift(0.0, 1.5),
        shift(3.5, 1.0),
    ];
    (gt, props)
}
