//! Second stage: grid-point RoI pooling from three streams (raw points with
//! decoded features, the BEV map, and the box corners), the classification,
//! residual and IoU branches, refinement targets, and confidence-ranked NMS.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::nn::RELU_GAIN;
use crate::autodiff::{Ctx, Groups, Linear, Mlp, MlpSpec, ParamStore, SparseMix, Tensor, Var};
use crate::backbone::BevMap;
use crate::config::{ConfidenceMode, RoiConfig, StreamSwitches};
use crate::error::{Error, Result};
use crate::geom::{self, Box3D, BoxTester, Xyz};
use crate::rpn::{self, BOX_CODE};
use crate::voxel::VoxelGridSpec;

/// Cell-center grid in box-canonical coordinates, x-major.
pub fn make_grid(b: &Box3D, n: usize) -> Vec<Xyz> {
    let mut out = Vec::with_capacity(n * n * n);
    let f = |i: usize, s: f64| ((i as f64 + 0.5) / n as f64 - 0.5) * s;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                out.push([f(i, b.size[0]), f(j, b.size[1]), f(k, b.size[2])]);
            }
        }
    }
    out
}

pub fn make_grid_world(b: &Box3D, n: usize) -> Vec<Xyz> {
    make_grid(b, n).into_iter().map(|q| geom::from_canonical(b, q)).collect()
}

/// Continuous BEV coordinates of a world point; cell `i` sits at integer `i`.
pub fn bev_coords(p: Xyz, spec: &VoxelGridSpec, stride: u32) -> [f64; 2] {
    [
        (p[0] - spec.bounds.min[0]) / (spec.step[0] * stride as f64),
        (p[1] - spec.bounds.min[1]) / (spec.step[1] * stride as f64),
    ]
}

/// Bilinear interpolation rows over BEV cells (row index `ix * ny + iy`).
/// Samples beyond the map clamp to the border.
pub fn bilinear_weights(coords: &[[f64; 2]], nx: usize, ny: usize) -> SparseMix {
    let axis = |u: f64, n: usize| -> (usize, usize, f64) {
        let u = u.clamp(0.0, (n - 1) as f64);
        let i0 = (u.floor() as usize).min(n.saturating_sub(2));
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, u - i0 as f64)
    };
    let mut mix = SparseMix::new();
    for c in coords {
        let (x0, x1, tx) = axis(c[0], nx);
        let (y0, y1, ty) = axis(c[1], ny);
        let mut row: Vec<(usize, f64)> = Vec::with_capacity(4);
        for (x, wx) in [(x0, 1.0 - tx), (x1, tx)] {
            for (y, wy) in [(y0, 1.0 - ty), (y1, ty)] {
                let w = wx * wy;
                if w == 0.0 {
                    continue;
                }
                let cell = x * ny + y;
                match row.iter_mut().find(|e| e.0 == cell) {
                    Some(e) => e.1 += w,
                    None => row.push((cell, w)),
                }
            }
        }
        mix.push_row(row);
    }
    mix
}

/// Per-scene tensors the RoI stage reads.
#[derive(Debug, Clone)]
pub struct SceneFeatures<'a> {
    pub points: &'a [Xyz],
    /// `N x C` point embeddings.
    pub p0: Var,
    /// `N x 1` foreground probabilities.
    pub seg: Var,
    pub bev: &'a BevMap,
    pub spec: VoxelGridSpec,
}

/// Points gathered for a batch of boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    /// `(box, point)` per cropped entry, grouped by box.
    pub entries: Vec<(usize, usize)>,
    pub canonical: Vec<Xyz>,
    pub per_box: Vec<std::ops::Range<usize>>,
}

pub fn crop_points(points: &[Xyz], boxes: &[Box3D], margin: f64) -> Crop {
    let mut entries = Vec::new();
    let mut canonical = Vec::new();
    let mut per_box = Vec::with_capacity(boxes.len());
    for (r, b) in boxes.iter().enumerate() {
        let start = entries.len();
        let t = BoxTester::new(&b.expanded(margin));
        for (i, &p) in points.iter().enumerate() {
            if t.contains(p) {
                entries.push((r, i));
                canonical.push(geom::to_canonical(b, p));
            }
        }
        per_box.push(start..entries.len());
    }
    Crop { entries, canonical, per_box }
}

/// For each box and grid point, the cropped entries within `radius` of the
/// grid point, nearest `k` first (ties by entry index).
pub fn group_neighbors(crop: &Crop, grids: &[Vec<Xyz>], radius: f64, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for (r, grid) in grids.iter().enumerate() {
        let range = crop.per_box[r].clone();
        for g in grid {
            let mut near: Vec<(f64, usize)> = range
                .clone()
                .filter_map(|e| {
                    let p = crop.canonical[e];
                    let d = ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2)).sqrt();
                    (d < radius).then_some((d, e))
                })
                .collect();
            near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            out.push(near.into_iter().take(k).map(|(_, e)| e).collect());
        }
    }
    out
}

fn mlp_spec(d_in: usize, widths: &[usize], d_out: Option<usize>, final_relu: bool) -> MlpSpec {
    let mut w = vec![d_in];
    w.extend_from_slice(widths);
    if let Some(o) = d_out {
        w.push(o);
    }
    MlpSpec::new(w, final_relu)
}

#[derive(Debug, Clone)]
pub struct RoiHead {
    pub cfg: RoiConfig,
    pub mlp1: Mlp,
    pub mlp2: Mlp,
    pub mlp3: Vec<Mlp>,
    pub map_proj: Linear,
    pub corner_lift: Linear,
    pub corner_agg: Linear,
    pub fused: Mlp,
    pub final_fc: Mlp,
    pub cls: Mlp,
    pub reg: Mlp,
    pub iou: Mlp,
}

/// Outputs for a batch of `R` boxes.
#[derive(Debug, Clone, Copy)]
pub struct RoiOutput {
    pub cls_logit: Var,
    pub reg: Var,
    pub iou_logit: Var,
}

/// Values of one pass, detached from the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub cls_prob: Vec<f64>,
    pub residual: Vec<[f64; BOX_CODE]>,
    pub iou: Vec<f64>,
    pub pass: Pass,
    /// Cropped point count per box; zero marks a low-evidence box.
    pub evidence: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    First,
    Aligned,
}

impl RoiHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &RoiConfig, p0_width: usize, bev_channels: usize) -> Result<Self> {
        let c = cfg;
        let n_g = c.grid_size.pow(3);
        let mlp1 = Mlp::new(store, rng, "roi.mlp1", &mlp_spec(5, &c.mlp1, None, true))?;
        let d1 = *c.mlp1.last().expect("validated");
        let mlp2 = Mlp::new(store, rng, "roi.mlp2", &mlp_spec(d1 + p0_width, &c.mlp2, None, true))?;
        let d2 = *c.mlp2.last().expect("validated");
        let per_scale = c.c_h / c.radii.len();
        let mlp3 = (0..c.radii.len())
            .map(|j| Mlp::new(store, rng, &format!("roi.mlp3.{j}"), &mlp_spec(3 + d2, &c.mlp3, Some(per_scale), true)))
            .collect::<Result<Vec<_>>>()?;
        let map_proj = Linear::new(store, rng, "roi.map", bev_channels, c.c_m, true, RELU_GAIN)?;
        let corner_lift = Linear::new(store, rng, "roi.corner.lift", 3, c.c_b_prime, true, RELU_GAIN)?;
        let corner_agg = Linear::new(store, rng, "roi.corner.agg", 8 * c.c_b_prime, c.c_b, true, 1.0)?;
        let fused = Mlp::new(store, rng, "roi.fused", &mlp_spec(n_g * (c.c_h + c.c_m), &c.fc_fused, None, true))?;
        let q1 = *c.fc_fused.last().expect("validated");
        let final_fc = Mlp::new(store, rng, "roi.final", &mlp_spec(q1 + c.c_b, &c.fc_final, None, true))?;
        let q = *c.fc_final.last().expect("validated");
        let branch = |store: &mut ParamStore, rng: &mut R, name: &str, out: usize| {
            Mlp::new(store, rng, name, &mlp_spec(q, &c.branch_hidden, Some(out), false))
        };
        let cls = branch(store, rng, "roi.cls", 1)?;
        let reg = branch(store, rng, "roi.reg", BOX_CODE)?;
        // start close to the identity residual
        let last = reg.layers.last().expect("at least one layer").w;
        store.get_mut(last).data_mut().iter_mut().for_each(|w| *w *= 0.01);
        let iou = branch(store, rng, "roi.iou", 1)?;
        Ok(RoiHead { cfg: cfg.clone(), mlp1, mlp2, mlp3, map_proj, corner_lift, corner_agg, fused, final_fc, cls, reg, iou })
    }

    pub fn n_grid(&self) -> usize {
        self.cfg.grid_size.pow(3)
    }

    /// Point stream: `(R * N_G) x c_h`, box-major. Also returns per-box
    /// cropped counts.
    pub fn point_roi_align(&self, cx: &mut Ctx, scene: &SceneFeatures, boxes: &[Box3D]) -> Result<(Var, Vec<usize>)> {
        let c = &self.cfg;
        let n_g = self.n_grid();
        let crop = crop_points(scene.points, boxes, c.margin);
        let evidence: Vec<usize> = crop.per_box.iter().map(|r| r.len()).collect();
        if crop.entries.is_empty() {
            return Ok((cx.g.zeros(boxes.len() * n_g, c.c_h), evidence));
        }
        let m = crop.entries.len();
        let point_rows: Vec<usize> = crop.entries.iter().map(|&(_, i)| i).collect();
        let mut local = Tensor::zeros(m, 4);
        for (e, &(_, i)) in crop.entries.iter().enumerate() {
            let q = crop.canonical[e];
            let p = scene.points[i];
            let depth = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() / c.depth_normalizer - 0.5;
            local.row_mut(e).copy_from_slice(&[q[0], q[1], q[2], depth]);
        }
        let local = cx.g.constant(local);
        let s = cx.g.gather_rows(scene.seg, &point_rows)?;
        let x1 = cx.g.concat_cols(&[local, s])?;
        let p_prime = self.mlp1.forward(cx, x1)?;
        let p0 = cx.g.gather_rows(scene.p0, &point_rows)?;
        let x2 = cx.g.concat_cols(&[p_prime, p0])?;
        let p_tilde = self.mlp2.forward(cx, x2)?;

        let grids: Vec<Vec<Xyz>> = boxes.iter().map(|b| make_grid(b, c.grid_size)).collect();
        let mut scales = Vec::with_capacity(c.radii.len());
        for (j, &radius) in c.radii.iter().enumerate() {
            let groups = group_neighbors(&crop, &grids, radius, c.neighbors);
            let mut members = Vec::new();
            let mut offsets = Vec::new();
            let mut pool = Groups::new();
            for (gi, g) in groups.iter().enumerate() {
                let gp = grids[gi / n_g][gi % n_g];
                let start = members.len();
                for &e in g {
                    let p = crop.canonical[e];
                    offsets.extend_from_slice(&[p[0] - gp[0], p[1] - gp[1], p[2] - gp[2]]);
                    members.push(e);
                }
                pool.push_group(start..members.len());
            }
            let width = c.c_h / c.radii.len();
            if members.is_empty() {
                scales.push(cx.g.zeros(boxes.len() * n_g, width));
                continue;
            }
            let off = cx.g.constant(Tensor::from_vec(members.len(), 3, offsets)?);
            let feats = cx.g.gather_rows(p_tilde, &members)?;
            let x3 = cx.g.concat_cols(&[off, feats])?;
            let h = self.mlp3[j].forward(cx, x3)?;
            scales.push(cx.g.max_pool(h, Arc::new(pool))?);
        }
        let h = if scales.len() == 1 { scales[0] } else { cx.g.concat_cols(&scales)? };
        Ok((h, evidence))
    }

    /// Map stream: `(R * N_G) x c_m`.
    pub fn map_roi_align(&self, cx: &mut Ctx, scene: &SceneFeatures, boxes: &[Box3D]) -> Result<Var> {
        let coords: Vec<[f64; 2]> = boxes
            .iter()
            .flat_map(|b| make_grid_world(b, self.cfg.grid_size))
            .map(|g| bev_coords(g, &scene.spec, scene.bev.stride))
            .collect();
        let mix = bilinear_weights(&coords, scene.bev.nx, scene.bev.ny);
        let sampled = cx.g.mix(scene.bev.feats, Arc::new(mix))?;
        let m = self.map_proj.forward(cx, sampled)?;
        Ok(cx.g.relu(m))
    }

    /// Corner embedding: `R x c_b`.
    pub fn corner_embed(&self, cx: &mut Ctx, boxes: &[Box3D]) -> Result<Var> {
        let s = self.cfg.corner_scale;
        let data: Vec<f64> = boxes.iter().flat_map(|b| geom::corners(b).into_iter().flat_map(|p| p.map(|v| v * s))).collect();
        let x = cx.g.constant(Tensor::from_vec(boxes.len() * 8, 3, data)?);
        let lifted = self.corner_lift.forward(cx, x)?;
        let lifted = cx.g.relu(lifted);
        let flat = cx.g.reshape(lifted, boxes.len(), 8 * self.cfg.c_b_prime)?;
        self.corner_agg.forward(cx, flat)
    }

    pub fn fuse_and_predict(&self, cx: &mut Ctx, h: Var, m: Var, b: Var, n_boxes: usize) -> Result<RoiOutput> {
        let hm = cx.g.concat_cols(&[h, m])?;
        let width = self.n_grid() * (self.cfg.c_h + self.cfg.c_m);
        let flat = cx.g.reshape(hm, n_boxes, width)?;
        let q1 = self.fused.forward(cx, flat)?;
        let qb = cx.g.concat_cols(&[q1, b])?;
        let q = self.final_fc.forward(cx, qb)?;
        Ok(RoiOutput { cls_logit: self.cls.forward(cx, q)?, reg: self.reg.forward(cx, q)?, iou_logit: self.iou.forward(cx, q)? })
    }

    /// All three streams plus the branches. Disabled streams contribute zeros
    /// of the same shape.
    pub fn forward(&self, cx: &mut Ctx, scene: &SceneFeatures, boxes: &[Box3D], streams: StreamSwitches) -> Result<(RoiOutput, Vec<usize>)> {
        if boxes.is_empty() {
            return Err(Error::Invalid("RoI pooling needs at least one box".into()));
        }
        let rows = boxes.len() * self.n_grid();
        let (h, evidence) = if streams.point {
            self.point_roi_align(cx, scene, boxes)?
        } else {
            (cx.g.zeros(rows, self.cfg.c_h), crop_points(scene.points, boxes, self.cfg.margin).per_box.iter().map(|r| r.len()).collect())
        };
        let m = if streams.map { self.map_roi_align(cx, scene, boxes)? } else { cx.g.zeros(rows, self.cfg.c_m) };
        let b = if streams.corner { self.corner_embed(cx, boxes)? } else { cx.g.zeros(boxes.len(), self.cfg.c_b) };
        Ok((self.fuse_and_predict(cx, h, m, b, boxes.len())?, evidence))
    }

    /// Runs one pass and reads the values out.
    pub fn refine(&self, cx: &mut Ctx, scene: &SceneFeatures, boxes: &[Box3D], streams: StreamSwitches, pass: Pass) -> Result<Refinement> {
        let (out, evidence) = self.forward(cx, scene, boxes, streams)?;
        let cls = cx.g.value(out.cls_logit).data().iter().map(|&z| crate::autodiff::graph::sigmoid(z)).collect();
        let iou = cx.g.value(out.iou_logit).data().iter().map(|&z| crate::autodiff::graph::sigmoid(z).clamp(0.0, 1.0)).collect();
        let reg = cx.g.value(out.reg);
        let residual = (0..boxes.len()).map(|r| std::array::from_fn(|k| reg.get(r, k))).collect();
        Ok(Refinement { cls_prob: cls, residual, iou, pass, evidence })
    }
}

/// Boxes after applying predicted residuals (in units of `std`) to the
/// pooled boxes.
pub fn apply_residuals(boxes: &[Box3D], residual: &[[f64; BOX_CODE]], std: &[f64; BOX_CODE]) -> Vec<Box3D> {
    boxes
        .iter()
        .zip(residual)
        .map(|(b, r)| {
            let d: [f64; BOX_CODE] = std::array::from_fn(|k| r[k] * std[k]);
            rpn::decode_residual(&d, b)
        })
        .collect()
}

/// Second pooling pass over the refined boxes; only its IoU is kept.
pub fn align_iou(head: &RoiHead, cx: &mut Ctx, scene: &SceneFeatures, refined: &[Box3D], streams: StreamSwitches) -> Result<Refinement> {
    head.refine(cx, scene, refined, streams, Pass::Aligned)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClsTarget {
    Foreground,
    Background,
    Ignore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineTargets {
    pub cls: Vec<ClsTarget>,
    pub reg: Vec<[f64; BOX_CODE]>,
    pub iou: Vec<f64>,
    pub reg_mask: Vec<bool>,
}

impl RefineTargets {
    pub fn num_reg(&self) -> usize {
        self.reg_mask.iter().filter(|&&m| m).count()
    }
}

/// Best 3D IoU of `b` against ground truth of class `cls`, with its index.
pub fn best_match(b: &Box3D, cls: usize, gt_boxes: &[Box3D], gt_classes: &[usize]) -> (f64, Option<usize>) {
    let mut best = (0.0, None);
    for (g, gb) in gt_boxes.iter().enumerate() {
        if gt_classes[g] != cls {
            continue;
        }
        let iou = geom::iou_3d(b, gb);
        if best.1.is_none() || iou > best.0 {
            best = (iou, Some(g));
        }
    }
    best
}

pub fn refine_targets(
    proposals: &[Box3D],
    classes: &[usize],
    gt_boxes: &[Box3D],
    gt_classes: &[usize],
    theta_h: f64,
    theta_l: f64,
    theta_reg: f64,
    std: &[f64; BOX_CODE],
) -> Result<RefineTargets> {
    let mut t = RefineTargets { cls: Vec::new(), reg: Vec::new(), iou: Vec::new(), reg_mask: Vec::new() };
    for (p, &c) in proposals.iter().zip(classes) {
        let (iou, g) = best_match(p, c, gt_boxes, gt_classes);
        t.cls.push(if iou >= theta_h {
            ClsTarget::Foreground
        } else if iou <= theta_l {
            ClsTarget::Background
        } else {
            ClsTarget::Ignore
        });
        t.iou.push(iou);
        let pass = g.is_some() && iou >= theta_reg;
        t.reg_mask.push(pass);
        t.reg.push(match g {
            Some(g) if pass => {
                let c = rpn::encode_residual(&gt_boxes[g], p)?;
                std::array::from_fn(|k| c[k] / std[k])
            }
            _ => [0.0; BOX_CODE],
        });
    }
    Ok(t)
}

/// Refinement losses `(cls, reg, iou)`: BCE over non-ignored boxes (mean),
/// smooth-L1 on residuals and on the IoU estimate, both summed over boxes
/// passing the regression threshold and divided by their count. With no such
/// box the two masked terms are exactly zero.
pub fn refine_loss(cx: &mut Ctx, out: &RoiOutput, t: &RefineTargets) -> Result<(Var, Var, Var)> {
    let n = t.cls.len();
    let mut labels = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for (i, c) in t.cls.iter().enumerate() {
        match c {
            ClsTarget::Foreground => {
                labels[i] = 1.0;
                weights[i] = 1.0;
            }
            ClsTarget::Background => weights[i] = 1.0,
            ClsTarget::Ignore => {}
        }
    }
    let denom = weights.iter().sum::<f64>().max(1.0);
    let p = cx.g.sigmoid(out.cls_logit);
    let cls = cx.g.bce_loss_weighted(p, &labels, &weights, denom)?;
    let rows: Vec<usize> = (0..n).filter(|&i| t.reg_mask[i]).collect();
    if rows.is_empty() {
        let z1 = cx.g.zeros(1, 1);
        let z2 = cx.g.zeros(1, 1);
        return Ok((cls, z1, z2));
    }
    let n_reg = rows.len() as f64;
    let pred = cx.g.gather_rows(out.reg, &rows)?;
    let tgt = Tensor::from_vec(rows.len(), BOX_CODE, rows.iter().flat_map(|&i| t.reg[i]).collect())?;
    let l = cx.g.smooth_l1(pred, &tgt)?;
    let s = cx.g.sum(l);
    let reg = cx.g.scale(s, 1.0 / n_reg);
    let iou_p = cx.g.sigmoid(out.iou_logit);
    let iou_p = cx.g.gather_rows(iou_p, &rows)?;
    let iou_t = Tensor::from_vec(rows.len(), 1, rows.iter().map(|&i| t.iou[i]).collect())?;
    let li = cx.g.smooth_l1(iou_p, &iou_t)?;
    let si = cx.g.sum(li);
    let iou = cx.g.scale(si, 1.0 / n_reg);
    Ok((cls, reg, iou))
}

/// Confidence used to rank a refined box.
pub fn confidence(mode: ConfidenceMode, cls: f64, unaligned: f64, aligned: f64) -> f64 {
    match mode {
        ConfidenceMode::Cls => cls,
        ConfidenceMode::UnalignedIou => unaligned,
        ConfidenceMode::AlignedIou => aligned,
        ConfidenceMode::AlignedIouXCls => aligned * cls,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: Box3D,
    pub class_id: usize,
    pub confidence: f64,
    pub cls_prob: f64,
    pub iou_unaligned: f64,
    pub iou_aligned: f64,
    pub proposal: Box3D,
    pub proposal_score: f64,
}

/// Per-class greedy BEV NMS ranked by `confidence`, best first overall.
pub fn final_nms(dets: Vec<Detection>, iou_thresh: f64, max_keep: usize) -> Vec<Detection> {
    let n_cls = dets.iter().map(|d| d.class_id + 1).max().unwrap_or(0);
    let mut kept = Vec::new();
    for c in 0..n_cls {
        let idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class_id == c).collect();
        let boxes: Vec<Box3D> = idx.iter().map(|&i| dets[i].bbox).collect();
        let scores: Vec<f64> = idx.iter().map(|&i| dets[i].confidence).collect();
        kept.extend(rpn::nms(&boxes, &scores, iou_thresh, max_keep).into_iter().map(|k| idx[k]));
    }
    kept.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    kept.truncate(max_keep);
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

/// Draws the training pool for one scene: proposals split at `theta_reg`,
/// up to `fg_fraction * n` from the upper side, the rest from the lower side,
/// topping up from whichever side has boxes left.
pub fn sample_proposals<R: Rng + ?Sized>(ious: &[f64], theta_reg: f64, n: usize, fg_fraction: f64, rng: &mut R) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut fg: Vec<usize> = (0..ious.len()).filter(|&i| ious[i] >= theta_reg).collect();
    let mut bg: Vec<usize> = (0..ious.len()).filter(|&i| ious[i] < theta_reg).collect();
    fg.shuffle(rng);
    bg.shuffle(rng);
    let want_fg = ((n as f64 * fg_fraction).round() as usize).min(fg.len());
    let want_bg = (n - want_fg).min(bg.len());
    let extra_fg = (n - want_fg - want_bg).min(fg.len() - want_fg);
    let mut out: Vec<usize> = fg[..want_fg + extra_fg].to_vec();
    out.extend_from_slice(&bg[..want_bg]);
    out.sort_unstable();
    out
}
