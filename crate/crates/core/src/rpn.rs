//! Anchor-based proposal stage on the BEV map.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::graph::sigmoid;
use crate::autodiff::nn::{init_uniform, RELU_GAIN};
use crate::autodiff::{Ctx, Linear, ParamId, ParamStore, Tensor, Var};
use crate::backbone::{dense2d_rulebook, BevMap};
use crate::config::{ClassConfig, RpnConfig};
use crate::error::{Error, Result};
use crate::geom::{self, wrap_angle, Box3D};
use crate::voxel::VoxelGridSpec;

pub const BOX_CODE: usize = 8;

/// Anchors ordered cell-major: index `((ix * ny + iy) * n_cls + c) * 2 + r`
/// with yaw `r * pi/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    pub nx: usize,
    pub ny: usize,
    pub num_classes: usize,
    pub boxes: Vec<Box3D>,
    pub class_ids: Vec<usize>,
}

impl AnchorGrid {
    pub fn new(spec: &VoxelGridSpec, stride: u32, classes: &[ClassConfig]) -> Self {
        let dims = spec.dims_at(stride);
        let (nx, ny) = (dims[0] as usize, dims[1] as usize);
        let cell = [spec.step[0] * stride as f64, spec.step[1] * stride as f64];
        let mut boxes = Vec::with_capacity(nx * ny * classes.len() * 2);
        let mut class_ids = Vec::with_capacity(boxes.capacity());
        for ix in 0..nx {
            for iy in 0..ny {
                let cx = (ix as f64 + 0.5) * cell[0] + spec.bounds.min[0];
                let cy = (iy as f64 + 0.5) * cell[1] + spec.bounds.min[1];
                for (c, cls) in classes.iter().enumerate() {
                    for r in 0..2 {
                        let cz = cls.anchor_bottom_z + cls.anchor_size[2] / 2.0;
                        boxes.push(Box3D::new([cx, cy, cz], cls.anchor_size, r as f64 * std::f64::consts::FRAC_PI_2));
                        class_ids.push(c);
                    }
                }
            }
        }
        AnchorGrid { nx, ny, num_classes: classes.len(), boxes, class_ids }
    }

    pub fn per_cell(&self) -> usize {
        2 * self.num_classes
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

fn check_sizes(b: &Box3D) -> Result<()> {
    if b.size.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Invalid(format!("box sizes must be positive: {:?}", b.size)));
    }
    Ok(())
}

/// Residual of `gt` against `anchor`; the angle is coded as the absolute
/// `(sin, cos)` of the target yaw.
pub fn encode_box(gt: &Box3D, anchor: &Box3D) -> Result<[f64; BOX_CODE]> {
    check_sizes(gt)?;
    check_sizes(anchor)?;
    let [la, wa, ha] = anchor.size;
    let diag = la.hypot(wa);
    Ok([
        (gt.center[0] - anchor.center[0]) / diag,
        (gt.center[1] - anchor.center[1]) / diag,
        (gt.center[2] - anchor.center[2]) / ha,
        (gt.size[0] / la).ln(),
        (gt.size[1] / wa).ln(),
        (gt.size[2] / ha).ln(),
        gt.yaw.sin(),
        gt.yaw.cos(),
    ])
}

pub fn decode_box(delta: &[f64], anchor: &Box3D) -> Box3D {
    let [la, wa, ha] = anchor.size;
    let diag = la.hypot(wa);
    Box3D::new(
        [anchor.center[0] + delta[0] * diag, anchor.center[1] + delta[1] * diag, anchor.center[2] + delta[2] * ha],
        [la * delta[3].exp(), wa * delta[4].exp(), ha * delta[5].exp()],
        wrap_angle(delta[6].atan2(delta[7])),
    )
}

/// Same residual family anchored on a proposal, with the angle coded relative
/// to the proposal as `(sin d, cos d - 1)` so the all-zero code is the identity.
pub fn encode_residual(gt: &Box3D, proposal: &Box3D) -> Result<[f64; BOX_CODE]> {
    let mut c = encode_box(gt, proposal)?;
    let d = gt.yaw - proposal.yaw;
    c[6] = d.sin();
    c[7] = d.cos() - 1.0;
    Ok(c)
}

pub fn decode_residual(delta: &[f64], proposal: &Box3D) -> Box3D {
    let mut b = decode_box(delta, proposal);
    b.yaw = wrap_angle(proposal.yaw + delta[6].atan2(delta[7] + 1.0));
    b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTargets {
    pub labels: Vec<AnchorLabel>,
    /// Matched ground-truth index for positives.
    pub matched: Vec<Option<usize>>,
    pub reg: Vec<[f64; BOX_CODE]>,
}

impl AnchorTargets {
    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l == AnchorLabel::Positive).count()
    }
}

/// BEV-IoU assignment per class: positive at `>= pos_iou` or when an anchor
/// attains a box's best (non-zero) overlap, negative below `neg_iou`.
pub fn assign_targets(
    anchors: &AnchorGrid,
    gt_boxes: &[Box3D],
    gt_classes: &[usize],
    pos_iou: f64,
    neg_iou: f64,
) -> Result<AnchorTargets> {
    let n = anchors.len();
    let mut best = vec![0.0f64; n];
    let mut best_gt: Vec<Option<usize>> = vec![None; n];
    let mut gt_best = vec![0.0f64; gt_boxes.len()];
    let mut ious: Vec<Vec<(usize, f64)>> = vec![Vec::new(); gt_boxes.len()];
    for (g, gb) in gt_boxes.iter().enumerate() {
        let r = 0.5 * gb.size[0].hypot(gb.size[1]);
        for a in 0..n {
            if anchors.class_ids[a] != gt_classes[g] {
                continue;
            }
            let ab = &anchors.boxes[a];
            let ra = 0.5 * ab.size[0].hypot(ab.size[1]);
            let (dx, dy) = (ab.center[0] - gb.center[0], ab.center[1] - gb.center[1]);
            if dx * dx + dy * dy >= (r + ra) * (r + ra) {
                continue;
            }
            let iou = geom::iou_bev(ab, gb);
            if iou <= 0.0 {
                continue;
            }
            ious[g].push((a, iou));
            if iou > best[a] {
                best[a] = iou;
                best_gt[a] = Some(g);
            }
            if iou > gt_best[g] {
                gt_best[g] = iou;
            }
        }
    }
    let mut labels: Vec<AnchorLabel> = best
        .iter()
        .map(|&b| if b >= pos_iou { AnchorLabel::Positive } else if b < neg_iou { AnchorLabel::Negative } else { AnchorLabel::Ignore })
        .collect();
    let mut matched: Vec<Option<usize>> = (0..n).map(|a| if labels[a] == AnchorLabel::Positive { best_gt[a] } else { None }).collect();
    for (g, list) in ious.iter().enumerate() {
        for &(a, iou) in list {
            if gt_best[g] > 0.0 && iou == gt_best[g] && labels[a] != AnchorLabel::Positive {
                labels[a] = AnchorLabel::Positive;
                matched[a] = Some(g);
            }
        }
    }
    let mut reg = vec![[0.0; BOX_CODE]; n];
    for a in 0..n {
        if let Some(g) = matched[a] {
            reg[a] = encode_box(&gt_boxes[g], &anchors.boxes[a])?;
        }
    }
    Ok(AnchorTargets { labels, matched, reg })
}

/// Greedy BEV NMS. Candidates are visited by descending score, ties by index.
/// Returns kept indices in visiting order.
pub fn nms(boxes: &[Box3D], scores: &[f64], iou_thresh: f64, max_keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.len() >= max_keep {
            break;
        }
        if keep.iter().all(|&k| geom::iou_bev(&boxes[k], &boxes[i]) <= iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub bbox: Box3D,
    pub score: f64,
    pub class_id: usize,
    pub anchor: usize,
}

pub fn dump_proposals(props: &[Proposal]) -> String {
    let mut s = String::new();
    for p in props {
        let b = &p.bbox;
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {} {}",
            p.score, b.center[0], b.center[1], b.center[2], b.size[0], b.size[1], b.size[2], b.yaw
        );
    }
    s
}

/// Heads: shared 3x3 conv (bias, ReLU) then 1x1 classification and regression.
#[derive(Debug, Clone)]
pub struct RpnHead {
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub cls: Linear,
    pub reg: Linear,
    pub per_cell: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct RpnOutput {
    /// `(cells * A) x 1` logits in anchor order.
    pub cls_logits: Var,
    /// `(cells * A) x 8` residuals.
    pub reg: Var,
}

impl RpnHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: &RpnConfig,
        bev_channels: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let fan_in = 9 * bev_channels;
        let conv_w = store.insert("rpn.conv.w", init_uniform(rng, fan_in, cfg.head_channels, fan_in, RELU_GAIN))?;
        let conv_b = store.insert("rpn.conv.b", Tensor::zeros(1, cfg.head_channels))?;
        let per_cell = 2 * num_classes;
        let cls = Linear::new(store, rng, "rpn.cls", cfg.head_channels, per_cell, true, 1.0)?;
        let prior = -((1.0 - cfg.prior_prob) / cfg.prior_prob).ln();
        *store.get_mut(cls.b.expect("bias")) = Tensor::filled(1, per_cell, prior);
        let reg = Linear::new(store, rng, "rpn.reg", cfg.head_channels, per_cell * BOX_CODE, true, 1.0)?;
        Ok(RpnHead { conv_w, conv_b, cls, reg, per_cell })
    }

    pub fn forward(&self, cx: &mut Ctx, bev: &BevMap) -> Result<RpnOutput> {
        let cells = bev.nx * bev.ny;
        let w = cx.param(self.conv_w);
        let b = cx.param(self.conv_b);
        let h = cx.g.conv(bev.feats, w, Arc::new(dense2d_rulebook(bev.nx, bev.ny)))?;
        let h = cx.g.add_bias(h, b)?;
        let h = cx.g.relu(h);
        let cls = self.cls.forward(cx, h)?;
        let cls = cx.g.reshape(cls, cells * self.per_cell, 1)?;
        let reg = self.reg.forward(cx, h)?;
        let reg = cx.g.reshape(reg, cells * self.per_cell, BOX_CODE)?;
        Ok(RpnOutput { cls_logits: cls, reg })
    }
}

/// Classification focal loss over non-ignored anchors plus smooth-L1 on
/// positives, both normalized by the positive count (at least 1). Returns
/// `(cls_loss, reg_loss)` with `reg_weight` already applied.
pub fn rpn_loss(cx: &mut Ctx, out: &RpnOutput, targets: &AnchorTargets, cfg: &RpnConfig) -> Result<(Var, Var)> {
    let n = targets.labels.len();
    let denom = targets.num_positive().max(1) as f64;
    let mut labels = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let mut pos = Vec::new();
    for (a, l) in targets.labels.iter().enumerate() {
        match l {
            AnchorLabel::Positive => {
                labels[a] = 1.0;
                weights[a] = 1.0;
                pos.push(a);
            }
            AnchorLabel::Negative => weights[a] = 1.0,
            AnchorLabel::Ignore => {}
        }
    }
    let p = cx.g.sigmoid(out.cls_logits);
    let cls = cx.g.focal_loss_weighted(p, &labels, &weights, denom, cfg.focal_alpha, cfg.focal_gamma)?;
    let reg = if pos.is_empty() {
        cx.g.zeros(1, 1)
    } else {
        let pred = cx.g.gather_rows(out.reg, &pos)?;
        let tgt = Tensor::from_vec(pos.len(), BOX_CODE, pos.iter().flat_map(|&a| targets.reg[a]).collect())?;
        let l = cx.g.smooth_l1(pred, &tgt)?;
        let s = cx.g.sum(l);
        cx.g.scale(s, cfg.reg_weight / denom)
    };
    Ok((cls, reg))
}

/// Decodes the top-scoring anchors and keeps the NMS survivors.
pub fn propose(logits: &Tensor, reg: &Tensor, anchors: &AnchorGrid, cfg: &RpnConfig) -> Vec<Proposal> {
    let scores: Vec<f64> = logits.data().iter().map(|&z| sigmoid(z)).collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(cfg.pre_nms_top_n);
    let boxes: Vec<Box3D> = order.iter().map(|&a| decode_box(reg.row(a), &anchors.boxes[a])).collect();
    let top_scores: Vec<f64> = order.iter().map(|&a| scores[a]).collect();
    nms(&boxes, &top_scores, cfg.nms_iou, cfg.post_nms_top_n)
        .into_iter()
        .map(|k| Proposal { bbox: boxes[k], score: top_scores[k], class_id: anchors.class_ids[order[k]], anchor: order[k] })
        .collect()
}
