//! Multi-task loss and the training loop.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{adamw_step, AdamWState, Ctx, ParamGrads, StepOutcome, Var};
use crate::config::{Config, LossConfig, TrainConfig};
use crate::decoder::seg_labels_for;
use crate::error::{Error, Result};
use crate::geom::Box3D;
use crate::model::Detector;
use crate::roi;
use crate::rpn;
use crate::scene::{augment, AugmentKind, Augmentation, GroundTruth, PointCloud};

/// Scalar loss terms of one optimizer step (batch means).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LossReport {
    pub step: usize,
    pub rpn: f64,
    pub seg: f64,
    pub cls: f64,
    pub reg: f64,
    pub iou: f64,
    pub refine: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,rpn,seg,cls,reg,iou,refine,total";

    /// Exact check of the weighting, in the order the graph evaluates it.
    pub fn identity_holds(&self, w: &LossConfig) -> bool {
        self.refine == self.cls + self.reg + self.iou && self.total == w.w_rpn * self.rpn + w.w_seg * self.seg + w.w_refine * self.refine
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{},{},{}", self.step, self.rpn, self.seg, self.cls, self.reg, self.iou, self.refine, self.total)
    }
}

pub fn write_loss_csv(path: &Path, reports: &[LossReport]) -> Result<()> {
    let mut s = String::from(LossReport::CSV_HEADER);
    s.push('\n');
    for r in reports {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Graph handles of the five loss parts.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub rpn: Var,
    pub seg: Var,
    pub cls: Var,
    pub reg: Var,
    pub iou: Var,
}

/// `(refine, total)` with `refine = cls + reg + iou` and
/// `total = w_rpn * rpn + w_seg * seg + w_refine * refine`.
pub fn total_loss(cx: &mut Ctx, p: &LossParts, w: &LossConfig) -> Result<(Var, Var)> {
    let cr = cx.g.add(p.cls, p.reg)?;
    let refine = cx.g.add(cr, p.iou)?;
    let a = cx.g.scale(p.rpn, w.w_rpn);
    let b = cx.g.scale(p.seg, w.w_seg);
    let c = cx.g.scale(refine, w.w_refine);
    let ab = cx.g.add(a, b)?;
    Ok((refine, cx.g.add(ab, c)?))
}

/// Jittered copies of each ground-truth box, added to the refinement pool so
/// positives exist before the RPN has learned anything.
pub fn jitter_boxes<R: Rng + ?Sized>(gt: &[Box3D], t: &TrainConfig, rng: &mut R) -> Vec<(usize, Box3D)> {
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::new();
    for (g, b) in gt.iter().enumerate() {
        for _ in 0..t.gt_jitter_copies {
            let mut j = *b;
            for k in 0..3 {
                j.center[k] += unit.sample(rng) * t.jitter_center * b.size[k];
                j.size[k] *= (unit.sample(rng) * t.jitter_size).exp();
            }
            j.yaw = crate::geom::wrap_angle(j.yaw + unit.sample(rng) * t.jitter_yaw);
            out.push((g, j));
        }
    }
    out
}

/// Loss parts for one scene on `cx`.
pub fn scene_parts<R: Rng + ?Sized>(det: &Detector, cx: &mut Ctx, pc: &PointCloud, gt: &GroundTruth, rng: &mut R) -> Result<LossParts> {
    let cfg = &det.cfg;
    let f = det.forward(cx, pc)?;
    if f.points.is_empty() {
        return Err(Error::Invalid("training scene has no points inside the bounds".into()));
    }
    let targets = rpn::assign_targets(&det.anchors, &gt.boxes, &gt.class_ids, cfg.rpn.pos_iou, cfg.rpn.neg_iou)?;
    let (rc, rr) = rpn::rpn_loss(cx, &f.rpn, &targets, &cfg.rpn)?;
    let rpn = cx.g.add(rc, rr)?;

    let seg = if cfg.train.supervise_seg {
        let labels = seg_labels_for(&f.points, &gt.boxes);
        let n_fg = labels.iter().filter(|&&l| l == 1.0).count();
        let ones = vec![1.0; labels.len()];
        cx.g.focal_loss_weighted(f.decoded.seg_prob, &labels, &ones, n_fg.max(1) as f64, cfg.loss.seg_alpha, cfg.loss.seg_gamma)?
    } else {
        cx.g.zeros(1, 1)
    };

    if !cfg.train.refine {
        let (cls, reg, iou) = (cx.g.zeros(1, 1), cx.g.zeros(1, 1), cx.g.zeros(1, 1));
        return Ok(LossParts { rpn, seg, cls, reg, iou });
    }
    let t = &cfg.train;
    let mut pool: Vec<(usize, Box3D)> = det.proposals(cx, &f).iter().map(|p| (p.class_id, p.bbox)).collect();
    pool.extend(jitter_boxes(&gt.boxes, t, rng).into_iter().map(|(g, b)| (gt.class_ids[g], b)));
    let ious: Vec<f64> = pool.iter().map(|(c, b)| roi::best_match(b, *c, &gt.boxes, &gt.class_ids).0).collect();
    let picked = roi::sample_proposals(&ious, t.theta_reg, t.proposals_per_scene, t.fg_fraction, rng);
    if picked.is_empty() {
        let (cls, reg, iou) = (cx.g.zeros(1, 1), cx.g.zeros(1, 1), cx.g.zeros(1, 1));
        return Ok(LossParts { rpn, seg, cls, reg, iou });
    }
    let boxes: Vec<Box3D> = picked.iter().map(|&i| pool[i].1).collect();
    let classes: Vec<usize> = picked.iter().map(|&i| pool[i].0).collect();
    let rt = roi::refine_targets(&boxes, &classes, &gt.boxes, &gt.class_ids, t.theta_h, t.theta_l, t.theta_reg, &cfg.roi.residual_std)?;
    let (out, _) = det.roi.forward(cx, &f.roi_view(), &boxes, cfg.roi.streams)?;
    let (cls, reg, iou) = roi::refine_loss(cx, &out, &rt)?;
    Ok(LossParts { rpn, seg, cls, reg, iou })
}

fn augmented<R: Rng + ?Sized>(pc: &PointCloud, gt: &GroundTruth, t: &TrainConfig, rng: &mut R) -> Result<(PointCloud, GroundTruth)> {
    let a = &t.augment;
    let mut cur = (pc.clone(), gt.clone());
    for (on, kind) in [(a.flip, AugmentKind::Flip), (a.scale, AugmentKind::Scale), (a.rotate, AugmentKind::Rotate)] {
        if !on {
            continue;
        }
        if let Some(aug) = Augmentation::sample(kind, rng, a.scale_range, a.rotation_range) {
            cur = augment(&cur.0, &cur.1, aug)?;
        }
    }
    Ok(cur)
}

/// One optimizer step's forward/backward over a batch. Returns the report
/// values and the gradients.
pub fn batch_step<R: Rng + ?Sized>(det: &Detector, batch: &[(PointCloud, GroundTruth)], step: usize, rng: &mut R) -> Result<(LossReport, ParamGrads)> {
    let mut cx = Ctx::new(&det.store);
    let mut acc: Option<LossParts> = None;
    for (pc, gt) in batch {
        let p = scene_parts(det, &mut cx, pc, gt, rng)?;
        acc = Some(match acc {
            None => p,
            Some(a) => LossParts {
                rpn: cx.g.add(a.rpn, p.rpn)?,
                seg: cx.g.add(a.seg, p.seg)?,
                cls: cx.g.add(a.cls, p.cls)?,
                reg: cx.g.add(a.reg, p.reg)?,
                iou: cx.g.add(a.iou, p.iou)?,
            },
        });
    }
    let a = acc.ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let inv = 1.0 / batch.len() as f64;
    let parts = LossParts {
        rpn: cx.g.scale(a.rpn, inv),
        seg: cx.g.scale(a.seg, inv),
        cls: cx.g.scale(a.cls, inv),
        reg: cx.g.scale(a.reg, inv),
        iou: cx.g.scale(a.iou, inv),
    };
    let (refine, total) = total_loss(&mut cx, &parts, &det.cfg.loss)?;
    let v = |x: Var| cx.g.value(x).item();
    let report = LossReport {
        step,
        rpn: v(parts.rpn),
        seg: v(parts.seg),
        cls: v(parts.cls),
        reg: v(parts.reg),
        iou: v(parts.iou),
        refine: v(refine),
        total: v(total),
    };
    if !report.total.is_finite() {
        return Err(Error::Diverged { step, value: report.total });
    }
    Ok((report, cx.backward(total)))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub detector: Detector,
    pub reports: Vec<LossReport>,
}

/// Trains from scratch for `cfg.train.steps` steps. Fully determined by the
/// config (including its seed) and the scenes.
pub fn train(cfg: &Config, scenes: &[(PointCloud, GroundTruth)], mut on_step: impl FnMut(&LossReport)) -> Result<TrainOutcome> {
    if scenes.is_empty() {
        return Err(Error::Invalid("training needs at least one scene".into()));
    }
    for (_, gt) in scenes {
        gt.validate()?;
    }
    let t = &cfg.train;
    let mut det = Detector::new(cfg, t.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed ^ 0x5eed_0f_7a1d);
    let mut state = AdamWState::default();
    let mut order: Vec<usize> = Vec::new();
    let mut reports = Vec::with_capacity(t.steps);
    for step in 0..t.steps {
        let mut batch = Vec::with_capacity(t.batch_size);
        for _ in 0..t.batch_size {
            if order.is_empty() {
                order = (0..scenes.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            let i = order.pop().expect("refilled");
            let (pc, gt) = &scenes[i];
            batch.push(augmented(pc, gt, t, &mut rng)?);
        }
        let (report, grads) = batch_step(&det, &batch, step, &mut rng)?;
        if adamw_step(&mut det.store, &grads, &mut state, &t.optimizer) == StepOutcome::SkippedNonFinite {
            return Err(Error::Diverged { step, value: f64::NAN });
        }
        on_step(&report);
        reports.push(report);
    }
    Ok(TrainOutcome { detector: det, reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{ParamStore, Tensor};
    use crate::model::desk_config;
    use crate::scene::{synth_scene, SynthSpec};

    #[test]
    fn weights_arithmetic() {
        let store = ParamStore::new();
        let mut cx = Ctx::new(&store);
        let mut c = |v: f64| cx.g.constant(Tensor::scalar(v));
        let p = LossParts { rpn: c(0.0), seg: c(0.1), cls: c(0.0), reg: c(0.0), iou: c(0.0) };
        let (_, t) = total_loss(&mut cx, &p, &LossConfig::default()).unwrap();
        assert_eq!(cx.g.value(t).item(), 0.4);
        let z = LossParts { seg: p.cls, ..p };
        let (_, t) = total_loss(&mut cx, &z, &LossConfig::default()).unwrap();
        assert_eq!(cx.g.value(t).item(), 0.0);
    }

    #[test]
    fn short_run_reports_hold_identity() {
        let mut cfg = desk_config();
        cfg.train.steps = 2;
        let scenes: Vec<_> = (0..2).map(|s| synth_scene(&SynthSpec { seed: s, ..SynthSpec::default() }).unwrap()).collect();
        let out = train(&cfg, &scenes, |_| {}).unwrap();
        assert_eq!(out.reports.len(), 2);
        for r in &out.reports {
            assert!(r.identity_holds(&cfg.loss), "{r:?}");
            assert!(r.total > 0.0);
        }
    }
}
