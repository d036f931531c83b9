//! AP at fixed recall positions, IoU-estimate correlations and the
//! proposal-vs-refined IoU shift.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::geom::{self, Box3D};
use crate::kitti::{self, Calib};

/// A scored box in frame `frame`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalDet {
    pub frame: usize,
    pub bbox: Box3D,
    pub score: f64,
}

fn box_key(b: &Box3D) -> [f64; 7] {
    [b.center[0], b.center[1], b.center[2], b.size[0], b.size[1], b.size[2], b.yaw]
}

/// Detections best first; ties fall back to frame and box fields so the
/// result does not depend on input order.
fn ranked(dets: &[EvalDet]) -> Vec<EvalDet> {
    let mut d = dets.to_vec();
    d.sort_by(|a, b| {
        b.score.total_cmp(&a.score).then(a.frame.cmp(&b.frame)).then_with(|| {
            box_key(&a.bbox).iter().zip(box_key(&b.bbox).iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    d
}

/// True-positive flags in rank order. Each detection takes the unmatched
/// ground truth it overlaps most; it is a hit when that overlap reaches
/// `thresh`.
pub fn match_detections(dets: &[EvalDet], gts: &[Vec<Box3D>], thresh: f64, iou: fn(&Box3D, &Box3D) -> f64) -> Vec<bool> {
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    ranked(dets)
        .iter()
        .map(|d| {
            let Some(frame) = gts.get(d.frame) else { return false };
            let mut best: Option<(usize, f64)> = None;
            for (g, gb) in frame.iter().enumerate() {
                if used[d.frame][g] {
                    continue;
                }
                let v = iou(&d.bbox, gb);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, v)) if v >= thresh => {
                    used[d.frame][g] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Mean interpolated precision at recalls `1/n, 2/n, ..., 1`. Zero when
/// there is no ground truth.
pub fn ap_from_hits(hits: &[bool], n_gt: usize, n: usize) -> f64 {
    if n_gt == 0 || n == 0 {
        return 0.0;
    }
    let mut pr = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        pr.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    // running max of precision from the tail
    let mut best = vec![0.0f64; pr.len() + 1];
    for k in (0..pr.len()).rev() {
        best[k] = best[k + 1].max(pr[k].1);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for i in 1..=n {
        let r = i as f64 / n as f64;
        while k < pr.len() && pr[k].0 < r - 1e-12 {
            k += 1;
        }
        sum += best[k];
    }
    sum / n as f64
}

pub fn average_precision(dets: &[EvalDet], gts: &[Vec<Box3D>], thresh: f64, n: usize, iou: fn(&Box3D, &Box3D) -> f64) -> f64 {
    let hits = match_detections(dets, gts, thresh, iou);
    ap_from_hits(&hits, gts.iter().map(Vec::len).sum(), n)
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Invalid(format!("correlation inputs differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Invalid("correlation needs at least two pairs".into()));
    }
    Ok(())
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Undefined("zero variance"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks, ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    pearson(&average_ranks(a), &average_ranks(b))
}

/// `(PLCC, SRCC)`.
pub fn correlation(estimates: &[f64], actuals: &[f64]) -> Result<(f64, f64)> {
    Ok((pearson(estimates, actuals)?, spearman(estimates, actuals)?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IouShift {
    /// Counts over `[0, 1]` in equal bins.
    pub before: Vec<usize>,
    pub after: Vec<usize>,
    pub mean_before: f64,
    pub mean_after: f64,
    pub mean_shift: f64,
}

fn histogram(v: &[f64], bins: usize) -> Vec<usize> {
    let mut h = vec![0; bins];
    for &x in v {
        let b = ((x.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        h[b] += 1;
    }
    h
}

/// Distributions of actual IoU for paired boxes before and after refinement.
pub fn iou_shift(before: &[f64], after: &[f64], bins: usize) -> Result<IouShift> {
    if before.len() != after.len() {
        return Err(Error::Invalid("iou_shift needs matched pairs".into()));
    }
    if bins == 0 {
        return Err(Error::Invalid("iou_shift needs at least one bin".into()));
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let shift: Vec<f64> = before.iter().zip(after).map(|(b, a)| a - b).collect();
    Ok(IouShift {
        before: histogram(before, bins),
        after: histogram(after, bins),
        mean_before: mean(before),
        mean_after: mean(after),
        mean_shift: mean(&shift),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassReport {
    pub name: String,
    pub iou_thresh: f64,
    pub num_gt: usize,
    pub num_det: usize,
    pub ap_3d: f64,
    pub ap_bev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct EvalReport {
    pub frames: usize,
    pub recall_positions: usize,
    pub classes: Vec<ClassReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plcc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub srcc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plcc_unaligned: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub srcc_unaligned: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou_shift: Option<IouShift>,
    /// Proposal/refined pairs behind the three diagnostics above.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostic_pairs: Option<usize>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Per-frame boxes with class ids (and scores for detections).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Frame {
    pub boxes: Vec<(usize, Box3D, Option<f64>)>,
}

/// AP per class over paired frames.
pub fn evaluate(dets: &[Frame], gts: &[Frame], cfg: &Config) -> Result<EvalReport> {
    if dets.len() != gts.len() {
        return Err(Error::Invalid(format!("{} detection frames vs {} ground-truth frames", dets.len(), gts.len())));
    }
    let n = cfg.eval.recall_positions;
    let mut classes = Vec::new();
    for (c, cc) in cfg.classes.iter().enumerate() {
        let g: Vec<Vec<Box3D>> = gts.iter().map(|f| f.boxes.iter().filter(|b| b.0 == c).map(|b| b.1).collect()).collect();
        let mut d = Vec::new();
        for (fi, f) in dets.iter().enumerate() {
            for b in f.boxes.iter().filter(|b| b.0 == c) {
                let score = b.2.ok_or_else(|| Error::Invalid(format!("detection in frame {fi} has no score")))?;
                d.push(EvalDet { frame: fi, bbox: b.1, score });
            }
        }
        classes.push(ClassReport {
            name: cc.name.clone(),
            iou_thresh: cc.eval_iou,
            num_gt: g.iter().map(Vec::len).sum(),
            num_det: d.len(),
            ap_3d: average_precision(&d, &g, cc.eval_iou, n, geom::iou_3d),
            ap_bev: average_precision(&d, &g, cc.eval_iou, n, geom::iou_bev),
        });
    }
    Ok(EvalReport { frames: gts.len(), recall_positions: n, classes, ..Default::default() })
}

/// One refined proposal with both IoU estimates, LiDAR frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineRecord {
    pub class_id: usize,
    pub proposal: Box3D,
    pub refined: Box3D,
    pub iou_unaligned: f64,
    pub iou_aligned: f64,
}

fn push_box(out: &mut String, b: &Box3D) {
    for v in b.center.iter().chain(&b.size).chain([&b.yaw]) {
        out.push_str(&format!(" {v}"));
    }
}

/// Line format: `class  x y z l w h yaw (proposal)  x y z l w h yaw (refined)
/// iou_unaligned iou_aligned`, shortest round-trip floats.
pub fn format_refine_records(recs: &[RefineRecord]) -> String {
    let mut s = String::new();
    for r in recs {
        s.push_str(&r.class_id.to_string());
        push_box(&mut s, &r.proposal);
        push_box(&mut s, &r.refined);
        s.push_str(&format!(" {} {}\n", r.iou_unaligned, r.iou_aligned));
    }
    s
}

pub fn parse_refine_records(text: &str) -> Result<Vec<RefineRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |msg: String| Error::Parse { line: i + 1, msg };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 17 {
            return Err(bad(format!("expected 17 fields, found {}", f.len())));
        }
        let class_id = f[0].parse().map_err(|e| bad(format!("class id: {e}")))?;
        let v = f[1..].iter().map(|x| x.parse::<f64>().map_err(|e| bad(format!("{x:?}: {e}")))).collect::<Result<Vec<_>>>()?;
        let b = |o: usize| Box3D::new([v[o], v[o + 1], v[o + 2]], [v[o + 3], v[o + 4], v[o + 5]], v[o + 6]);
        let (proposal, refined) = (b(0), b(7));
        for bx in [&proposal, &refined] {
            bx.validate().map_err(|e| bad(e.to_string()))?;
        }
        out.push(RefineRecord { class_id, proposal, refined, iou_unaligned: v[14], iou_aligned: v[15] });
    }
    Ok(out)
}

/// IoU-shift histogram and estimate/actual correlations over every record
/// whose proposal overlaps a same-class ground-truth box.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineDiagnostics {
    pub pairs: usize,
    pub shift: IouShift,
    /// `(PLCC, SRCC)` of aligned and first-pass estimates against the refined
    /// box's actual IoU; `None` below two pairs or at zero variance.
    pub aligned: Option<(f64, f64)>,
    pub unaligned: Option<(f64, f64)>,
}

fn best_iou(b: &Box3D, class_id: usize, gt: &Frame) -> f64 {
    gt.boxes.iter().filter(|g| g.0 == class_id).map(|g| geom::iou_3d(b, &g.1)).fold(0.0, f64::max)
}

pub fn refine_diagnostics(records: &[Vec<RefineRecord>], gts: &[Frame], bins: usize) -> Result<RefineDiagnostics> {
    if records.len() != gts.len() {
        return Err(Error::Invalid(format!("{} record frames vs {} ground-truth frames", records.len(), gts.len())));
    }
    let (mut before, mut after, mut est_u, mut est_a) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (recs, gt) in records.iter().zip(gts) {
        for r in recs {
            let b = best_iou(&r.proposal, r.class_id, gt);
            if b > 0.0 {
                before.push(b);
                after.push(best_iou(&r.refined, r.class_id, gt));
                est_u.push(r.iou_unaligned);
                est_a.push(r.iou_aligned);
            }
        }
    }
    Ok(RefineDiagnostics {
        pairs: before.len(),
        shift: iou_shift(&before, &after, bins)?,
        aligned: correlation(&est_a, &after).ok(),
        unaligned: correlation(&est_u, &after).ok(),
    })
}

fn label_dir(dir: &Path) -> PathBuf {
    let sub = dir.join("label_2");
    if sub.is_dir() {
        sub
    } else {
        dir.to_path_buf()
    }
}

/// Sorted `*.txt` stems in `dir`.
pub fn frame_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "txt") {
            if let Some(s) = p.file_stem().and_then(|s| s.to_str()) {
                ids.push(s.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Calibration for a frame: `root/calib/<id>.txt` when present, else the
/// default axis permutation.
pub fn frame_calib(root: &Path, id: &str) -> Result<Calib> {
    let p = root.join("calib").join(format!("{id}.txt"));
    if p.is_file() {
        Calib::load(&p)
    } else {
        Ok(Calib::default())
    }
}

/// Reads ground truth from `gt_dir` (or its `label_2/`) and detections from
/// same-named files in `det_dir` (missing file = no detections). When
/// `det_dir/refine/` exists its records feed the IoU diagnostics.
pub fn evaluate_dirs(det_dir: &Path, gt_dir: &Path, cfg: &Config) -> Result<EvalReport> {
    let labels = label_dir(gt_dir);
    let det_labels = label_dir(det_dir);
    let names = cfg.class_names();
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    let refine_dir = det_dir.join("refine");
    let mut records = Vec::new();
    for id in frame_ids(&labels)? {
        let calib = frame_calib(gt_dir, &id)?;
        let g = kitti::read_objects(&labels.join(format!("{id}.txt")))?;
        gts.push(Frame { boxes: kitti::objects_to_boxes(&g, &names, &calib) });
        let dp = det_labels.join(format!("{id}.txt"));
        let d = if dp.is_file() { kitti::read_objects(&dp)? } else { Vec::new() };
        dets.push(Frame { boxes: kitti::objects_to_boxes(&d, &names, &calib) });
        if refine_dir.is_dir() {
            let rp = refine_dir.join(format!("{id}.txt"));
            let text = if rp.is_file() { std::fs::read_to_string(&rp).map_err(|e| Error::io(&rp, e))? } else { String::new() };
            records.push(parse_refine_records(&text)?);
        }
    }
    let mut report = evaluate(&dets, &gts, cfg)?;
    if refine_dir.is_dir() {
        let d = refine_diagnostics(&records, &gts, cfg.eval.iou_shift_bins)?;
        report.diagnostic_pairs = Some(d.pairs);
        report.iou_shift = Some(d.shift);
        (report.plcc, report.srcc) = (d.aligned.map(|c| c.0), d.aligned.map(|c| c.1));
        (report.plcc_unaligned, report.srcc_unaligned) = (d.unaligned.map(|c| c.0), d.unaligned.map(|c| c.1));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn bx(x: f64) -> Box3D {
        Box3D::new([x, 0.0, 0.0], [4.0, 2.0, 1.5], 0.0)
    }

    #[test]
    fn perfect_and_empty() {
        let gts = vec![vec![bx(0.0), bx(10.0)]];
        let dets: Vec<EvalDet> = gts[0].iter().map(|&b| EvalDet { frame: 0, bbox: b, score: 0.3 }).collect();
        assert_eq!(average_precision(&dets, &gts, 0.7, 40, geom::iou_3d), 1.0);
        assert_eq!(average_precision(&[], &gts, 0.7, 40, geom::iou_3d), 0.0);
    }

    #[test]
    fn hand_case() {
        // ranks: TP, FP, TP over 2 gt -> precision 1 up to recall .5, then 2/3
        let hits = [true, false, true];
        let ap = ap_from_hits(&hits, 2, 40);
        assert_abs_diff_eq!(ap, (20.0 * 1.0 + 20.0 * (2.0 / 3.0)) / 40.0, epsilon = 1e-15);
    }

    #[test]
    fn correlations() {
        let a = [0.1, 0.4, 0.2, 0.9, 0.5];
        let (p, s) = correlation(&a, &a).unwrap();
        assert_abs_diff_eq!(p, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-15);
        let rev: Vec<f64> = a.iter().map(|x| -x).collect();
        assert_abs_diff_eq!(spearman(&a, &rev).unwrap(), -1.0, epsilon = 1e-15);
        // ranks a: 1 3 2 5 4; b: 2 1 3 5 4 -> d^2 sum = 1+4+1+0+0 = 6
        let b = [0.3, 0.2, 0.35, 0.8, 0.6];
        assert_abs_diff_eq!(spearman(&a, &b).unwrap(), 1.0 - 6.0 * 6.0 / (5.0 * 24.0), epsilon = 1e-12);
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 3.0]), vec![1.0, 2.5, 2.5, 4.0]);
        assert!(matches!(pearson(&[1.0, 1.0], &[0.0, 1.0]), Err(Error::Undefined(_))));
    }

    #[test]
    fn shift_basics() {
        let s = iou_shift(&[0.2, 0.5, 0.95], &[0.2, 0.5, 0.95], 10).unwrap();
        assert_eq!(s.mean_shift, 0.0);
        assert_eq!(s.before.iter().sum::<usize>(), 3);
        assert_eq!(s.before[9], 1);
    }

    #[test]
    fn refine_records_round_trip_and_score() {
        let recs = vec![
            RefineRecord { class_id: 0, proposal: bx(1.0), refined: bx(0.1), iou_unaligned: 0.3, iou_aligned: 0.9 },
            RefineRecord { class_id: 0, proposal: bx(2.0), refined: bx(1.5), iou_unaligned: 0.7, iou_aligned: 0.4 },
            RefineRecord { class_id: 0, proposal: bx(0.5), refined: bx(0.0), iou_unaligned: 0.1, iou_aligned: 0.95 },
            RefineRecord { class_id: 0, proposal: bx(40.0), refined: bx(40.0), iou_unaligned: 0.5, iou_aligned: 0.5 },
        ];
        let back = parse_refine_records(&format_refine_records(&recs)).unwrap();
        assert_eq!(back, recs);
        let gt = Frame { boxes: vec![(0, bx(0.0), None)] };
        let d = refine_diagnostics(&[recs], &[gt], 10).unwrap();
        // The far proposal touches nothing and is left out.
        assert_eq!(d.pairs, 3);
        assert!(d.shift.mean_after > d.shift.mean_before);
        assert_abs_diff_eq!(d.aligned.unwrap().1, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.unaligned.unwrap().1, -1.0, epsilon = 1e-12);
        assert!(parse_refine_records("0 1 2").is_err());
    }
}
