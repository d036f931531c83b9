//! Every tunable constant, loadable from TOML. Defaults are the KITTI setup;
//! `configs/desk.toml` holds the small synthetic variant.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::AdamWConfig;
use crate::error::{Error, Result};
use crate::geom::Xyz;
use crate::scene::{SceneBounds, ROTATION_RANGE, SCALE_RANGE};
use crate::voxel::VoxelGridSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub scene: SceneConfig,
    pub classes: Vec<ClassConfig>,
    pub backbone: BackboneConfig,
    pub rpn: RpnConfig,
    pub decoder: DecoderConfig,
    pub roi: RoiConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub bounds: SceneBounds,
    pub voxel_size: Xyz,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassConfig {
    pub name: String,
    /// Anchor `l w h`.
    pub anchor_size: Xyz,
    pub anchor_bottom_z: f64,
    /// 3D IoU needed for a true positive.
    pub eval_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Feature widths at strides 1, 2, 4, 8.
    pub widths: [usize; 4],
    pub bev_channels: usize,
    /// Rescale mean voxel coordinates to [0, 1] over the scene bounds.
    pub normalize_input: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RpnConfig {
    pub head_channels: usize,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub pre_nms_top_n: usize,
    pub nms_iou: f64,
    pub post_nms_top_n: usize,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub reg_weight: f64,
    /// Initial foreground probability encoded in the classification bias.
    pub prior_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Widths of P(4)..P(1).
    pub widths: [usize; 4],
    /// Width of P(0).
    pub embed_width: usize,
    pub knn_k: usize,
    /// Hidden widths of the segmentation head (output width 1 is implied).
    pub seg_hidden: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSwitches {
    pub point: bool,
    pub map: bool,
    pub corner: bool,
}

impl Default for StreamSwitches {
    fn default() -> Self {
        StreamSwitches { point: true, map: true, corner: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoiConfig {
    pub grid_size: usize,
    pub radii: Vec<f64>,
    /// Neighbors kept per grid point and radius.
    pub neighbors: usize,
    /// Box expansion per side before cropping.
    pub margin: f64,
    /// Depth feature is `|p| / depth_normalizer - 0.5`.
    pub depth_normalizer: f64,
    /// Corner coordinates are multiplied by this before embedding.
    pub corner_scale: f64,
    /// Hidden/out widths of MLP1 (input is 5).
    pub mlp1: Vec<usize>,
    /// Hidden/out widths of MLP2 (input is mlp1 out + P(0) width).
    pub mlp2: Vec<usize>,
    /// Hidden widths of MLP3; the output is `c_h / radii.len()`.
    pub mlp3: Vec<usize>,
    pub c_h: usize,
    pub c_m: usize,
    pub c_b: usize,
    pub c_b_prime: usize,
    pub fc_fused: Vec<usize>,
    pub fc_final: Vec<usize>,
    pub branch_hidden: Vec<usize>,
    /// Refinement residual targets are divided by these per component.
    pub residual_std: [f64; 8],
    pub streams: StreamSwitches,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub w_rpn: f64,
    pub w_seg: f64,
    pub w_refine: f64,
    pub seg_alpha: f64,
    pub seg_gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip: bool,
    pub scale: bool,
    pub rotate: bool,
    pub scale_range: (f64, f64),
    pub rotation_range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub proposals_per_scene: usize,
    pub theta_h: f64,
    pub theta_l: f64,
    pub theta_reg: f64,
    pub fg_fraction: f64,
    /// Jittered ground-truth copies added to the proposal pool per box.
    pub gt_jitter_copies: usize,
    /// Center jitter std as a fraction of box size; size jitter as a log-scale std.
    pub jitter_center: f64,
    pub jitter_size: f64,
    pub jitter_yaw: f64,
    pub refine: bool,
    pub supervise_seg: bool,
    pub augment: AugmentConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ConfidenceMode {
    Cls,
    UnalignedIou,
    AlignedIou,
    #[default]
    AlignedIouXCls,
}

impl std::str::FromStr for ConfidenceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(ConfidenceMode::Cls),
            "unaligned-iou" => Ok(ConfidenceMode::UnalignedIou),
            "aligned-iou" => Ok(ConfidenceMode::AlignedIou),
            "aligned-iou-x-cls" => Ok(ConfidenceMode::AlignedIouXCls),
            other => Err(Error::Config(format!("unknown confidence mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub final_nms_iou: f64,
    pub max_detections: usize,
    pub confidence: ConfidenceMode,
    pub score_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub recall_positions: usize,
    pub iou_shift_bins: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            scene: SceneConfig::default(),
            classes: vec![
                ClassConfig { name: "Car".into(), anchor_size: [3.9, 1.6, 1.56], anchor_bottom_z: -1.78, eval_iou: 0.7 },
                ClassConfig {
                    name: "Pedestrian".into(),
                    anchor_size: [0.8, 0.6, 1.73],
                    anchor_bottom_z: -0.6,
                    eval_iou: 0.5,
                },
                ClassConfig { name: "Cyclist".into(), anchor_size: [1.76, 0.6, 1.73], anchor_bottom_z: -0.6, eval_iou: 0.5 },
            ],
            backbone: BackboneConfig::default(),
            rpn: RpnConfig::default(),
            decoder: DecoderConfig::default(),
            roi: RoiConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig { bounds: SceneBounds::KITTI, voxel_size: [0.05, 0.05, 0.1] }
    }
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { widths: [16, 32, 64, 128], bev_channels: 256, normalize_input: true }
    }
}

impl Default for RpnConfig {
    fn default() -> Self {
        RpnConfig {
            head_channels: 256,
            pos_iou: 0.6,
            neg_iou: 0.45,
            pre_nms_top_n: 9000,
            nms_iou: 0.85,
            post_nms_top_n: 100,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            reg_weight: 2.0,
            prior_prob: 0.01,
        }
    }
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { widths: [256, 192, 160, 128], embed_width: 128, knn_k: 3, seg_hidden: vec![64] }
    }
}

impl Default for RoiConfig {
    fn default() -> Self {
        RoiConfig {
            grid_size: 6,
            radii: vec![0.8, 1.6],
            neighbors: 16,
            margin: 1.6,
            depth_normalizer: 70.0,
            corner_scale: 1.0,
            mlp1: vec![32],
            mlp2: vec![64],
            mlp3: vec![64],
            c_h: 128,
            c_m: 128,
            c_b: 128,
            c_b_prime: 32,
            fc_fused: vec![256, 256],
            fc_final: vec![256],
            branch_hidden: vec![256],
            residual_std: [0.1, 0.1, 0.1, 0.2, 0.2, 0.2, 0.1, 0.1],
            streams: StreamSwitches::default(),
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { w_rpn: 1.0, w_seg: 4.0, w_refine: 1.0, seg_alpha: 0.25, seg_gamma: 2.0 }
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { flip: true, scale: true, rotate: true, scale_range: SCALE_RANGE, rotation_range: ROTATION_RANGE }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            batch_size: 2,
            seed: 0,
            optimizer: AdamWConfig::default(),
            proposals_per_scene: 128,
            theta_h: 0.75,
            theta_l: 0.25,
            theta_reg: 0.55,
            fg_fraction: 0.5,
            gt_jitter_copies: 8,
            jitter_center: 0.1,
            jitter_size: 0.1,
            jitter_yaw: 0.15,
            refine: true,
            supervise_seg: true,
            augment: AugmentConfig::default(),
        }
    }
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig { final_nms_iou: 0.1, max_detections: 100, confidence: ConfidenceMode::default(), score_threshold: 0.0 }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { recall_positions: 40, iou_shift_bins: 10 }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Config> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::from_toml(&text)
    }

    pub fn grid(&self) -> Result<VoxelGridSpec> {
        VoxelGridSpec::new(self.scene.voxel_size, self.scene.bounds)
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        self.grid()?;
        if self.classes.is_empty() {
            return bad("at least one class is required");
        }
        for c in &self.classes {
            if c.anchor_size.iter().any(|&s| !(s > 0.0)) {
                return bad("anchor sizes must be positive");
            }
            if !(0.0..=1.0).contains(&c.eval_iou) {
                return bad("eval_iou must lie in [0, 1]");
            }
        }
        if self.backbone.widths.contains(&0) || self.backbone.bev_channels == 0 || self.rpn.head_channels == 0 {
            return bad("backbone and head widths must be positive");
        }
        if !(self.rpn.neg_iou <= self.rpn.pos_iou) || !(0.0..1.0).contains(&self.rpn.prior_prob) || self.rpn.prior_prob == 0.0 {
            return bad("rpn thresholds or prior invalid");
        }
        if self.decoder.widths.contains(&0) || self.decoder.embed_width == 0 || self.decoder.knn_k == 0 {
            return bad("decoder widths and k must be positive");
        }
        let r = &self.roi;
        if r.grid_size == 0 || r.radii.is_empty() || r.neighbors == 0 || r.radii.iter().any(|&x| !(x > 0.0)) {
            return bad("roi grid, radii and neighbors must be positive");
        }
        if r.c_h % r.radii.len() != 0 {
            return bad("c_h must divide evenly among the radii");
        }
        if r.residual_std.iter().any(|&x| !(x > 0.0)) {
            return bad("residual_std entries must be positive");
        }
        if r.mlp1.is_empty() || r.mlp2.is_empty() || r.fc_fused.is_empty() || r.fc_final.is_empty() {
            return bad("roi mlp1, mlp2, fc_fused and fc_final need at least one layer");
        }
        if [r.c_h, r.c_m, r.c_b, r.c_b_prime].contains(&0) || !(r.depth_normalizer > 0.0) || !(r.margin >= 0.0) {
            return bad("roi widths, depth normalizer and margin invalid");
        }
        let t = &self.train;
        if t.batch_size == 0 || t.proposals_per_scene == 0 {
            return bad("batch size and proposal count must be positive");
        }
        if !(t.theta_l <= t.theta_h) || !(0.0..=1.0).contains(&t.fg_fraction) {
            return bad("refinement thresholds invalid");
        }
        let a = &t.augment;
        if a.scale_range.0 < SCALE_RANGE.0
            || a.scale_range.1 > SCALE_RANGE.1
            || a.scale_range.0 > a.scale_range.1
            || a.rotation_range.0 < ROTATION_RANGE.0
            || a.rotation_range.1 > ROTATION_RANGE.1
            || a.rotation_range.0 > a.rotation_range.1
        {
            return bad("augmentation ranges must lie within [0.95, 1.05] and [-pi/4, pi/4]");
        }
        if self.eval.recall_positions == 0 || self.eval.iou_shift_bins == 0 {
            return bad("eval recall positions and bins must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        let back = Config::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn paper_constants() {
        let c = Config::default();
        assert_eq!(c.backbone.widths, [16, 32, 64, 128]);
        assert_eq!(c.decoder.widths, [256, 192, 160, 128]);
        assert_eq!(c.decoder.embed_width, 128);
        assert_eq!(c.decoder.knn_k, 3);
        assert_eq!(c.roi.grid_size, 6);
        assert_eq!(c.roi.radii, vec![0.8, 1.6]);
        assert_eq!((c.roi.c_h, c.roi.c_m, c.roi.c_b), (128, 128, 128));
        assert_eq!((c.loss.w_rpn, c.loss.w_seg, c.loss.w_refine), (1.0, 4.0, 1.0));
        assert_eq!((c.train.theta_h, c.train.theta_l, c.train.theta_reg), (0.75, 0.25, 0.55));
        assert_eq!(c.train.proposals_per_scene, 128);
        assert_eq!((c.rpn.nms_iou, c.rpn.post_nms_top_n), (0.85, 100));
        assert_eq!(c.train.optimizer.weight_decay, 0.01);
        let ious: Vec<f64> = c.classes.iter().map(|k| k.eval_iou).collect();
        assert_eq!(ious, vec![0.7, 0.5, 0.5]);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = Config::from_toml("[train]\nsteps = 7\n").unwrap();
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.roi, RoiConfig::default());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(Config::from_toml("[train]\nstepz = 7\n").is_err());
        assert!(Config::from_toml("[roi]\nradii = [0.8, 1.6, 2.4]\n").is_err());
        assert!(Config::from_toml("[train.augment]\nscale_range = [0.5, 1.0]\n").is_err());
    }

    #[test]
    fn confidence_mode_names() {
        for (s, m) in [
            ("cls", ConfidenceMode::Cls),
            ("unaligned-iou", ConfidenceMode::UnalignedIou),
            ("aligned-iou", ConfidenceMode::AlignedIou),
            ("aligned-iou-x-cls", ConfidenceMode::AlignedIouXCls),
        ] {
            assert_eq!(s.parse::<ConfidenceMode>().unwrap(), m);
        }
        assert!("iou".parse::<ConfidenceMode>().is_err());
    }
}
