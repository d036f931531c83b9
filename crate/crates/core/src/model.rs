//! The full detector: parameters plus the per-scene forward and the
//! two-pass inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Ctx, ParamStore};
use crate::backbone::{Backbone, BevMap, LevelFeatures};
use crate::config::{Config, ConfidenceMode, StreamSwitches};
use crate::decoder::{Decoder, DecoderOutput};
use crate::error::Result;
use crate::geom::{Box3D, Xyz};
use crate::roi::{self, Detection, Pass, Refinement, RoiHead, SceneFeatures};
use crate::rpn::{self, AnchorGrid, Proposal, RpnHead, RpnOutput};
use crate::scene::{crop_to_bounds, PointCloud};
use crate::voxel::{voxelize, SparseVoxelTensor, VoxelGridSpec};

#[derive(Debug, Clone)]
pub struct Detector {
    pub cfg: Config,
    pub spec: VoxelGridSpec,
    pub store: ParamStore,
    pub anchors: AnchorGrid,
    pub backbone: Backbone,
    pub rpn: RpnHead,
    pub decoder: Decoder,
    pub roi: RoiHead,
}

/// Graph handles for one scene.
#[derive(Debug, Clone)]
pub struct SceneForward {
    /// In-bounds raw points; every per-point tensor follows this order.
    pub points: Vec<Xyz>,
    pub v0: SparseVoxelTensor,
    pub levels: LevelFeatures,
    pub bev: BevMap,
    pub decoded: DecoderOutput,
    pub rpn: RpnOutput,
}

impl SceneForward {
    pub fn roi_view(&self) -> SceneFeatures<'_> {
        SceneFeatures { points: &self.points, p0: self.decoded.p0, seg: self.decoded.seg_prob, bev: &self.bev, spec: self.levels.spec }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InferOptions {
    pub confidence: ConfidenceMode,
    /// `false` reports the RPN proposals directly (single-stage baseline).
    pub refine: bool,
    pub streams: StreamSwitches,
}

#[derive(Debug, Clone, Default)]
pub struct InferOutput {
    pub points: Vec<Xyz>,
    pub seg_prob: Vec<f64>,
    pub proposals: Vec<Proposal>,
    pub first: Option<Refinement>,
    pub aligned: Option<Refinement>,
    /// Proposals with the first-pass residuals applied (same order).
    pub refined: Vec<Box3D>,
    pub detections: Vec<Detection>,
}

impl Detector {
    /// Fresh parameters drawn from `seed`.
    pub fn new(cfg: &Config, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let spec = cfg.grid()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &mut rng, &cfg.backbone, &spec)?;
        let rpn = RpnHead::new(&mut store, &mut rng, &cfg.rpn, cfg.backbone.bev_channels, cfg.classes.len())?;
        let decoder = Decoder::new(&mut store, &mut rng, &cfg.decoder, cfg.backbone.widths)?;
        let roi = RoiHead::new(&mut store, &mut rng, &cfg.roi, cfg.decoder.embed_width, cfg.backbone.bev_channels)?;
        let anchors = AnchorGrid::new(&spec, 8, &cfg.classes);
        Ok(Detector { cfg: cfg.clone(), spec, store, anchors, backbone, rpn, decoder, roi })
    }

    /// Builds the architecture for `cfg` and copies `params` into it; names
    /// and shapes must match exactly.
    pub fn with_params(cfg: &Config, params: &ParamStore) -> Result<Self> {
        let mut d = Detector::new(cfg, 0)?;
        d.store.load_from(params)?;
        Ok(d)
    }

    pub fn forward(&self, cx: &mut Ctx, pc: &PointCloud) -> Result<SceneForward> {
        let pc = crop_to_bounds(pc, &self.spec.bounds);
        let points = pc.xyz_all();
        let v0 = voxelize(&pc, &self.spec)?;
        let levels = self.backbone.encode(cx, &v0)?;
        let bev = self.backbone.to_bev(cx, &levels.levels[3], &self.spec)?;
        let decoded = self.decoder.forward(cx, &levels, &points)?;
        let rpn = self.rpn.forward(cx, &bev)?;
        Ok(SceneForward { points, v0, levels, bev, decoded, rpn })
    }

    pub fn proposals(&self, cx: &Ctx, f: &SceneForward) -> Vec<Proposal> {
        rpn::propose(cx.g.value(f.rpn.cls_logits), cx.g.value(f.rpn.reg), &self.anchors, &self.cfg.rpn)
    }

    pub fn infer(&self, pc: &PointCloud, opts: InferOptions) -> Result<InferOutput> {
        let mut cx = Ctx::new(&self.store);
        if crop_to_bounds(pc, &self.spec.bounds).is_empty() {
            log::warn!("scene has no points inside the bounds");
            return Ok(InferOutput::default());
        }
        let f = self.forward(&mut cx, pc)?;
        let seg_prob = cx.g.value(f.decoded.seg_prob).data().to_vec();
        let proposals = self.proposals(&cx, &f);
        let icfg = &self.cfg.infer;
        let mut out = InferOutput { points: f.points.clone(), seg_prob, proposals, ..Default::default() };
        if out.proposals.is_empty() {
            return Ok(out);
        }
        let boxes: Vec<Box3D> = out.proposals.iter().map(|p| p.bbox).collect();
        let dets: Vec<Detection> = if opts.refine {
            let view = f.roi_view();
            let first = self.roi.refine(&mut cx, &view, &boxes, opts.streams, Pass::First)?;
            let refined = roi::apply_residuals(&boxes, &first.residual, &self.cfg.roi.residual_std);
            let aligned = roi::align_iou(&self.roi, &mut cx, &view, &refined, opts.streams)?;
            let dets = out
                .proposals
                .iter()
                .enumerate()
                .map(|(i, p)| Detection {
                    bbox: refined[i],
                    class_id: p.class_id,
                    confidence: roi::confidence(opts.confidence, first.cls_prob[i], first.iou[i], aligned.iou[i]),
                    cls_prob: first.cls_prob[i],
                    iou_unaligned: first.iou[i],
                    iou_aligned: aligned.iou[i],
                    proposal: p.bbox,
                    proposal_score: p.score,
                })
                .collect();
            out.refined = refined;
            out.first = Some(first);
            out.aligned = Some(aligned);
            dets
        } else {
            out.refined = boxes.clone();
            out.proposals
                .iter()
                .map(|p| Detection {
                    bbox: p.bbox,
                    class_id: p.class_id,
                    confidence: p.score,
                    cls_prob: p.score,
                    iou_unaligned: 0.0,
                    iou_aligned: 0.0,
                    proposal: p.bbox,
                    proposal_score: p.score,
                })
                .collect()
        };
        let dets = dets.into_iter().filter(|d| d.confidence >= icfg.score_threshold).collect();
        out.detections = roi::final_nms(dets, icfg.final_nms_iou, icfg.max_detections);
        Ok(out)
    }
}

/// Small architecture for desk-scale scenes; used by tests and the example
/// config.
pub fn desk_config() -> Config {
    let mut c = Config::default();
    c.scene.bounds = crate::scene::SceneBounds { min: [0.0, -12.8, -3.0], max: [25.6, 12.8, 1.0] };
    c.scene.voxel_size = [0.1, 0.1, 0.2];
    c.classes.truncate(1);
    c.classes[0].eval_iou = 0.5;
    c.backbone.bev_channels = 64;
    c.rpn.head_channels = 64;
    c.roi.grid_size = 3;
    c.roi.neighbors = 8;
    c.roi.mlp1 = vec![16];
    c.roi.mlp2 = vec![32];
    c.roi.mlp3 = vec![32];
    c.roi.c_h = 32;
    c.roi.c_m = 32;
    c.roi.c_b = 32;
    c.roi.c_b_prime = 16;
    c.roi.fc_fused = vec![128];
    c.roi.fc_final = vec![128];
    c.roi.branch_hidden = vec![64];
    c.roi.corner_scale = 0.1;
    c.train.proposals_per_scene = 32;
    c
}
