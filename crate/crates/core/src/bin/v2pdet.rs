use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Deserialize;

use v2pdet::checkpoint;
use v2pdet::config::{Config, ConfidenceMode};
use v2pdet::dataset;
use v2pdet::eval;
use v2pdet::geom;
use v2pdet::kitti;
use v2pdet::model::{Detector, InferOptions};
use v2pdet::scene::{synth_scene, SynthSpec};
use v2pdet::train;

#[derive(Parser)]
#[command(name = "v2pdet", version, about = "Two-stage LiDAR 3D detector")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic scenes in KITTI layout.
    Synth {
        /// TOML job: scene spec, count and class names.
        #[arg(long)]
        spec: PathBuf,
        /// Dataset root; gets velodyne/ and label_2/.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from scratch and write a checkpoint.
    Train {
        /// Detector config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Dataset root with velodyne/ and label_2/.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Train the RPN and decoder only.
        #[arg(long)]
        no_refine: bool,
        /// Drop the segmentation loss.
        #[arg(long)]
        no_seg: bool,
        /// Override the config's step count.
        #[arg(long)]
        steps: Option<usize>,
        /// Loss series CSV (default: `<out>.loss.csv`).
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Detect objects and write KITTI result files.
    Infer {
        /// Checkpoint from `train`.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset root; only velodyne/ is read.
        #[arg(long)]
        data: PathBuf,
        /// cls, unaligned-iou, aligned-iou or aligned-iou-x-cls.
        #[arg(long, default_value = "aligned-iou-x-cls")]
        confidence: ConfidenceMode,
        /// Directory for one result file per frame.
        #[arg(long)]
        out: PathBuf,
        /// Report RPN proposals without the second stage.
        #[arg(long)]
        no_refine: bool,
    },
    /// Score result files against labels and write a JSON report.
    Eval {
        /// Result files from `infer`.
        #[arg(long)]
        det: PathBuf,
        /// Dataset root or label directory.
        #[arg(long)]
        gt: PathBuf,
        /// JSON report path.
        #[arg(long)]
        report: PathBuf,
        /// Classes and thresholds (default: Car/Pedestrian/Cyclist at 0.7/0.5/0.5).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare exact 3D IoU with Monte Carlo estimates on random box pairs.
    IouCheck {
        /// Random box pairs.
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        /// Monte Carlo samples per pair.
        #[arg(long, default_value_t = 1_000_000)]
        samples: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest tolerated absolute error.
        #[arg(long, default_value_t = 0.01)]
        tolerance: f64,
    },
}

/// `synth` spec file: a synthetic scene spec plus how many scenes to make
/// (seeds `seed, seed + 1, ...`) and the label name of each class id.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthJob {
    #[serde(default = "one")]
    count: usize,
    #[serde(default = "car")]
    class_names: Vec<String>,
    #[serde(default)]
    scene: SynthSpec,
}

fn one() -> usize {
    1
}

fn car() -> Vec<String> {
    vec!["Car".into()]
}

fn synth(spec: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(spec).with_context(|| format!("reading {}", spec.display()))?;
    let job: SynthJob = toml::from_str(&text).context("parsing synth spec")?;
    for i in 0..job.count {
        let s = SynthSpec { seed: job.scene.seed + i as u64, ..job.scene.clone() };
        let (pc, gt) = synth_scene(&s)?;
        dataset::write_scene(out, &format!("{i:06}"), &pc, &gt, &job.class_names)?;
    }
    println!("wrote {} scenes to {}", job.count, out.display());
    Ok(())
}

fn run_train(config: &Path, data: &Path, out: &Path, no_refine: bool, no_seg: bool, steps: Option<usize>, loss_csv: Option<PathBuf>) -> Result<()> {
    let mut cfg = Config::load(config)?;
    if no_refine {
        cfg.train.refine = false;
    }
    if no_seg {
        cfg.train.supervise_seg = false;
    }
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    let scenes: Vec<_> = dataset::load_dataset(data, &cfg.class_names())?.into_iter().map(|s| (s.cloud, s.gt)).collect();
    if scenes.is_empty() {
        bail!("no scenes under {}", data.display());
    }
    log::info!("training on {} scenes for {} steps", scenes.len(), cfg.train.steps);
    let outcome = train::train(&cfg, &scenes, |r| {
        if r.step % 10 == 0 {
            log::info!("step {} total {:.5} rpn {:.5} seg {:.5} refine {:.5}", r.step, r.total, r.rpn, r.seg, r.refine);
        }
    })?;
    checkpoint::save(out, &cfg, &outcome.detector.store)?;
    let csv = loss_csv.unwrap_or_else(|| PathBuf::from(format!("{}.loss.csv", out.display())));
    train::write_loss_csv(&csv, &outcome.reports)?;
    if let Some(last) = outcome.reports.last() {
        println!("final loss {:.6}; checkpoint {}; losses {}", last.total, out.display(), csv.display());
    }
    Ok(())
}

fn infer(ckpt: &Path, data: &Path, confidence: ConfidenceMode, out: &Path, no_refine: bool) -> Result<()> {
    let (cfg, store) = checkpoint::load(ckpt)?;
    let det = Detector::with_params(&cfg, &store)?;
    let names = cfg.class_names();
    let opts = InferOptions { confidence, refine: !no_refine, streams: cfg.roi.streams };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut total = 0;
    for id in dataset::scene_ids(data)? {
        let scene = dataset::load_scene(data, &id, &names)?;
        let res = det.infer(&scene.cloud, opts)?;
        let objs: Vec<_> = res
            .detections
            .iter()
            .map(|d| kitti::box_to_object(&d.bbox, &names[d.class_id], Some(d.confidence), &scene.calib))
            .collect();
        total += objs.len();
        kitti::write_objects(&out.join(format!("{id}.txt")), &objs)?;
        if let (Some(first), Some(aligned)) = (&res.first, &res.aligned) {
            let recs: Vec<eval::RefineRecord> = res
                .proposals
                .iter()
                .enumerate()
                .map(|(i, p)| eval::RefineRecord {
                    class_id: p.class_id,
                    proposal: p.bbox,
                    refined: res.refined[i],
                    iou_unaligned: first.iou[i],
                    iou_aligned: aligned.iou[i],
                })
                .collect();
            let dir = out.join("refine");
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let p = dir.join(format!("{id}.txt"));
            fs::write(&p, eval::format_refine_records(&recs)).with_context(|| format!("writing {}", p.display()))?;
        }
    }
    println!("wrote {total} detections to {}", out.display());
    Ok(())
}

fn run_eval(det: &Path, gt: &Path, report: &Path, config: Option<PathBuf>) -> Result<()> {
    let cfg = match config {
        Some(p) => Config::load(&p)?,
        None => Config::default(),
    };
    let r = eval::evaluate_dirs(det, gt, &cfg)?;
    fs::write(report, r.to_json()).with_context(|| format!("writing {}", report.display()))?;
    for c in &r.classes {
        println!("{:<12} AP3D {:.4}  APBEV {:.4}  (IoU {}, {} gt, {} det)", c.name, c.ap_3d, c.ap_bev, c.iou_thresh, c.num_gt, c.num_det);
    }
    if let (Some(n), Some(s)) = (r.diagnostic_pairs, &r.iou_shift) {
        let f = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        println!(
            "refinement over {n} boxes: mean IoU {:.4} -> {:.4}; SRCC aligned {} unaligned {}",
            s.mean_before,
            s.mean_after,
            f(r.srcc),
            f(r.srcc_unaligned)
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::Synth { spec, out } => synth(&spec, &out),
        Cmd::Train { config, data, out, no_refine, no_seg, steps, loss_csv } => run_train(&config, &data, &out, no_refine, no_seg, steps, loss_csv),
        Cmd::Infer { ckpt, data, confidence, out, no_refine } => infer(&ckpt, &data, confidence, &out, no_refine),
        Cmd::Eval { det, gt, report, config } => run_eval(&det, &gt, &report, config),
        Cmd::IouCheck { trials, samples, seed, tolerance } => {
            let r = geom::iou_check(trials, samples, seed);
            println!("{} pairs, {} samples each: max |err| {:.5} (pair {}), mean {:.5}", r.trials, samples, r.max_abs_err, r.worst, r.mean_abs_err);
            if r.max_abs_err > tolerance {
                bail!("max error {:.5} exceeds tolerance {tolerance}", r.max_abs_err);
            }
            println!("ok");
            Ok(())
        }
    }
}
