//! Voxel-to-point decoding: multi-level voxel features are carried back onto
//! every raw point by inverse-distance KNN interpolation, refined by residual
//! blocks, and read out as point embeddings plus a foreground probability.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::nn::RELU_GAIN;
use crate::autodiff::{Ctx, Linear, Mlp, MlpSpec, ParamStore, SparseMix, Var};
use crate::backbone::LevelFeatures;
use crate::config::DecoderConfig;
use crate::error::{Error, Result};
use crate::geom::{self, Box3D, Xyz};
use crate::scene::{GroundTruth, PointCloud};
use crate::voxel::VoxelGridSpec;

/// Below this distance a query copies its nearest source outright.
pub const COINCIDENCE_EPS: f64 = 1e-9;

fn dist(a: &Xyz, b: &Xyz) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// The `k` nearest sources of each query ordered by `(distance, index)`.
pub fn knn_exhaustive(queries: &[Xyz], sources: &[Xyz], k: usize) -> Vec<Vec<(usize, f64)>> {
    queries
        .iter()
        .map(|q| {
            let mut all: Vec<(usize, f64)> = sources.iter().enumerate().map(|(i, s)| (i, dist(q, s))).collect();
            all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            all.truncate(k);
            all
        })
        .collect()
}

/// Uniform-grid bucketing of source points. Queries return exactly what
/// [`knn_exhaustive`] returns.
pub struct KnnIndex<'a> {
    sources: &'a [Xyz],
    origin: Xyz,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> KnnIndex<'a> {
    pub fn new(sources: &'a [Xyz], k: usize) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for s in sources {
            for a in 0..3 {
                lo[a] = lo[a].min(s[a]);
                hi[a] = hi[a].max(s[a]);
            }
        }
        if sources.is_empty() {
            lo = [0.0; 3];
            hi = [0.0; 3];
        }
        let ext: Vec<f64> = (0..3).map(|a| (hi[a] - lo[a]).max(1e-6)).collect();
        // aim for about k points per occupied cell, treating flat clouds as 2D
        let n = sources.len().max(1) as f64;
        let per = k.max(2) as f64;
        let mut cell = (ext[0] * ext[1] * ext[2] * per / n).cbrt();
        let flat = (ext[0] * ext[1] * per / n).sqrt();
        if ext[2] < flat {
            cell = flat;
        }
        let cell = cell.max(1e-6);
        let dims: [usize; 3] = std::array::from_fn(|a| ((ext[a] / cell).floor() as usize + 1).min(1 << 10));
        let cell_of = |p: &Xyz| -> usize {
            let c: [usize; 3] = std::array::from_fn(|a| (((p[a] - lo[a]) / cell).floor().max(0.0) as usize).min(dims[a] - 1));
            (c[0] * dims[1] + c[1]) * dims[2] + c[2]
        };
        let ncell = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0usize; ncell + 1];
        let ids: Vec<usize> = sources.iter().map(cell_of).collect();
        for &c in &ids {
            counts[c + 1] += 1;
        }
        for i in 0..ncell {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0; sources.len()];
        for (i, &c) in ids.iter().enumerate() {
            order[fill[c]] = i;
            fill[c] += 1;
        }
        KnnIndex { sources, origin: lo, cell, dims, starts: counts, order }
    }

    pub fn query(&self, q: &Xyz, k: usize) -> Vec<(usize, f64)> {
        let k = k.min(self.sources.len());
        if k == 0 {
            return Vec::new();
        }
        let c: [i64; 3] = std::array::from_fn(|a| {
            (((q[a] - self.origin[a]) / self.cell).floor().max(0.0) as i64).min(self.dims[a] as i64 - 1)
        });
        let max_r = *self.dims.iter().max().unwrap() as i64;
        let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        let push = |i: usize, d: f64, best: &mut Vec<(usize, f64)>| {
            let pos = best.partition_point(|e| e.1 < d || (e.1 == d && e.0 < i));
            if pos < k {
                best.insert(pos, (i, d));
                best.truncate(k);
            }
        };
        for r in 0..=max_r {
            for x in c[0] - r..=c[0] + r {
                if x < 0 || x >= self.dims[0] as i64 {
                    continue;
                }
                for y in c[1] - r..=c[1] + r {
                    if y < 0 || y >= self.dims[1] as i64 {
                        continue;
                    }
                    let on_shell_xy = (x - c[0]).abs() == r || (y - c[1]).abs() == r;
                    let zs: Vec<i64> = if on_shell_xy {
                        (c[2] - r..=c[2] + r).collect()
                    } else {
                        vec![c[2] - r, c[2] + r]
                    };
                    for z in zs {
                        if z < 0 || z >= self.dims[2] as i64 {
                            continue;
                        }
                        let cell = ((x as usize * self.dims[1]) + y as usize) * self.dims[2] + z as usize;
                        for &i in &self.order[self.starts[cell]..self.starts[cell + 1]] {
                            push(i, dist(q, &self.sources[i]), &mut best);
                        }
                    }
                }
            }
            // anything not yet visited is at least r * cell away
            if best.len() == k && best[k - 1].1 < r as f64 * self.cell {
                break;
            }
        }
        best
    }
}

/// Inverse-distance weights over the `k` nearest sources as a sparse row mix.
pub fn knn_weights(queries: &[Xyz], sources: &[Xyz], k: usize) -> Result<SparseMix> {
    if sources.is_empty() {
        return Err(Error::Invalid("interpolation needs at least one source point".into()));
    }
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    let index = KnnIndex::new(sources, k);
    let mut mix = SparseMix::new();
    for q in queries {
        let nn = index.query(q, k);
        if nn[0].1 < COINCIDENCE_EPS {
            mix.push_row([(nn[0].0, 1.0)]);
            continue;
        }
        let total: f64 = nn.iter().map(|&(_, d)| 1.0 / d).sum();
        mix.push_row(nn.iter().map(|&(i, d)| (i, (1.0 / d) / total)));
    }
    Ok(mix)
}

/// Interpolated features at `queries` from feature rows aligned with `sources`.
pub fn knn_interpolate(cx: &mut Ctx, queries: &[Xyz], sources: &[Xyz], feats: Var, k: usize) -> Result<Var> {
    let (rows, cols) = cx.g.shape(feats);
    if rows != sources.len() {
        return Err(Error::Shape { lhs: (sources.len(), 3), rhs: (rows, cols), context: "knn sources vs features" });
    }
    let mix = knn_weights(queries, sources, k)?;
    cx.g.mix(feats, Arc::new(mix))
}

/// `ReLU(W_id P_prev + b + W_res knn(V_l))`.
#[derive(Debug, Clone)]
pub struct DecodeBlock {
    pub identity: Linear,
    pub residual: Linear,
    pub width: usize,
}

impl DecodeBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, d_prev: usize, d_vox: usize, width: usize) -> Result<Self> {
        Ok(DecodeBlock {
            identity: Linear::new(store, rng, &format!("{name}.id"), d_prev, width, true, RELU_GAIN)?,
            residual: Linear::new(store, rng, &format!("{name}.res"), d_vox, width, false, RELU_GAIN)?,
            width,
        })
    }

    /// `interp` is the residual input already interpolated onto the points,
    /// or `None` when the level has no voxels.
    pub fn forward(&self, cx: &mut Ctx, p_prev: Var, interp: Option<Var>) -> Result<Var> {
        let id = self.identity.forward(cx, p_prev)?;
        let sum = match interp {
            Some(x) => {
                let r = self.residual.forward(cx, x)?;
                cx.g.add(id, r)?
            }
            None => id,
        };
        Ok(cx.g.relu(sum))
    }
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// `P(4)..P(1)`.
    pub levels: Vec<Var>,
    pub p0: Var,
    pub seg_logit: Var,
    pub seg_prob: Var,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub blocks: Vec<DecodeBlock>,
    pub embed: Linear,
    pub seg: Mlp,
    pub k: usize,
}

impl Decoder {
    /// `voxel_widths` are the encoder widths at strides 1, 2, 4, 8.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &DecoderConfig, voxel_widths: [usize; 4]) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut d_prev = voxel_widths[3];
        for (j, &w) in cfg.widths.iter().enumerate() {
            let level = 4 - j;
            blocks.push(DecodeBlock::new(store, rng, &format!("decoder.d{level}"), d_prev, voxel_widths[level - 1], w)?);
            d_prev = w;
        }
        let embed = Linear::new(store, rng, "decoder.embed", d_prev, cfg.embed_width, true, RELU_GAIN)?;
        let mut widths = vec![d_prev];
        widths.extend(&cfg.seg_hidden);
        widths.push(1);
        let seg = Mlp::new(store, rng, "decoder.seg", &MlpSpec::new(widths, false))?;
        Ok(Decoder { blocks, embed, seg, k: cfg.knn_k })
    }

    pub fn forward(&self, cx: &mut Ctx, levels: &LevelFeatures, raw: &[Xyz]) -> Result<DecoderOutput> {
        let spec: VoxelGridSpec = levels.spec;
        let interp_level = |cx: &mut Ctx, l: usize| -> Result<Option<Var>> {
            let lv = &levels.levels[l];
            if lv.indices.is_empty() {
                log::warn!("decoder level {} has no voxels; residual path is zero", l + 1);
                return Ok(None);
            }
            let centers: Vec<Xyz> = lv.indices.iter().map(|&i| crate::voxel::devoxelize(i, &spec, lv.stride)).collect();
            knn_interpolate(cx, raw, &centers, lv.feats, self.k).map(Some)
        };
        let init = match interp_level(cx, 3)? {
            Some(v) => v,
            None => cx.g.zeros(raw.len(), cx.g.shape(levels.levels[3].feats).1),
        };
        let mut p = init;
        let mut outs = Vec::new();
        for (j, block) in self.blocks.iter().enumerate() {
            let l = 3 - j;
            // the stride-8 interpolation is the initial feature itself
            let interp = if l == 3 { (!levels.levels[3].indices.is_empty()).then_some(init) } else { interp_level(cx, l)? };
            p = block.forward(cx, p, interp)?;
            outs.push(p);
        }
        let p0 = self.embed.forward(cx, p)?;
        let p0 = cx.g.relu(p0);
        let seg_logit = self.seg.forward(cx, p)?;
        let seg_prob = cx.g.sigmoid(seg_logit);
        Ok(DecoderOutput { levels: outs, p0, seg_logit, seg_prob })
    }
}

/// 1 for points inside any box (closed faces), else 0.
pub fn seg_labels(raw: &PointCloud, gt: &GroundTruth) -> Vec<f64> {
    let testers: Vec<_> = gt.boxes.iter().map(geom::BoxTester::new).collect();
    (0..raw.len()).map(|i| if testers.iter().any(|t| t.contains(raw.xyz(i))) { 1.0 } else { 0.0 }).collect()
}

pub fn seg_labels_for(points: &[Xyz], boxes: &[Box3D]) -> Vec<f64> {
    let testers: Vec<_> = boxes.iter().map(geom::BoxTester::new).collect();
    points.iter().map(|&p| if testers.iter().any(|t| t.contains(p)) { 1.0 } else { 0.0 }).collect()
}

/// One line per point: `x y z prob label`.
pub fn dump_segmentation(points: &[Xyz], probs: &[f64], labels: &[f64]) -> String {
    let mut s = String::new();
    for ((p, pr), l) in points.iter().zip(probs).zip(labels) {
        let _ = writeln!(s, "{} {} {} {} {}", p[0], p[1], p[2], pr, *l as u8);
    }
    s
}
