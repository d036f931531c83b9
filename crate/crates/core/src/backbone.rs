//! Sparse 3D convolution encoder (strides 1, 2, 4, 8) and its projection to a
//! dense bird's-eye-view map.
//!
//! Kernel offsets are numbered `k = (dx+1)*9 + (dy+1)*3 + (dz+1)`. Output voxel
//! `o` of a submanifold conv reads input `o + d` through `W_k`; output `o` of a
//! strided conv reads input `2o + d`.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::nn::{init_uniform, RELU_GAIN};
use crate::autodiff::{Ctx, Graph, ParamId, ParamStore, Rulebook, Tensor, Var};
use crate::config::BackboneConfig;
use crate::error::{Error, Result};
use crate::voxel::{SparseVoxelTensor, VoxelGridSpec, VoxelIndex};

pub const KERNEL_VOLUME: usize = 27;

fn offset_index(d: [i32; 3]) -> usize {
    ((d[0] + 1) * 9 + (d[1] + 1) * 3 + (d[2] + 1)) as usize
}

fn offsets() -> impl Iterator<Item = [i32; 3]> {
    (-1..=1).flat_map(|x| (-1..=1).flat_map(move |y| (-1..=1).map(move |z| [x, y, z])))
}

fn lookup(indices: &[VoxelIndex]) -> HashMap<VoxelIndex, u32> {
    indices.iter().enumerate().map(|(i, &v)| (v, i as u32)).collect()
}

/// Output set equals the input set.
pub fn submanifold_rulebook(indices: &[VoxelIndex]) -> Rulebook {
    let map = lookup(indices);
    let mut pairs = vec![Vec::new(); KERNEL_VOLUME];
    for (o, v) in indices.iter().enumerate() {
        for d in offsets() {
            let n = [v[0] + d[0], v[1] + d[1], v[2] + d[2]];
            if let Some(&i) = map.get(&n) {
                pairs[offset_index(d)].push((i, o as u32));
            }
        }
    }
    Rulebook { n_in: indices.len(), n_out: indices.len(), pairs }
}

/// Output set is the floor-halved image of the input set (sorted); every input
/// within the 3x3x3 footprint of an existing output contributes.
pub fn strided_rulebook(indices: &[VoxelIndex]) -> (Vec<VoxelIndex>, Rulebook) {
    let mut out: Vec<VoxelIndex> = indices.iter().map(|v| v.map(|c| c.div_euclid(2))).collect();
    out.sort_unstable();
    out.dedup();
    let map = lookup(&out);
    let mut pairs = vec![Vec::new(); KERNEL_VOLUME];
    for (i, v) in indices.iter().enumerate() {
        // candidate outputs: 2o + d = v with d in {-1, 0, 1}
        for d in offsets() {
            let t = [v[0] - d[0], v[1] - d[1], v[2] - d[2]];
            if t.iter().any(|c| c.rem_euclid(2) != 0) {
                continue;
            }
            let o = t.map(|c| c / 2);
            if let Some(&oi) = map.get(&o) {
                pairs[offset_index(d)].push((i as u32, oi));
            }
        }
    }
    let n_out = out.len();
    (out, Rulebook { n_in: indices.len(), n_out, pairs })
}

/// One level of the encoder output, living in a graph.
#[derive(Debug, Clone)]
pub struct VoxelLevel {
    pub stride: u32,
    pub indices: Vec<VoxelIndex>,
    pub feats: Var,
}

impl VoxelLevel {
    pub fn to_sparse(&self, g: &Graph, spec: &VoxelGridSpec) -> SparseVoxelTensor {
        SparseVoxelTensor { spec: *spec, stride: self.stride, indices: self.indices.clone(), features: g.value(self.feats).clone() }
    }
}

#[derive(Debug, Clone)]
pub struct LevelFeatures {
    pub spec: VoxelGridSpec,
    /// Strides 1, 2, 4, 8.
    pub levels: Vec<VoxelLevel>,
}

/// 3x3x3 sparse convolution followed by bias and ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseConvBlock {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: u32,
}

impl SparseConvBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: u32,
    ) -> Result<Self> {
        if stride != 1 && stride != 2 {
            return Err(Error::Invalid(format!("sparse conv stride must be 1 or 2, got {stride}")));
        }
        let fan_in = KERNEL_VOLUME * c_in;
        let w = store.insert(format!("{name}.w"), init_uniform(rng, fan_in, c_out, fan_in, RELU_GAIN))?;
        let b = store.insert(format!("{name}.b"), Tensor::zeros(1, c_out))?;
        Ok(SparseConvBlock { w, b, c_in, c_out, stride })
    }

    pub fn forward(&self, cx: &mut Ctx, input: &VoxelLevel) -> Result<VoxelLevel> {
        let (indices, book, stride) = if self.stride == 1 {
            (input.indices.clone(), submanifold_rulebook(&input.indices), input.stride)
        } else {
            let (o, b) = strided_rulebook(&input.indices);
            (o, b, input.stride * 2)
        };
        let w = cx.param(self.w);
        let b = cx.param(self.b);
        let y = cx.g.conv(input.feats, w, Arc::new(book))?;
        let y = cx.g.add_bias(y, b)?;
        Ok(VoxelLevel { stride, indices, feats: cx.g.relu(y) })
    }
}

/// Dense BEV grid; row `ix * ny + iy` holds cell `(ix, iy)`.
#[derive(Debug, Clone)]
pub struct BevMap {
    pub nx: usize,
    pub ny: usize,
    pub stride: u32,
    pub feats: Var,
}

impl BevMap {
    pub fn cell(&self, ix: usize, iy: usize) -> usize {
        ix * self.ny + iy
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub blocks: Vec<Vec<SparseConvBlock>>,
    /// BEV projection, one `C4 x C_bev` slab per z plane (no bias).
    pub bev_w: ParamId,
    pub bev_planes: usize,
    pub bev_channels: usize,
    pub normalize_input: bool,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: &BackboneConfig,
        spec: &VoxelGridSpec,
    ) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut c_in = 4;
        for (l, &w) in cfg.widths.iter().enumerate() {
            let mut level = Vec::new();
            if l > 0 {
                level.push(SparseConvBlock::new(store, rng, &format!("backbone.l{}.down", l + 1), c_in, w, 2)?);
                c_in = w;
            }
            level.push(SparseConvBlock::new(store, rng, &format!("backbone.l{}.subm", l + 1), c_in, w, 1)?);
            c_in = w;
            blocks.push(level);
        }
        let bev_planes = spec.dims_at(8)[2] as usize;
        let fan_in = bev_planes * c_in;
        let bev_w = store.insert("backbone.bev.w", init_uniform(rng, fan_in, cfg.bev_channels, fan_in, RELU_GAIN))?;
        Ok(Backbone { blocks, bev_w, bev_planes, bev_channels: cfg.bev_channels, normalize_input: cfg.normalize_input })
    }

    /// Input features for the first block: mean voxel `(x, y, z, r)`, with
    /// coordinates optionally rescaled to [0, 1] across the scene bounds.
    pub fn input_features(&self, v0: &SparseVoxelTensor) -> Tensor {
        let mut f = v0.features.clone();
        if self.normalize_input {
            let b = v0.spec.bounds;
            let e = b.extent();
            for r in 0..f.rows() {
                let row = f.row_mut(r);
                for k in 0..3 {
                    row[k] = (row[k] - b.min[k]) / e[k];
                }
            }
        }
        f
    }

    pub fn encode(&self, cx: &mut Ctx, v0: &SparseVoxelTensor) -> Result<LevelFeatures> {
        if v0.stride != 1 || v0.width() != 4 {
            return Err(Error::Invalid(format!("encoder expects stride-1 width-4 voxels, got stride {} width {}", v0.stride, v0.width())));
        }
        if v0.is_empty() {
            log::warn!("encoding an empty voxel tensor");
        }
        let x = cx.g.constant(self.input_features(v0));
        let mut cur = VoxelLevel { stride: 1, indices: v0.indices.clone(), feats: x };
        let mut levels = Vec::new();
        for level in &self.blocks {
            for block in level {
                cur = block.forward(cx, &cur)?;
            }
            levels.push(cur.clone());
        }
        Ok(LevelFeatures { spec: v0.spec, levels })
    }

    /// Stacks the z planes of the stride-8 level into channels and mixes them
    /// with one linear map per plane, then ReLU. Columns without voxels are 0.
    pub fn to_bev(&self, cx: &mut Ctx, v4: &VoxelLevel, spec: &VoxelGridSpec) -> Result<BevMap> {
        let dims = spec.dims_at(v4.stride);
        let (nx, ny) = (dims[0] as usize, dims[1] as usize);
        if dims[2] as usize != self.bev_planes {
            return Err(Error::Invalid(format!("expected {} z planes at stride {}, grid has {}", self.bev_planes, v4.stride, dims[2])));
        }
        let mut pairs = vec![Vec::new(); self.bev_planes];
        for (i, v) in v4.indices.iter().enumerate() {
            pairs[v[2] as usize].push((i as u32, (v[0] as usize * ny + v[1] as usize) as u32));
        }
        let book = Rulebook { n_in: v4.indices.len(), n_out: nx * ny, pairs };
        let w = cx.param(self.bev_w);
        let y = cx.g.conv(v4.feats, w, Arc::new(book))?;
        Ok(BevMap { nx, ny, stride: v4.stride, feats: cx.g.relu(y) })
    }
}

/// Dense 3x3 same-padding convolution rulebook over an `nx x ny` grid.
/// Offset `k = (dx+1)*3 + (dy+1)`; output `(x, y)` reads `(x+dx, y+dy)`.
pub fn dense2d_rulebook(nx: usize, ny: usize) -> Rulebook {
    let mut pairs = vec![Vec::new(); 9];
    for x in 0..nx as i64 {
        for y in 0..ny as i64 {
            for dx in -1..=1i64 {
                for dy in -1..=1i64 {
                    let (sx, sy) = (x + dx, y + dy);
                    if sx < 0 || sy < 0 || sx >= nx as i64 || sy >= ny as i64 {
                        continue;
                    }
                    let k = ((dx + 1) * 3 + (dy + 1)) as usize;
                    pairs[k].push(((sx as usize * ny + sy as usize) as u32, (x as usize * ny + y as usize) as u32));
                }
            }
        }
    }
    Rulebook { n_in: nx * ny, n_out: nx * ny, pairs }
}
