//! Point quantization into sparse voxel tensors and the index-to-metric
//! inverse used by the decoder.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geom::Xyz;
use crate::scene::{PointCloud, SceneBounds};

pub type VoxelIndex = [i32; 3];

/// Quantization of a scene at stride 1. Coarser levels are derived with
/// [`VoxelGridSpec::dims_at`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelGridSpec {
    pub step: Xyz,
    pub bounds: SceneBounds,
}

impl VoxelGridSpec {
    pub fn new(step: Xyz, bounds: SceneBounds) -> Result<Self> {
        let s = VoxelGridSpec { step, bounds };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        let e = self.bounds.extent();
        for k in 0..3 {
            if !(self.step[k] > 0.0) || !self.step[k].is_finite() {
                return Err(Error::Invalid(format!("voxel step {:?} must be positive", self.step)));
            }
            let n = e[k] / self.step[k];
            if (n - n.round()).abs() > 1e-6 || n.round() < 1.0 {
                return Err(Error::Invalid(format!(
                    "axis {k}: extent {} is not a whole number of {} m steps",
                    e[k], self.step[k]
                )));
            }
        }
        Ok(())
    }

    /// Grid extents at stride 1.
    pub fn dims(&self) -> [i32; 3] {
        let e = self.bounds.extent();
        std::array::from_fn(|k| (e[k] / self.step[k]).round() as i32)
    }

    /// Grid extents at `stride` (a power of two); each halving rounds up.
    pub fn dims_at(&self, stride: u32) -> [i32; 3] {
        let mut d = self.dims();
        let mut s = 1;
        while s < stride {
            d = d.map(|v| (v + 1) / 2);
            s *= 2;
        }
        d
    }

    /// `floor((p - min) / d)` per axis.
    pub fn index_of(&self, p: Xyz) -> Result<VoxelIndex> {
        if !self.bounds.contains(p) {
            return Err(Error::OutOfBounds { x: p[0], y: p[1], z: p[2] });
        }
        let dims = self.dims();
        Ok(std::array::from_fn(|k| {
            let i = ((p[k] - self.bounds.min[k]) / self.step[k]).floor() as i32;
            // the division can round a point just below max up to the extent
            i.min(dims[k] - 1)
        }))
    }
}

/// Voxel center in metric coordinates: `(v + 0.5) * d * s + min` per axis.
pub fn devoxelize(idx: VoxelIndex, spec: &VoxelGridSpec, stride: u32) -> Xyz {
    std::array::from_fn(|k| (idx[k] as f64 + 0.5) * spec.step[k] * stride as f64 + spec.bounds.min[k])
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseVoxelTensor {
    pub spec: VoxelGridSpec,
    pub stride: u32,
    /// Unique, lexicographically sorted.
    pub indices: Vec<VoxelIndex>,
    /// One row per index.
    pub features: Tensor,
}

impl SparseVoxelTensor {
    pub fn empty(spec: VoxelGridSpec, stride: u32, width: usize) -> Self {
        SparseVoxelTensor { spec, stride, indices: Vec::new(), features: Tensor::zeros(0, width) }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }

    pub fn dims(&self) -> [i32; 3] {
        self.spec.dims_at(self.stride)
    }

    pub fn centers(&self) -> Vec<Xyz> {
        self.indices.iter().map(|&i| devoxelize(i, &self.spec, self.stride)).collect()
    }

    pub fn lookup(&self) -> HashMap<VoxelIndex, usize> {
        self.indices.iter().enumerate().map(|(i, &v)| (v, i)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.rows() != self.indices.len() {
            return Err(Error::Shape {
                lhs: (self.indices.len(), self.width()),
                rhs: self.features.shape(),
                context: "voxel indices vs features",
            });
        }
        let dims = self.dims();
        for w in self.indices.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Invalid("voxel indices not strictly sorted".into()));
            }
        }
        for v in &self.indices {
            if (0..3).any(|k| v[k] < 0 || v[k] >= dims[k]) {
                return Err(Error::Invalid(format!("voxel index {v:?} outside grid {dims:?}")));
            }
        }
        Ok(())
    }

    /// Text dump, one voxel per line: `vx vy vz f0 f1 ...`.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (i, v) in self.indices.iter().enumerate() {
            let _ = write!(s, "{} {} {}", v[0], v[1], v[2]);
            for f in self.features.row(i) {
                let _ = write!(s, " {f}");
            }
            s.push('\n');
        }
        s
    }
}

/// Quantizes at stride 1; features are the mean `(x, y, z, r)` of each
/// voxel's points. Also returns the per-voxel point count.
pub fn voxelize_with_counts(pc: &PointCloud, spec: &VoxelGridSpec) -> Result<(SparseVoxelTensor, Vec<usize>)> {
    spec.validate()?;
    let mut keyed = Vec::with_capacity(pc.len());
    for (i, p) in pc.points.iter().enumerate() {
        keyed.push((spec.index_of([p[0], p[1], p[2]])?, i));
    }
    keyed.sort_unstable();
    let mut indices = Vec::new();
    let mut counts = Vec::new();
    let mut data = Vec::new();
    let mut k = 0;
    while k < keyed.len() {
        let key = keyed[k].0;
        let mut acc = [0.0; 4];
        let start = k;
        while k < keyed.len() && keyed[k].0 == key {
            let p = pc.points[keyed[k].1];
            for c in 0..4 {
                acc[c] += p[c];
            }
            k += 1;
        }
        let n = (k - start) as f64;
        indices.push(key);
        counts.push(k - start);
        data.extend(acc.iter().map(|a| a / n));
    }
    let features = Tensor::from_vec(indices.len(), 4, data)?;
    Ok((SparseVoxelTensor { spec: *spec, stride: 1, indices, features }, counts))
}

pub fn voxelize(pc: &PointCloud, spec: &VoxelGridSpec) -> Result<SparseVoxelTensor> {
    voxelize_with_counts(pc, spec).map(|(t, _)| t)
}
