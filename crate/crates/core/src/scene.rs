//! Point clouds and ground truth: KITTI `.bin` I/O, range cropping, synthetic
//! scenes and global augmentations.

use std::f64::consts::{FRAC_PI_4, PI};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Box3D, Xyz};

/// Metric scene extent. Ranges are half-open at the upper edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneBounds {
    pub min: Xyz,
    pub max: Xyz,
}

impl SceneBounds {
    pub const KITTI: SceneBounds = SceneBounds { min: [0.0, -40.0, -3.0], max: [70.4, 40.0, 1.0] };

    pub fn new(min: Xyz, max: Xyz) -> Result<Self> {
        let b = SceneBounds { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        for k in 0..3 {
            if !self.min[k].is_finite() || !self.max[k].is_finite() || self.min[k] >= self.max[k] {
                return Err(Error::Invalid(format!("scene bounds axis {k}: [{}, {})", self.min[k], self.max[k])));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: Xyz) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] < self.max[k])
    }

    pub fn extent(&self) -> Xyz {
        [self.max[0] - self.min[0], self.max[1] - self.min[1], self.max[2] - self.min[2]]
    }
}

/// Points as `(x, y, z, reflectance)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<[f64; 4]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 4]>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn xyz(&self, i: usize) -> Xyz {
        let p = self.points[i];
        [p[0], p[1], p[2]]
    }

    pub fn xyz_all(&self) -> Vec<Xyz> {
        self.points.iter().map(|p| [p[0], p[1], p[2]]).collect()
    }

    pub fn permuted(&self, perm: &[usize]) -> PointCloud {
        PointCloud { points: perm.iter().map(|&i| self.points[i]).collect() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub boxes: Vec<Box3D>,
    pub class_ids: Vec<usize>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.boxes.len() != self.class_ids.len() {
            return Err(Error::Invalid("ground truth boxes and class ids differ in length".into()));
        }
        for b in &self.boxes {
            b.validate()?;
            if !(b.yaw > -PI && b.yaw <= PI) {
                return Err(Error::Invalid(format!("yaw {} outside (-pi, pi]", b.yaw)));
            }
        }
        Ok(())
    }
}

/// Decodes KITTI velodyne bytes: little-endian `f32` quadruples `x y z r`.
pub fn decode_kitti_bin(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() % 16 != 0 {
        let offset = (bytes.len() / 16 * 16) as u64;
        return Err(Error::Format {
            offset,
            msg: format!("{} trailing bytes after the last complete 16-byte point", bytes.len() % 16),
        });
    }
    let points = bytes
        .chunks_exact(16)
        .map(|c| {
            let f = |k: usize| f32::from_le_bytes([c[4 * k], c[4 * k + 1], c[4 * k + 2], c[4 * k + 3]]) as f64;
            [f(0), f(1), f(2), f(3)]
        })
        .collect();
    Ok(PointCloud { points })
}

pub fn encode_kitti_bin(pc: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(pc.len() * 16);
    for p in &pc.points {
        for v in p {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn load_kitti_bin(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_kitti_bin(&bytes)
}

pub fn write_kitti_bin(path: &Path, pc: &PointCloud) -> Result<()> {
    fs::write(path, encode_kitti_bin(pc)).map_err(|e| Error::io(path, e))
}

/// Keeps points with every coordinate in `[min, max)`, preserving order.
pub fn crop_to_bounds(pc: &PointCloud, b: &SceneBounds) -> PointCloud {
    PointCloud { points: pc.points.iter().copied().filter(|p| b.contains([p[0], p[1], p[2]])).collect() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthClass {
    pub class_id: usize,
    pub size_min: Xyz,
    pub size_max: Xyz,
    /// Height of the box bottom face.
    pub bottom_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub bounds: SceneBounds,
    pub num_boxes: usize,
    pub classes: Vec<SynthClass>,
    /// Points sampled on the faces of each box.
    pub points_per_box: usize,
    /// Uniform clutter, points per square meter of ground area.
    pub background_density: f64,
    /// Standard deviation of the inward surface jitter (meters).
    pub noise_std: f64,
    /// Minimum clearance between boxes and from the lateral scene edges.
    pub clearance: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            bounds: SceneBounds { min: [0.0, -12.8, -3.0], max: [25.6, 12.8, 1.0] },
            num_boxes: 3,
            classes: vec![SynthClass {
                class_id: 0,
                size_min: [3.6, 1.5, 1.45],
                size_max: [4.2, 1.75, 1.65],
                bottom_z: -1.78,
            }],
            points_per_box: 150,
            background_density: 1.0,
            noise_std: 0.03,
            clearance: 1.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        if !(self.background_density >= 0.0) || !(self.noise_std >= 0.0) || !(self.clearance >= 0.0) {
            return Err(Error::Invalid("synthetic densities and noise must be non-negative".into()));
        }
        if self.num_boxes > 0 && self.classes.is_empty() {
            return Err(Error::Invalid("boxes requested but no classes configured".into()));
        }
        for c in &self.classes {
            for k in 0..3 {
                if !(c.size_min[k] > 0.0) || c.size_max[k] < c.size_min[k] {
                    return Err(Error::Invalid(format!("class {} size range invalid", c.class_id)));
                }
            }
        }
        Ok(())
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 2000;

/// Draws a random scene. Boxes never overlap (rejection sampling); face points
/// are jittered inward so they stay inside their box.
pub fn synth_scene(spec: &SynthSpec) -> Result<(PointCloud, GroundTruth)> {
    spec.validate()?;
    if spec.num_boxes == 0 && spec.background_density == 0.0 {
        return Err(Error::EmptyScene);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let b = spec.bounds;
    let mut gt = GroundTruth::default();
    let mut attempts = 0;
    while gt.boxes.len() < spec.num_boxes {
        attempts += 1;
        if attempts > MAX_PLACEMENT_ATTEMPTS {
            return Err(Error::Invalid(format!(
                "could not place {} non-overlapping boxes in the scene bounds",
                spec.num_boxes
            )));
        }
        let cls = &spec.classes[rng.random_range(0..spec.classes.len())];
        let size: Xyz = std::array::from_fn(|k| {
            if cls.size_max[k] > cls.size_min[k] {
                rng.random_range(cls.size_min[k]..cls.size_max[k])
            } else {
                cls.size_min[k]
            }
        });
        let yaw = geom::wrap_angle(rng.random_range(-PI..PI));
        let reach = 0.5 * size[0].hypot(size[1]) + spec.clearance;
        if b.min[0] + reach >= b.max[0] - reach || b.min[1] + reach >= b.max[1] - reach {
            continue;
        }
        let cx = rng.random_range(b.min[0] + reach..b.max[0] - reach);
        let cy = rng.random_range(b.min[1] + reach..b.max[1] - reach);
        let cz = cls.bottom_z + size[2] / 2.0;
        let cand = Box3D::new([cx, cy, cz], size, yaw);
        if cz - size[2] / 2.0 < b.min[2] || cz + size[2] / 2.0 >= b.max[2] {
            return Err(Error::Invalid(format!("class {} boxes do not fit vertically in bounds", cls.class_id)));
        }
        let grown = cand.expanded(spec.clearance / 2.0);
        if gt.boxes.iter().any(|o| geom::iou_bev(&grown, &o.expanded(spec.clearance / 2.0)) > 0.0) {
            continue;
        }
        gt.boxes.push(cand);
        gt.class_ids.push(cls.class_id);
    }

    let mut points = Vec::new();
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).map_err(|e| Error::Invalid(e.to_string()))?;
    for bx in &gt.boxes {
        for _ in 0..spec.points_per_box {
            let q = sample_face_point(bx, &mut rng, &noise);
            let p = geom::from_canonical(bx, q);
            points.push([p[0], p[1], p[2], rng.random::<f64>()]);
        }
    }
    let e = b.extent();
    let n_bg = (spec.background_density * e[0] * e[1]).round() as usize;
    for _ in 0..n_bg {
        let p: Xyz = std::array::from_fn(|k| b.min[k] + rng.random::<f64>() * e[k]);
        // floating point can land exactly on the open upper edge
        if b.contains(p) {
            points.push([p[0], p[1], p[2], rng.random::<f64>()]);
        }
    }
    Ok((PointCloud { points }, gt))
}

/// Point on a face chosen with probability proportional to area, in the box's
/// canonical frame, moved inward by `|noise|`.
fn sample_face_point<R: Rng>(b: &Box3D, rng: &mut R, noise: &Normal<f64>) -> Xyz {
    let [l, w, h] = b.size;
    let half = [l / 2.0, w / 2.0, h / 2.0];
    // faces: +-x (w*h), +-y (l*h), +-z (l*w)
    let areas = [w * h, l * h, l * w];
    let total = 2.0 * areas.iter().sum::<f64>();
    let mut pick = rng.random::<f64>() * total;
    let mut axis = 2;
    for (k, a) in areas.iter().enumerate() {
        if pick < 2.0 * a {
            axis = k;
            break;
        }
        pick -= 2.0 * a;
    }
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let mut q = [0.0; 3];
    for k in 0..3 {
        q[k] = if k == axis {
            sign * (half[k] - noise.sample(rng).abs().min(half[k]))
        } else {
            rng.random_range(-half[k]..=half[k])
        };
    }
    q
}

/// Global scene transforms used as training augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Augmentation {
    /// Mirror across the X axis (`y -> -y`).
    FlipX,
    Scale(f64),
    /// Rotation about +Z, radians.
    Rotate(f64),
}

pub const SCALE_RANGE: (f64, f64) = (0.95, 1.05);
pub const ROTATION_RANGE: (f64, f64) = (-FRAC_PI_4, FRAC_PI_4);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugmentKind {
    Flip,
    Scale,
    Rotate,
}

impl Augmentation {
    /// Draws the parameter for `kind`. A flip is drawn with probability 1/2;
    /// `None` means no transform this time.
    pub fn sample<R: Rng + ?Sized>(
        kind: AugmentKind,
        rng: &mut R,
        scale_range: (f64, f64),
        rot_range: (f64, f64),
    ) -> Option<Self> {
        match kind {
            AugmentKind::Flip => rng.random::<bool>().then_some(Augmentation::FlipX),
            AugmentKind::Scale => Some(Augmentation::Scale(rng.random_range(scale_range.0..=scale_range.1))),
            AugmentKind::Rotate => Some(Augmentation::Rotate(rng.random_range(rot_range.0..=rot_range.1))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Augmentation::FlipX => Ok(()),
            Augmentation::Scale(s) if (SCALE_RANGE.0..=SCALE_RANGE.1).contains(&s) => Ok(()),
            Augmentation::Rotate(a) if (ROTATION_RANGE.0..=ROTATION_RANGE.1).contains(&a) => Ok(()),
            other => Err(Error::Invalid(format!("augmentation parameter out of range: {other:?}"))),
        }
    }

    fn point(&self, p: Xyz) -> Xyz {
        match *self {
            Augmentation::FlipX => [p[0], -p[1], p[2]],
            Augmentation::Scale(s) => [p[0] * s, p[1] * s, p[2] * s],
            Augmentation::Rotate(a) => geom::rotate_z(p, a),
        }
    }

    fn boxed(&self, b: &Box3D) -> Box3D {
        match *self {
            Augmentation::FlipX => Box3D::new(self.point(b.center), b.size, geom::wrap_angle(-b.yaw)),
            Augmentation::Scale(s) => Box3D::new(self.point(b.center), b.size.map(|v| v * s), b.yaw),
            Augmentation::Rotate(a) => b.rigid(a, [0.0; 3]),
        }
    }
}

/// Applies one transform to points and boxes consistently.
pub fn augment(pc: &PointCloud, gt: &GroundTruth, aug: Augmentation) -> Result<(PointCloud, GroundTruth)> {
    aug.validate()?;
    let points = pc
        .points
        .iter()
        .map(|p| {
            let q = aug.point([p[0], p[1], p[2]]);
            [q[0], q[1], q[2], p[3]]
        })
        .collect();
    let boxes = gt.boxes.iter().map(|b| aug.boxed(b)).collect();
    Ok((PointCloud { points }, GroundTruth { boxes, class_ids: gt.class_ids.clone() }))
}
