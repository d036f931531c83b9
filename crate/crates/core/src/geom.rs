//! Yaw-rotated 3D boxes: corners, containment, canonical frames, and exact
//! rotated IoU through convex polygon clipping in the ground plane.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Xyz = [f64; 3];

/// Vertices closer than this (meters) are merged during clipping.
const VERTEX_EPS: f64 = 1e-9;
/// Rectangles with a smaller footprint are treated as degenerate.
const AREA_EPS: f64 = 1e-12;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    if theta > -PI && theta <= PI {
        return theta;
    }
    let t = theta.rem_euclid(2.0 * PI);
    if t > PI {
        t - 2.0 * PI
    } else {
        t
    }
}

/// Box parameterized by its center, size along its own axes, and rotation
/// about +Z. `l` runs along the heading, `w` across it, `h` vertically.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: Xyz,
    pub size: Xyz,
    pub yaw: f64,
}

impl Box3D {
    pub fn new(center: Xyz, size: Xyz, yaw: f64) -> Self {
        Box3D { center, size, yaw }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.center.iter().all(|v| v.is_finite()) || !self.yaw.is_finite() {
            return Err(Error::Invalid(format!("non-finite box {self:?}")));
        }
        if self.size.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Invalid(format!("box size must be positive: {:?}", self.size)));
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    pub fn bev_area(&self) -> f64 {
        self.size[0] * self.size[1]
    }

    /// Same box with yaw folded into `(-pi, pi]`.
    pub fn normalized(mut self) -> Self {
        self.yaw = wrap_angle(self.yaw);
        self
    }

    /// Grows every side by `margin` (so each extent grows by `2 * margin`).
    pub fn expanded(&self, margin: f64) -> Self {
        let mut b = *self;
        for s in &mut b.size {
            *s += 2.0 * margin;
        }
        b
    }

    /// Applies a rotation about the world Z axis followed by a translation.
    pub fn rigid(&self, rot: f64, translation: Xyz) -> Self {
        let p = rotate_z(self.center, rot);
        Box3D {
            center: [p[0] + translation[0], p[1] + translation[1], p[2] + translation[2]],
            size: self.size,
            yaw: wrap_angle(self.yaw + rot),
        }
    }

    pub fn z_range(&self) -> (f64, f64) {
        let hz = self.size[2] / 2.0;
        (self.center[2] - hz, self.center[2] + hz)
    }

    /// Footprint rectangle, counter-clockwise viewed from +Z.
    pub fn bev_polygon(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.size[0] / 2.0, self.size[1] / 2.0);
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[x, y]| [c * x - s * y + self.center[0], s * x + c * y + self.center[1]])
    }
}

pub fn rotate_z(p: Xyz, theta: f64) -> Xyz {
    let (s, c) = theta.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]
}

/// Eight corners: the bottom face counter-clockwise viewed from +Z starting at
/// (+l/2, +w/2), then the top face in the same order.
pub fn corners(b: &Box3D) -> [Xyz; 8] {
    let (hl, hw, hh) = (b.size[0] / 2.0, b.size[1] / 2.0, b.size[2] / 2.0);
    let footprint = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
    let mut out = [[0.0; 3]; 8];
    for (i, z) in [-hh, hh].into_iter().enumerate() {
        for (j, [x, y]) in footprint.into_iter().enumerate() {
            let r = rotate_z([x, y, z], b.yaw);
            out[4 * i + j] = [r[0] + b.center[0], r[1] + b.center[1], r[2] + b.center[2]];
        }
    }
    out
}

/// Expresses a world point in the box frame: `R(-yaw) * (p - center)`.
pub fn to_canonical(b: &Box3D, p: Xyz) -> Xyz {
    let d = [p[0] - b.center[0], p[1] - b.center[1], p[2] - b.center[2]];
    rotate_z(d, -b.yaw)
}

pub fn from_canonical(b: &Box3D, q: Xyz) -> Xyz {
    let r = rotate_z(q, b.yaw);
    [r[0] + b.center[0], r[1] + b.center[1], r[2] + b.center[2]]
}

pub fn canonicalize(b: &Box3D, pts: &[Xyz]) -> Vec<Xyz> {
    pts.iter().map(|&p| to_canonical(b, p)).collect()
}

/// Slack on each face so a box's own corners, after rounding, test inside.
pub const FACE_EPS: f64 = 1e-9;

/// Closed-face containment: points on a face count as inside.
pub fn contains(b: &Box3D, p: Xyz) -> bool {
    let q = to_canonical(b, p);
    (0..3).all(|k| q[k].abs() <= b.size[k] / 2.0 + FACE_EPS)
}

/// Precomputed containment test for scanning many points against one box.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BoxTester {
    center: Xyz,
    half: Xyz,
    sin: f64,
    cos: f64,
}

impl BoxTester {
    pub(crate) fn new(b: &Box3D) -> Self {
        let (sin, cos) = b.yaw.sin_cos();
        BoxTester {
            center: b.center,
            half: b.size.map(|s| s / 2.0 + FACE_EPS),
            sin,
            cos,
        }
    }

    #[inline]
    pub(crate) fn contains(&self, p: Xyz) -> bool {
        let dz = p[2] - self.center[2];
        if dz.abs() > self.half[2] {
            return false;
        }
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        // R(-yaw)
        let x = self.cos * dx + self.sin * dy;
        let y = -self.sin * dx + self.cos * dy;
        x.abs() <= self.half[0] && y.abs() <= self.half[1]
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        acc += a[0] * b[1] - a[1] * b[0];
    }
    acc.abs() / 2.0
}

fn dedup_vertices(poly: &mut Vec<[f64; 2]>) {
    let close = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).hypot(a[1] - b[1]) < VERTEX_EPS;
    poly.dedup_by(|a, b| close(*a, *b));
    while poly.len() > 1 && close(poly[0], poly[poly.len() - 1]) {
        poly.pop();
    }
}

/// Sutherland-Hodgman clipping of `subject` against a convex counter-clockwise
/// `clip` polygon.
pub fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let e0 = clip[i];
        let e1 = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(e0, e1, cur) >= 0.0;
            let prev_in = cross(e0, e1, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(segment_line_intersection(prev, cur, e0, e1));
                }
                output.push(cur);
            } else if prev_in {
                output.push(segment_line_intersection(prev, cur, e0, e1));
            }
        }
        dedup_vertices(&mut output);
    }
    output
}

fn segment_line_intersection(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let cp = cross(a, b, p);
    let cq = cross(a, b, q);
    let denom = cp - cq;
    if denom.abs() < f64::MIN_POSITIVE {
        return q;
    }
    let t = cp / denom;
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Overlap value together with whether either input was degenerate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overlap {
    pub iou: f64,
    pub degenerate: bool,
}

/// Area of the intersection of the two footprints.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    // Circumscribed-circle rejection keeps NMS over thousands of boxes cheap.
    let ra = 0.5 * a.size[0].hypot(a.size[1]);
    let rb = 0.5 * b.size[0].hypot(b.size[1]);
    let dc = (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1]);
    if dc > ra + rb {
        return 0.0;
    }
    let pa = a.bev_polygon();
    let pb = b.bev_polygon();
    polygon_area(&clip_polygon(&pa, &pb))
}

pub fn iou_bev_checked(a: &Box3D, b: &Box3D) -> Overlap {
    let (aa, ab) = (a.bev_area(), b.bev_area());
    if aa < AREA_EPS || ab < AREA_EPS {
        log::debug!("degenerate footprint in iou_bev: {a:?} {b:?}");
        return Overlap { iou: 0.0, degenerate: true };
    }
    let inter = bev_intersection_area(a, b);
    let union = aa + ab - inter;
    let iou = if union > 0.0 { (inter / union).clamp(0.0, 1.0) } else { 0.0 };
    Overlap { iou, degenerate: false }
}

pub fn iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    iou_bev_checked(a, b).iou
}

pub fn iou_3d_checked(a: &Box3D, b: &Box3D) -> Overlap {
    let (va, vb) = (a.volume(), b.volume());
    if a.bev_area() < AREA_EPS || b.bev_area() < AREA_EPS || va < AREA_EPS || vb < AREA_EPS {
        log::debug!("degenerate box in iou_3d: {a:?} {b:?}");
        return Overlap { iou: 0.0, degenerate: true };
    }
    let (a0, a1) = a.z_range();
    let (b0, b1) = b.z_range();
    let dz = (a1.min(b1) - a0.max(b0)).max(0.0);
    if dz == 0.0 {
        return Overlap { iou: 0.0, degenerate: false };
    }
    let inter = bev_intersection_area(a, b) * dz;
    let union = va + vb - inter;
    let iou = if union > 0.0 { (inter / union).clamp(0.0, 1.0) } else { 0.0 };
    Overlap { iou, degenerate: false }
}

pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    iou_3d_checked(a, b).iou
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloIou {
    pub iou: f64,
    pub stderr: f64,
    pub union_samples: u64,
}

/// Volume-sampling estimate of the 3D IoU. Samples are uniform over the
/// axis-aligned hull of both boxes; the estimate is the fraction of samples in
/// the union that fall in both boxes.
pub fn iou_3d_montecarlo<R: Rng + ?Sized>(a: &Box3D, b: &Box3D, samples: u64, rng: &mut R) -> MonteCarloIou {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for c in corners(a).iter().chain(corners(b).iter()) {
        for k in 0..3 {
            lo[k] = lo[k].min(c[k]);
            hi[k] = hi[k].max(c[k]);
        }
    }
    let (ta, tb) = (BoxTester::new(a), BoxTester::new(b));
    let (mut n_union, mut n_both) = (0u64, 0u64);
    for _ in 0..samples.max(1) {
        let p = [
            lo[0] + rng.random::<f64>() * (hi[0] - lo[0]),
            lo[1] + rng.random::<f64>() * (hi[1] - lo[1]),
            lo[2] + rng.random::<f64>() * (hi[2] - lo[2]),
        ];
        let (ia, ib) = (ta.contains(p), tb.contains(p));
        if ia || ib {
            n_union += 1;
        }
        if ia && ib {
            n_both += 1;
        }
    }
    if n_union == 0 {
        return MonteCarloIou { iou: 0.0, stderr: 0.0, union_samples: 0 };
    }
    let p = n_both as f64 / n_union as f64;
    MonteCarloIou {
        iou: p,
        stderr: (p * (1.0 - p) / n_union as f64).sqrt(),
        union_samples: n_union,
    }
}

/// A random box and a second one placed near it, so that most pairs overlap.
pub fn random_box_pair<R: Rng + ?Sized>(rng: &mut R) -> (Box3D, Box3D) {
    let one = |rng: &mut R, c: Xyz| {
        Box3D::new(
            c,
            [rng.random_range(0.5..5.0), rng.random_range(0.5..3.0), rng.random_range(0.5..2.5)],
            rng.random_range(-PI..PI),
        )
    };
    let c = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0)];
    let a = one(rng, c);
    let off = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0)];
    let b = one(rng, [a.center[0] + off[0], a.center[1] + off[1], a.center[2] + off[2]]);
    (a, b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IouCheck {
    pub trials: usize,
    pub max_abs_err: f64,
    pub mean_abs_err: f64,
    /// Trial index of the largest disagreement.
    pub worst: usize,
}

/// Exact 3D IoU against the sampling estimate on `trials` random pairs.
pub fn iou_check(trials: usize, samples: u64, seed: u64) -> IouCheck {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = IouCheck { trials, max_abs_err: 0.0, mean_abs_err: 0.0, worst: 0 };
    for t in 0..trials {
        let (a, b) = random_box_pair(&mut rng);
        let err = (iou_3d(&a, &b) - iou_3d_montecarlo(&a, &b, samples, &mut rng).iou).abs();
        out.mean_abs_err += err / trials.max(1) as f64;
        if err > out.max_abs_err {
            out.max_abs_err = err;
            out.worst = t;
        }
    }
    out
}
