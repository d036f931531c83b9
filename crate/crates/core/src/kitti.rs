//! KITTI label/result text files and the camera <-> LiDAR box conversion.
//!
//! Each line: `type trunc occ alpha x1 y1 x2 y2 h w l x y z ry [score]` with
//! location at the bottom center of the box in rectified camera coordinates.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{wrap_angle, Box3D, Xyz};

/// One line of a label or result file, fields as written.
#[derive(Debug, Clone, PartialEq)]
pub struct KittiObject {
    pub kind: String,
    pub truncation: f64,
    pub occlusion: i32,
    pub alpha: f64,
    pub bbox: [f64; 4],
    /// `h w l`
    pub dims: [f64; 3],
    /// Bottom-center location in the rectified camera frame.
    pub location: Xyz,
    pub rotation_y: f64,
    pub score: Option<f64>,
}

pub fn parse_line(line: &str, lineno: usize) -> Result<KittiObject> {
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() != 15 && f.len() != 16 {
        return Err(Error::Parse { line: lineno, msg: format!("expected 15 or 16 fields, found {}", f.len()) });
    }
    let num = |i: usize| -> Result<f64> {
        f[i].parse::<f64>().map_err(|e| Error::Parse { line: lineno, msg: format!("field {i} {:?}: {e}", f[i]) })
    };
    let occlusion = f[2]
        .parse::<f64>()
        .map_err(|e| Error::Parse { line: lineno, msg: format!("occlusion {:?}: {e}", f[2]) })? as i32;
    Ok(KittiObject {
        kind: f[0].to_string(),
        truncation: num(1)?,
        occlusion,
        alpha: num(3)?,
        bbox: [num(4)?, num(5)?, num(6)?, num(7)?],
        dims: [num(8)?, num(9)?, num(10)?],
        location: [num(11)?, num(12)?, num(13)?],
        rotation_y: num(14)?,
        score: if f.len() == 16 { Some(num(15)?) } else { None },
    })
}

pub fn parse_objects(text: &str) -> Result<Vec<KittiObject>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, i + 1))
        .collect()
}

/// Formats with shortest round-trip float representations so parsing the
/// output gives back the same values bit for bit.
pub fn format_object(o: &KittiObject) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "{} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
        o.kind,
        o.truncation,
        o.occlusion,
        o.alpha,
        o.bbox[0],
        o.bbox[1],
        o.bbox[2],
        o.bbox[3],
        o.dims[0],
        o.dims[1],
        o.dims[2],
        o.location[0],
        o.location[1],
        o.location[2],
        o.rotation_y
    );
    if let Some(sc) = o.score {
        let _ = write!(s, " {sc}");
    }
    s
}

pub fn format_objects(objs: &[KittiObject]) -> String {
    objs.iter().map(|o| format_object(o) + "\n").collect()
}

pub fn read_objects(path: &Path) -> Result<Vec<KittiObject>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_objects(&text)
}

pub fn write_objects(path: &Path, objs: &[KittiObject]) -> Result<()> {
    fs::write(path, format_objects(objs)).map_err(|e| Error::io(path, e))
}

/// Rigid LiDAR -> rectified camera transform: `p_rect = R0 (R p + t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calib {
    pub r0_rect: [[f64; 3]; 3],
    pub tr_velo_to_cam: [[f64; 4]; 3],
}

impl Default for Calib {
    /// Pure axis permutation: `x_cam = -y`, `y_cam = -z`, `z_cam = x`.
    fn default() -> Self {
        Calib {
            r0_rect: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            tr_velo_to_cam: [[0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, 0.0], [1.0, 0.0, 0.0, 0.0]],
        }
    }
}

impl Calib {
    /// Reads `R0_rect` and `Tr_velo_to_cam`; other keys are ignored.
    pub fn parse(text: &str) -> Result<Calib> {
        let mut r0 = None;
        let mut tr = None;
        for (i, line) in text.lines().enumerate() {
            let Some((key, rest)) = line.split_once(':') else { continue };
            let vals = || -> Result<Vec<f64>> {
                rest.split_whitespace()
                    .map(|v| v.parse::<f64>().map_err(|e| Error::Parse { line: i + 1, msg: format!("{key}: {e}") }))
                    .collect()
            };
            match key.trim() {
                "R0_rect" | "R_rect" => {
                    let v = vals()?;
                    if v.len() != 9 {
                        return Err(Error::Parse { line: i + 1, msg: format!("R0_rect needs 9 values, got {}", v.len()) });
                    }
                    r0 = Some(std::array::from_fn(|r| std::array::from_fn(|c| v[3 * r + c])));
                }
                "Tr_velo_to_cam" | "Tr_velo_cam" => {
                    let v = vals()?;
                    if v.len() != 12 {
                        return Err(Error::Parse { line: i + 1, msg: format!("Tr_velo_to_cam needs 12 values, got {}", v.len()) });
                    }
                    tr = Some(std::array::from_fn(|r| std::array::from_fn(|c| v[4 * r + c])));
                }
                _ => {}
            }
        }
        match (r0, tr) {
            (Some(r0_rect), Some(tr_velo_to_cam)) => Ok(Calib { r0_rect, tr_velo_to_cam }),
            _ => Err(Error::Parse { line: 0, msg: "calibration lacks R0_rect or Tr_velo_to_cam".into() }),
        }
    }

    pub fn load(path: &Path) -> Result<Calib> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Calib::parse(&text)
    }

    fn rot(&self) -> [[f64; 3]; 3] {
        let t = &self.tr_velo_to_cam;
        std::array::from_fn(|r| std::array::from_fn(|c| (0..3).map(|k| self.r0_rect[r][k] * t[k][c]).sum()))
    }

    fn trans(&self) -> Xyz {
        let t = &self.tr_velo_to_cam;
        std::array::from_fn(|r| (0..3).map(|k| self.r0_rect[r][k] * t[k][3]).sum())
    }

    pub fn lidar_to_cam(&self, p: Xyz) -> Xyz {
        let (m, t) = (self.rot(), self.trans());
        std::array::from_fn(|r| m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2] + t[r])
    }

    /// Inverse of [`Calib::lidar_to_cam`]. The combined rotation is assumed
    /// orthonormal, which holds for real KITTI calibrations to ~1e-6.
    pub fn cam_to_lidar(&self, p: Xyz) -> Xyz {
        let (m, t) = (self.rot(), self.trans());
        let d = [p[0] - t[0], p[1] - t[1], p[2] - t[2]];
        std::array::from_fn(|c| m[0][c] * d[0] + m[1][c] * d[1] + m[2][c] * d[2])
    }

    fn dir_cam_to_lidar(&self, d: Xyz) -> Xyz {
        let m = self.rot();
        std::array::from_fn(|c| m[0][c] * d[0] + m[1][c] * d[1] + m[2][c] * d[2])
    }

    fn dir_lidar_to_cam(&self, d: Xyz) -> Xyz {
        let m = self.rot();
        std::array::from_fn(|r| m[r][0] * d[0] + m[r][1] * d[1] + m[r][2] * d[2])
    }
}

/// Camera-frame object to a LiDAR-frame box (center, `l w h`, yaw).
pub fn object_to_box(o: &KittiObject, calib: &Calib) -> Box3D {
    let [h, w, l] = o.dims;
    let bottom = calib.cam_to_lidar(o.location);
    let (s, c) = o.rotation_y.sin_cos();
    let heading = calib.dir_cam_to_lidar([c, 0.0, -s]);
    Box3D::new([bottom[0], bottom[1], bottom[2] + h / 2.0], [l, w, h], wrap_angle(heading[1].atan2(heading[0])))
}

pub fn box_to_object(b: &Box3D, kind: &str, score: Option<f64>, calib: &Calib) -> KittiObject {
    let [l, w, h] = b.size;
    let loc = calib.lidar_to_cam([b.center[0], b.center[1], b.center[2] - h / 2.0]);
    let (s, c) = b.yaw.sin_cos();
    let d = calib.dir_lidar_to_cam([c, s, 0.0]);
    let ry = wrap_angle((-d[2]).atan2(d[0]));
    let alpha = wrap_angle(ry - loc[0].atan2(loc[2]));
    KittiObject {
        kind: kind.to_string(),
        truncation: 0.0,
        occlusion: 0,
        alpha,
        bbox: [0.0, 0.0, 0.0, 0.0],
        dims: [h, w, l],
        location: loc,
        rotation_y: ry,
        score,
    }
}

/// Keeps objects whose type is in `class_names`, mapping to class ids.
pub fn objects_to_boxes(objs: &[KittiObject], class_names: &[String], calib: &Calib) -> Vec<(usize, Box3D, Option<f64>)> {
    objs.iter()
        .filter_map(|o| {
            let cls = class_names.iter().position(|n| n == &o.kind)?;
            Some((cls, object_to_box(o, calib), o.score))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    const LINE: &str = "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59";

    #[test]
    fn parse_label_line() {
        let o = parse_line(LINE, 1).unwrap();
        assert_eq!(o.kind, "Car");
        assert_eq!(o.dims, [1.65, 1.67, 3.64]);
        assert_eq!(o.location, [-0.65, 1.71, 46.70]);
        assert_eq!(o.rotation_y, -1.59);
        assert_eq!(o.score, None);
        assert!(parse_line("Car 1 2", 3).is_err());
    }

    #[test]
    fn default_calib_conversion() {
        let o = parse_line(LINE, 1).unwrap();
        let b = object_to_box(&o, &Calib::default());
        // lidar x = z_cam, y = -x_cam, z = -y_cam + h/2
        assert_abs_diff_eq!(b.center[0], 46.70, epsilon = 1e-12);
        assert_abs_diff_eq!(b.center[1], 0.65, epsilon = 1e-12);
        assert_abs_diff_eq!(b.center[2], -1.71 + 1.65 / 2.0, epsilon = 1e-12);
        assert_eq!(b.size, [3.64, 1.67, 1.65]);
        assert_abs_diff_eq!(b.yaw, wrap_angle(1.59 - PI / 2.0), epsilon = 1e-12);
    }

    #[test]
    fn result_text_round_trips_exactly() {
        let b = Box3D::new([12.345678901, -3.3, -0.9], [3.9, 1.6, 1.56], 0.123456789);
        let o = box_to_object(&b, "Car", Some(0.87654321), &Calib::default());
        let back = parse_objects(&format_objects(&[o.clone()])).unwrap();
        assert_eq!(back, vec![o.clone()]);
        let b2 = object_to_box(&back[0], &Calib::default());
        for k in 0..3 {
            assert_abs_diff_eq!(b2.center[k], b.center[k], epsilon = 1e-12);
            assert_abs_diff_eq!(b2.size[k], b.size[k], epsilon = 1e-12);
        }
        assert_abs_diff_eq!(b2.yaw, b.yaw, epsilon = 1e-12);
    }

    #[test]
    fn calib_file_with_translation() {
        let text = "P0: 1 0 0 0 0 1 0 0 0 0 1 0\n\
                    R0_rect: 0.9999 0.0098 -0.0074 -0.0099 0.9999 -0.0043 0.0074 0.0044 1.0\n\
                    Tr_velo_to_cam: 0.0 -1.0 0.0 -0.004 0.0 0.0 -1.0 -0.076 1.0 0.0 0.0 -0.27\n";
        let c = Calib::parse(text).unwrap();
        let p = [10.0, 2.0, -1.0];
        let q = c.cam_to_lidar(c.lidar_to_cam(p));
        for k in 0..3 {
            // R0 here is only orthonormal to ~1e-4
            assert_abs_diff_eq!(q[k], p[k], epsilon = 5e-3);
        }
        assert!(Calib::parse("P0: 1 2 3").is_err());
    }

    #[test]
    fn unknown_classes_are_skipped() {
        let objs = parse_objects(&format!("{LINE}\nDontCare -1 -1 -10 0 0 0 0 -1 -1 -1 -1000 -1000 -1000 -10\n")).unwrap();
        let kept = objects_to_boxes(&objs, &["Car".to_string()], &Calib::default());
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].0, 0);
    }
}
