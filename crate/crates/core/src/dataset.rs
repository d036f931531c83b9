//! KITTI-style scene directories: `velodyne/<id>.bin`, `label_2/<id>.txt`
//! and optional `calib/<id>.txt`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{frame_calib, frame_ids};
use crate::kitti::{self, Calib};
use crate::scene::{load_kitti_bin, write_kitti_bin, GroundTruth, PointCloud};

#[derive(Debug, Clone)]
pub struct Scene {
    pub id: String,
    pub cloud: PointCloud,
    pub gt: GroundTruth,
    pub calib: Calib,
}

/// Frame ids present in `velodyne/`, sorted.
pub fn scene_ids(dir: &Path) -> Result<Vec<String>> {
    let v = dir.join("velodyne");
    let mut ids = Vec::new();
    for e in fs::read_dir(&v).map_err(|e| Error::io(&v, e))? {
        let p = e.map_err(|e| Error::io(&v, e))?.path();
        if p.extension().is_some_and(|x| x == "bin") {
            if let Some(s) = p.file_stem().and_then(|s| s.to_str()) {
                ids.push(s.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Loads one frame. A missing label file means no objects; labels of types
/// outside `class_names` are dropped.
pub fn load_scene(dir: &Path, id: &str, class_names: &[String]) -> Result<Scene> {
    let cloud = load_kitti_bin(&dir.join("velodyne").join(format!("{id}.bin")))?;
    let calib = frame_calib(dir, id)?;
    let lp = dir.join("label_2").join(format!("{id}.txt"));
    let objs = if lp.is_file() { kitti::read_objects(&lp)? } else { Vec::new() };
    let mut gt = GroundTruth::default();
    for (c, b, _) in kitti::objects_to_boxes(&objs, class_names, &calib) {
        gt.boxes.push(b);
        gt.class_ids.push(c);
    }
    Ok(Scene { id: id.to_string(), cloud, gt, calib })
}

pub fn load_dataset(dir: &Path, class_names: &[String]) -> Result<Vec<Scene>> {
    scene_ids(dir)?.iter().map(|id| load_scene(dir, id, class_names)).collect()
}

/// Writes a frame with the default calibration (no calib file).
pub fn write_scene(dir: &Path, id: &str, cloud: &PointCloud, gt: &GroundTruth, class_names: &[String]) -> Result<()> {
    for sub in ["velodyne", "label_2"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    write_kitti_bin(&dir.join("velodyne").join(format!("{id}.bin")), cloud)?;
    let calib = Calib::default();
    let mut objs = Vec::with_capacity(gt.len());
    for (b, &c) in gt.boxes.iter().zip(&gt.class_ids) {
        let name = class_names.get(c).ok_or_else(|| Error::Invalid(format!("class id {c} has no name")))?;
        objs.push(kitti::box_to_object(b, name, None, &calib));
    }
    kitti::write_objects(&dir.join("label_2").join(format!("{id}.txt")), &objs)
}

/// Label ids under `dir/label_2` (or `dir` itself).
pub fn label_ids(dir: &Path) -> Result<Vec<String>> {
    let sub = dir.join("label_2");
    frame_ids(if sub.is_dir() { &sub } else { dir })
}
