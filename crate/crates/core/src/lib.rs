//! Two-stage LiDAR 3D object detection: sparse voxel encoder and anchor RPN,
//! a residual voxel-to-point decoder that lifts voxel features back onto every
//! raw point, multi-stream 3D RoI pooling, and IoU-guided box refinement with
//! a second pooling pass that aligns the IoU estimate to the refined boxes.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod geom;
pub mod kitti;
pub mod model;
pub mod scene;
pub mod train;
pub mod roi;
pub mod rpn;
pub mod voxel;

pub use error::{Error, Result};
