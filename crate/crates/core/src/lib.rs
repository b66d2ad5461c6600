//! Joint 3D vehicle detection, tracklet decoding and motion forecasting from
//! stacked bird's-eye-view LiDAR occupancy grids.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] - dense `f64` arrays with a reverse-mode tape and the handful
//!   of operators the networks need (2D/3D convolution, temporal group
//!   convolution, max-pooling, activations, losses) plus Adam and checkpoints.
//! * [`geom`] - rotated rectangles, convex clipping, IoU and NMS.
//! * [`voxel`] - ego-motion compensation and binary voxelisation.
//! * [`net`] - early/late fusion backbones, anchors, heads and box decoding.
//! * [`train`] - target assignment, hard negative mining, loss and training.
//! * [`track`] - tracklet decoding by forecast aggregation and a Hungarian
//!   frame-to-frame baseline.
//! * [`metrics`] - AP, CLEAR-MOT and forecast displacement errors.
//! * [`sim`] - synthetic BEV world, LiDAR model and dataset I/O.

pub mod error;
pub mod geom;
pub mod metrics;
pub mod net;
pub mod sim;
pub mod tensor;
pub mod track;
pub mod train;
pub mod voxel;

pub use error::{Error, Result};
