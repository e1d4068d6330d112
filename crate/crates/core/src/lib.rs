//! Semantic-Gaussian occupancy toolkit.
//!
//! The scene is a set of 3D Gaussians carrying opacity and class
//! distributions, optionally organized under sparse queries that each anchor
//! a group of child Gaussians. The crate provides:
//!
//! * differentiable Gaussian-to-voxel splatting, in a naive reference form
//!   and a cache-aware blocked form with matching results;
//! * furthest-point sampling, noised query initialization, and the denoising
//!   plus depth/RGB rendering losses used for geometry pretraining;
//! * per-ray peak-response compositing for depth and RGB rendering, and
//!   velocity/ego warping for neighbor-keyframe supervision;
//! * streaming query propagation (separation-constrained top-k and a fixed
//!   capacity frame queue);
//! * occupancy metrics: IoU, mIoU, and ray-level IoU with depth thresholds;
//! * synthetic scene generation and a two-stage fitting pipeline that
//!   optimizes query/Gaussian parameters directly with Adam.

pub mod blocked;
pub mod error;
pub mod fit;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod propagation;
pub mod quat;
pub mod render;
pub mod sampling;
pub mod scene;
pub mod splat;
pub mod types;

pub use error::{Error, Result};
