//! Stereo disparity estimation from rectified image pairs.
//!
//! Pipeline: a siamese feature network gives quarter-resolution features,
//! a group-wise correlation cost volume is re-weighted by axis attention
//! with bidirectional selective scans and aggregated by a small 3-D U-Net,
//! and a wavelet-filtered context feature drives a residual refinement.
//! Three disparity estimates are produced and supervised: before
//! aggregation (`d_f`), after aggregation (`d_cg`) and after refinement
//! (`d_dr`).

pub mod aggregation;
pub mod cost_volume;
pub mod dataset;
mod error;
pub mod feature_net;
pub mod hfdo;
pub mod kv;
pub mod layers;
pub mod loss;
pub mod mca;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod selftest;
pub mod train;

pub use error::{Error, Result};
pub use model::{ModelConfig, Outputs, StereoNet};
