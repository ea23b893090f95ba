//! Point-cloud single-object tracking with a two-level region/point
//! transformer fusing Siamese BEV features.
//!
//! Pipeline: [`scene`] (synthetic sequences, cropping, voxelisation) →
//! [`backbone`] (shared 3-D/2-D conv stack) → [`transformer`] (encoder and
//! cross-attention decoder) → [`fusion`] (region weighting and depthwise
//! cross-correlation) → [`heads`] (center-based regression and losses) →
//! [`tracker`] (tracking loop, OPE metrics, training, ablations).
//! [`config`] gathers every setting into one JSON document; [`export`]
//! dumps intermediate maps for plotting.

pub mod backbone;
pub mod config;
pub mod error;
pub mod export;
pub mod fusion;
pub mod heads;
pub mod model;
pub mod scene;
pub mod tensor;
pub mod tracker;
pub mod transformer;

pub use error::{Error, Result};
