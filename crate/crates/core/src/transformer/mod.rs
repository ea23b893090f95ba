//! Two-level region/point encoder and the cross-attention decoder.
//!
//! The encoder splits a BEV map into `N` regions of `R×R` cells, each cut
//! into `R'×R'` point tokens. Point tokens attend within their region, are
//! projected into per-region memories, and the memories (plus a class token
//! at row 0) attend to each other. The decoder lets search regions attend to
//! template regions.

mod attention;
mod decoder;
mod encoder;

use serde::{Deserialize, Serialize};

pub use attention::{attention, Ffn, Mha};
pub use decoder::{Decoder, DecoderOutput};
pub use encoder::{region_token_indices, split_regions, Encoder, EncoderOutput, RegionGeometry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    /// Region side `R` in BEV cells.
    pub region_size: usize,
    /// Point tokens per region side `R'`.
    pub point_grid: usize,
    /// Region token width `D`.
    pub model_dim: usize,
    /// Point token width `S`.
    pub point_dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// FFN hidden width as a multiple of the token width.
    pub ffn_ratio: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            region_size: 4,
            point_grid: 2,
            model_dim: 64,
            point_dim: 64,
            heads: 2,
            layers: 1,
            ffn_ratio: 2,
        }
    }
}

impl TransformerConfig {
    /// 32×32 BEV map: `R = 16`, `R' = 4`, 8 heads.
    pub fn full_scale() -> Self {
        Self {
            region_size: 16,
            point_grid: 4,
            heads: 8,
            ..Self::default()
        }
    }
}
