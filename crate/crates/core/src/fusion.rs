//! Region weighting of BEV maps and depthwise cross-correlation between the
//! search and template branches.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Init, Linear, ParamId, ParamStore, Var};

/// Fully connected `D → 1` projection of region tokens to one weight each.
#[derive(Debug, Clone)]
pub struct RegionAttention {
    pub proj: Linear,
    /// Squash weights through a sigmoid. Off by default.
    pub sigmoid: bool,
}

impl RegionAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, sigmoid: bool, rng: &mut R) -> Result<Self> {
        // starts close to unit weights so the maps pass through untouched
        let weight = store.init(&format!("{name}.weight"), &[dim, 1], Init::Normal(0.01), rng)?;
        let bias = store.init(&format!("{name}.bias"), &[1], Init::Constant(1.0), rng)?;
        Ok(Self {
            proj: Linear {
                weight,
                bias: Some(bias),
                in_dim: dim,
                out_dim: 1,
            },
            sigmoid,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.proj.params()
    }

    /// `regions: N × D` without the class token → `N × 1`.
    pub fn forward(&self, g: &mut Graph, regions: Var) -> Result<Var> {
        let w = self.proj.forward(g, regions)?;
        Ok(if self.sigmoid { g.sigmoid(w) } else { w })
    }
}

/// Multiplies every cell of region `i` (row-major `R×R` blocks) by `w[i]`.
pub fn apply_region_weights(g: &mut Graph, map: Var, weights: Var, region_size: usize) -> Result<Var> {
    let shape = g.shape(map).to_vec();
    if shape.len() != 3 {
        return Err(Error::dim("apply_region_weights", &shape, g.shape(weights)));
    }
    let blocks = g.unfold_blocks(map, region_size, region_size)?;
    if g.value(weights).len() != g.shape(blocks)[0] {
        return Err(Error::Config(format!(
            "{} region weights for a map with {} regions",
            g.value(weights).len(),
            g.shape(blocks)[0]
        )));
    }
    let scaled = g.mul_rows(blocks, weights)?;
    g.fold_blocks(scaled, &shape, region_size, region_size)
}

/// `sim[f] = Σ_{x,y} search[x,y,f] · template[x,y,f]`, shape `[1, F]`.
pub fn depthwise_xcorr(g: &mut Graph, search: Var, template: Var) -> Result<Var> {
    let shape = g.shape(search).to_vec();
    if shape.len() != 3 || g.shape(template) != shape {
        return Err(Error::dim("depthwise_xcorr", &shape, g.shape(template)));
    }
    let prod = g.mul(search, template)?;
    let flat = g.reshape(prod, &[shape[0] * shape[1], shape[2]])?;
    g.sum_axis(flat, 0)
}

/// Per-channel broadcast of the similarity over the search map.
pub fn fuse(g: &mut Graph, search: Var, sim: Var) -> Result<Var> {
    g.mul_channels(search, sim)
}
