//! Shared-weight Siamese feature extractor: three stride-2 3-D conv blocks,
//! height folded into channels, then two 2-D conv blocks.
//!
//! The 3-D stack is dense rather than sparse; output geometry is the same.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{VoxelConfig, VoxelGrid, VOXEL_FEATURES};
use crate::tensor::{Graph, Init, LayerNorm, ParamId, ParamStore, Var};

/// Total downsampling of the 3-D stack.
pub const DOWNSAMPLE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub channels_3d: [usize; 3],
    /// The last entry is the feature width F.
    pub channels_2d: [usize; 2],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels_3d: [8, 16, 32],
            channels_2d: [32, 32],
        }
    }
}

impl BackboneConfig {
    pub fn feature_dim(&self) -> usize {
        self.channels_2d[1]
    }
}

/// Placement of a BEV map in its crop frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevGeometry {
    pub extents: [usize; 2],
    /// Meters per BEV cell along x and y.
    pub stride_m: [f64; 2],
    /// Metric position of cell (0, 0)'s lower corner.
    pub origin: [f64; 2],
}

impl BevGeometry {
    pub fn from_voxel_config(config: &VoxelConfig) -> Result<Self> {
        let ext = config.extents()?;
        if ext[0] % DOWNSAMPLE != 0 || ext[1] % DOWNSAMPLE != 0 || ext[2] % DOWNSAMPLE != 0 {
            return Err(Error::Config(format!("grid extents {ext:?} are not divisible by {DOWNSAMPLE}")));
        }
        Ok(Self {
            extents: [ext[0] / DOWNSAMPLE, ext[1] / DOWNSAMPLE],
            stride_m: [0, 1].map(|d| config.voxel_size[d] * DOWNSAMPLE as f64),
            origin: [config.range_min[0], config.range_min[1]],
        })
    }

    pub fn cells(&self) -> usize {
        self.extents[0] * self.extents[1]
    }
}

/// A BEV map `[W/8, L/8, F]` on a graph, with its geometry.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    pub map: Var,
    pub geometry: BevGeometry,
}

#[derive(Debug, Clone)]
struct ConvBlock {
    weight: ParamId,
    bias: ParamId,
    norm: LayerNorm,
}

impl ConvBlock {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, kernel: &[usize], cin: usize, cout: usize, rng: &mut R) -> Result<Self> {
        let mut shape = kernel.to_vec();
        shape.extend([cin, cout]);
        let fan_in = kernel.iter().product::<usize>() * cin;
        Ok(Self {
            weight: store.init(&format!("{name}.weight"), &shape, Init::FanIn(fan_in), rng)?,
            bias: store.init(&format!("{name}.bias"), &[cout], Init::Constant(0.0), rng)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), cout, rng)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    grid_extents: [usize; 3],
    geometry: BevGeometry,
    stages_3d: Vec<ConvBlock>,
    stages_2d: Vec<ConvBlock>,
}

impl Backbone {
    pub fn new<R: Rng>(store: &mut ParamStore, config: &BackboneConfig, voxels: &VoxelConfig, rng: &mut R) -> Result<Self> {
        let geometry = BevGeometry::from_voxel_config(voxels)?;
        let grid_extents = voxels.extents()?;
        if config.channels_3d.iter().chain(&config.channels_2d).any(|&c| c == 0) {
            return Err(Error::Config("backbone channel widths must be positive".into()));
        }
        let mut stages_3d = Vec::new();
        let mut cin = VOXEL_FEATURES;
        for (i, &cout) in config.channels_3d.iter().enumerate() {
            stages_3d.push(ConvBlock::new(store, &format!("backbone.conv3d.{i}"), &[3, 3, 3], cin, cout, rng)?);
            cin = cout;
        }
        cin *= grid_extents[2] / DOWNSAMPLE;
        let mut stages_2d = Vec::new();
        for (i, &cout) in config.channels_2d.iter().enumerate() {
            stages_2d.push(ConvBlock::new(store, &format!("backbone.conv2d.{i}"), &[3, 3], cin, cout, rng)?);
            cin = cout;
        }
        Ok(Self {
            config: config.clone(),
            grid_extents,
            geometry,
            stages_3d,
            stages_2d,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn geometry(&self) -> BevGeometry {
        self.geometry
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.stages_3d
            .iter()
            .chain(&self.stages_2d)
            .flat_map(|b| [b.weight, b.bias, b.norm.gain, b.norm.bias])
            .collect()
    }

    /// Runs the stack on a `[W, L, H, 4]` feature volume already on the graph.
    pub fn forward(&self, g: &mut Graph, volume: Var) -> Result<FeatureMap> {
        let expected = [self.grid_extents[0], self.grid_extents[1], self.grid_extents[2], VOXEL_FEATURES];
        if g.shape(volume) != expected {
            return Err(Error::Config(format!(
                "voxel volume {:?} does not match the backbone grid {expected:?}",
                g.shape(volume)
            )));
        }
        let mut x = volume;
        for block in &self.stages_3d {
            let (w, b) = (g.param(block.weight), g.param(block.bias));
            x = g.conv3d(x, w, b, [2, 2, 2], [1, 1, 1])?;
            x = block.norm.forward(g, x)?;
            x = g.relu(x);
        }
        let s = g.shape(x).to_vec();
        x = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
        for block in &self.stages_2d {
            let (w, b) = (g.param(block.weight), g.param(block.bias));
            x = g.conv2d(x, w, b, 1, 1)?;
            x = block.norm.forward(g, x)?;
            x = g.relu(x);
        }
        Ok(FeatureMap {
            map: x,
            geometry: self.geometry,
        })
    }

    pub fn extract(&self, g: &mut Graph, grid: &VoxelGrid) -> Result<FeatureMap> {
        if grid.extents != self.grid_extents {
            return Err(Error::Config(format!(
                "grid extents {:?} do not match the backbone grid {:?}",
                grid.extents, self.grid_extents
            )));
        }
        let volume = g.constant(grid.features());
        self.forward(g, volume)
    }

    /// Both branches through the same parameters.
    pub fn siamese_extract(&self, g: &mut Graph, search: &VoxelGrid, template: &VoxelGrid) -> Result<(FeatureMap, FeatureMap)> {
        if !search.same_geometry(template) {
            return Err(Error::Config("search and template grids differ in geometry".into()));
        }
        Ok((self.extract(g, search)?, self.extract(g, template)?))
    }
}
