use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::geometry::{Point3, PointCloud};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of per-voxel input channels: mean offset (x, y, z) + normalised count.
pub const VOXEL_FEATURES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VoxelConfig {
    pub range_min: [f64; 3],
    pub range_max: [f64; 3],
    pub voxel_size: [f64; 3],
    pub max_points: usize,
}

impl Default for VoxelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl VoxelConfig {
    /// 64×64×16 grid over ±3.2 m × ±3.2 m × [−3, 1] m.
    pub fn desk() -> Self {
        Self {
            range_min: [-3.2, -3.2, -3.0],
            range_max: [3.2, 3.2, 1.0],
            voxel_size: [0.1, 0.1, 0.25],
            max_points: 5,
        }
    }

    /// 256×256×80 grid at 0.025/0.025/0.05 m.
    pub fn full_scale() -> Self {
        Self {
            range_min: [-3.2, -3.2, -3.0],
            range_max: [3.2, 3.2, 1.0],
            voxel_size: [0.025, 0.025, 0.05],
            max_points: 5,
        }
    }

    /// Grid extents `(W, L, H)`; the voxel size must divide the range.
    pub fn extents(&self) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for d in 0..3 {
            let span = self.range_max[d] - self.range_min[d];
            let vs = self.voxel_size[d];
            if !(span > 0.0 && vs > 0.0) {
                return Err(Error::Config(format!("axis {d}: empty range or voxel size")));
            }
            let ratio = span / vs;
            let n = ratio.round();
            if (ratio - n).abs() > 1e-6 || n < 1.0 {
                return Err(Error::Config(format!(
                    "axis {d}: voxel size {vs} does not divide range span {span}"
                )));
            }
            out[d] = n as usize;
        }
        if self.max_points == 0 {
            return Err(Error::Config("max_points must be positive".into()));
        }
        Ok(out)
    }

    pub fn in_range(&self, p: &Point3) -> bool {
        (0..3).all(|d| p[d] >= self.range_min[d] && p[d] < self.range_max[d])
    }

    /// Cell index of a point inside the range.
    pub fn cell_of(&self, p: &Point3, extents: [usize; 3]) -> Option<[usize; 3]> {
        if !self.in_range(p) {
            return None;
        }
        let mut cell = [0; 3];
        for d in 0..3 {
            let i = ((p[d] - self.range_min[d]) / self.voxel_size[d]).floor() as usize;
            cell[d] = i.min(extents[d] - 1);
        }
        Some(cell)
    }

    pub fn crop(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud {
            points: cloud.points.iter().copied().filter(|p| self.in_range(p)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub extents: [usize; 3],
    pub voxel_size: [f64; 3],
    pub origin: [f64; 3],
    pub max_points: usize,
    pub voxels: BTreeMap<[usize; 3], Vec<Point3>>,
}

impl VoxelGrid {
    pub fn cell_center(&self, cell: [usize; 3]) -> Point3 {
        [0, 1, 2].map(|d| self.origin[d] + (cell[d] as f64 + 0.5) * self.voxel_size[d])
    }

    pub fn occupied(&self) -> usize {
        self.voxels.len()
    }

    /// Per-voxel features `[W, L, H, 4]`: mean offset from the voxel center
    /// in voxel units, then point count / max_points. Empty voxels are zero.
    pub fn features(&self) -> Tensor {
        let [w, l, h] = self.extents;
        let mut t = Tensor::zeros(&[w, l, h, VOXEL_FEATURES]);
        let data = t.data_mut();
        for (&cell, pts) in &self.voxels {
            let center = self.cell_center(cell);
            let base = ((cell[0] * l + cell[1]) * h + cell[2]) * VOXEL_FEATURES;
            let n = pts.len() as f64;
            for d in 0..3 {
                let mean = pts.iter().map(|p| p[d]).sum::<f64>() / n;
                data[base + d] = (mean - center[d]) / self.voxel_size[d];
            }
            data[base + 3] = n / self.max_points as f64;
        }
        t
    }

    pub fn same_geometry(&self, other: &VoxelGrid) -> bool {
        self.extents == other.extents && self.voxel_size == other.voxel_size && self.origin == other.origin
    }
}

fn cmp_points(a: &Point3, b: &Point3) -> std::cmp::Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
}

/// Drops out-of-range points, buckets the rest into voxels, and randomly keeps
/// at most `max_points` per voxel. Points inside a voxel are sorted first, so
/// the result does not depend on input order except through the sampling draw.
pub fn voxelize<R: Rng>(cloud: &PointCloud, config: &VoxelConfig, rng: &mut R) -> Result<VoxelGrid> {
    let extents = config.extents()?;
    let mut voxels: BTreeMap<[usize; 3], Vec<Point3>> = BTreeMap::new();
    for p in &cloud.points {
        if let Some(cell) = config.cell_of(p, extents) {
            voxels.entry(cell).or_default().push(*p);
        }
    }
    for pts in voxels.values_mut() {
        pts.sort_by(cmp_points);
        if pts.len() > config.max_points {
            let mut keep = sample(rng, pts.len(), config.max_points).into_vec();
            keep.sort_unstable();
            *pts = keep.into_iter().map(|i| pts[i]).collect();
        }
    }
    Ok(VoxelGrid {
        extents,
        voxel_size: config.voxel_size,
        origin: config.range_min,
        max_points: config.max_points,
        voxels,
    })
}
