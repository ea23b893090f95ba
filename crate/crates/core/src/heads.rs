//! Center-based prediction heads, their targets, and the training loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BevGeometry;
use crate::error::{Error, Result};
use crate::scene::Box3D;
use crate::tensor::{Graph, Init, ParamId, ParamStore, Tensor, Var};

pub const HEAD_LAYERS: usize = 4;
/// Output channels of the heatmap, offset, z and orientation heads.
pub const HEAD_CHANNELS: [usize; 4] = [1, 2, 1, 2];
const HEAD_NAMES: [&str; 4] = ["heatmap", "offset", "z", "orientation"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda_off: f64,
    pub lambda_z: f64,
    pub lambda_ori: f64,
    pub clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 4.0,
            lambda_off: 1.0,
            lambda_z: 1.5,
            lambda_ori: 1.0,
            clamp: 1e-6,
        }
    }
}

/// `L_heat + λ_off L_off + λ_z L_z + λ_ori L_ori`.
pub fn total_loss(parts: [f64; 4], config: &LossConfig) -> f64 {
    parts[0] + config.lambda_off * parts[1] + config.lambda_z * parts[2] + config.lambda_ori * parts[3]
}

#[derive(Debug, Clone)]
struct HeadStack {
    layers: Vec<(ParamId, ParamId)>,
}

#[derive(Debug, Clone)]
pub struct Heads {
    stacks: Vec<HeadStack>,
    width: usize,
}

/// Head outputs on a graph, each `[X, Y, C]`.
#[derive(Debug, Clone, Copy)]
pub struct PredictionMaps {
    pub heatmap: Var,
    pub offset: Var,
    pub z: Var,
    pub orientation: Var,
}

/// Head outputs as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTensors {
    pub heatmap: Tensor,
    pub offset: Tensor,
    pub z: Tensor,
    pub orientation: Tensor,
}

impl PredictionMaps {
    pub fn values(&self, g: &Graph) -> PredictionTensors {
        PredictionTensors {
            heatmap: g.value(self.heatmap).clone(),
            offset: g.value(self.offset).clone(),
            z: g.value(self.z).clone(),
            orientation: g.value(self.orientation).clone(),
        }
    }
}

impl Heads {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, width: usize, heatmap_bias: f64, rng: &mut R) -> Result<Self> {
        let mut stacks = Vec::with_capacity(4);
        for (head, &out) in HEAD_NAMES.iter().zip(&HEAD_CHANNELS) {
            let mut layers = Vec::with_capacity(HEAD_LAYERS);
            for l in 0..HEAD_LAYERS {
                let cout = if l + 1 == HEAD_LAYERS { out } else { width };
                let p = format!("{name}.{head}.conv{l}");
                let w = store.init(&format!("{p}.weight"), &[3, 3, width, cout], Init::FanIn(9 * width), rng)?;
                let bias = if l + 1 == HEAD_LAYERS && *head == "heatmap" { heatmap_bias } else { 0.0 };
                let b = store.init(&format!("{p}.bias"), &[cout], Init::Constant(bias), rng)?;
                layers.push((w, b));
            }
            stacks.push(HeadStack { layers });
        }
        Ok(Self { stacks, width })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.stacks.iter().flat_map(|s| s.layers.iter().flat_map(|&(w, b)| [w, b])).collect()
    }

    /// Last-layer `(weight, bias)` of each head in heatmap/offset/z/orientation order.
    pub fn final_layers(&self) -> [(ParamId, ParamId); 4] {
        [0, 1, 2, 3].map(|i| self.stacks[i].layers[HEAD_LAYERS - 1])
    }

    pub fn forward(&self, g: &mut Graph, map: Var) -> Result<PredictionMaps> {
        let s = g.shape(map);
        if s.len() != 3 || s[2] != self.width {
            return Err(Error::dim("heads", s, &[0, 0, self.width]));
        }
        let mut outs = Vec::with_capacity(4);
        for stack in &self.stacks {
            let mut x = map;
            for (l, &(w, b)) in stack.layers.iter().enumerate() {
                let (w, b) = (g.param(w), g.param(b));
                x = g.conv2d(x, w, b, 1, 1)?;
                if l + 1 < HEAD_LAYERS {
                    x = g.relu(x);
                }
            }
            outs.push(x);
        }
        Ok(PredictionMaps {
            heatmap: g.sigmoid(outs[0]),
            offset: outs[1],
            z: outs[2],
            orientation: outs[3],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetMaps {
    /// `[X, Y, 1]`.
    pub heatmap: Tensor,
    pub center_cell: [usize; 2],
    /// Fractional position inside `center_cell`, each in `[0, 1)`.
    pub offset: [f64; 2],
    pub z: f64,
    /// `(sin θ, cos θ)`.
    pub orientation: [f64; 2],
}

/// Heatmap value at grid distance `d` from the center cell.
pub fn heat_value(d: f64) -> f64 {
    if d == 0.0 {
        1.0
    } else if d == 1.0 {
        0.8
    } else {
        1.0 / d
    }
}

/// `None` when the label center falls outside the map.
pub fn build_targets(label: &Box3D, geo: &BevGeometry) -> Option<TargetMaps> {
    let mut cell = [0usize; 2];
    let mut offset = [0.0; 2];
    for d in 0..2 {
        let u = (label.center[d] - geo.origin[d]) / geo.stride_m[d];
        let i = u.floor();
        if !(i >= 0.0 && i < geo.extents[d] as f64) {
            return None;
        }
        cell[d] = i as usize;
        offset[d] = u - i;
    }
    let [xn, yn] = geo.extents;
    let mut heatmap = Tensor::zeros(&[xn, yn, 1]);
    let data = heatmap.data_mut();
    for x in 0..xn {
        for y in 0..yn {
            let dx = x as f64 - cell[0] as f64;
            let dy = y as f64 - cell[1] as f64;
            data[x * yn + y] = heat_value((dx * dx + dy * dy).sqrt());
        }
    }
    Some(TargetMaps {
        heatmap,
        center_cell: cell,
        offset,
        z: label.center[2],
        orientation: [label.yaw.sin(), label.yaw.cos()],
    })
}

/// Mean absolute error of `map`'s channels at one cell against `target`.
pub fn l1_at_cell(g: &mut Graph, map: Var, cell: [usize; 2], target: &[f64]) -> Result<Var> {
    let s = g.shape(map).to_vec();
    if s.len() != 3 || s[2] != target.len() || cell[0] >= s[0] || cell[1] >= s[1] {
        return Err(Error::dim("l1_at_cell", &s, &[cell[0], cell[1], target.len()]));
    }
    let base = (cell[0] * s[1] + cell[1]) * s[2];
    let picked = g.gather(map, (base..base + s[2]).collect(), &[s[2]])?;
    let t = g.constant(Tensor::new(vec![s[2]], target.to_vec())?);
    let diff = g.sub(picked, t)?;
    let abs = g.abs(diff);
    Ok(g.mean(abs))
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub heat: Var,
    pub offset: Var,
    pub z: Var,
    pub orientation: Var,
}

impl LossParts {
    pub fn values(&self, g: &Graph) -> [f64; 5] {
        [self.total, self.heat, self.offset, self.z, self.orientation].map(|v| g.scalar(v))
    }
}

pub fn loss(g: &mut Graph, preds: &PredictionMaps, targets: &TargetMaps, config: &LossConfig) -> Result<LossParts> {
    let heat = g.focal_loss(preds.heatmap, &targets.heatmap, config.alpha, config.beta, config.clamp)?;
    let offset = l1_at_cell(g, preds.offset, targets.center_cell, &targets.offset)?;
    let z = l1_at_cell(g, preds.z, targets.center_cell, &[targets.z])?;
    let orientation = l1_at_cell(g, preds.orientation, targets.center_cell, &targets.orientation)?;
    let mut total = heat;
    for (part, w) in [(offset, config.lambda_off), (z, config.lambda_z), (orientation, config.lambda_ori)] {
        let scaled = g.scale(part, w);
        total = g.add(total, scaled)?;
    }
    Ok(LossParts {
        total,
        heat,
        offset,
        z,
        orientation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    /// In the crop frame of the map.
    pub local_box: Box3D,
    pub confidence: f64,
    pub peak: [usize; 2],
}

/// Box at the heatmap argmax (ties go to the lowest row-major index).
pub fn decode_box(preds: &PredictionTensors, geo: &BevGeometry, size: [f64; 3]) -> Result<Detection> {
    let [xn, yn] = geo.extents;
    if preds.heatmap.shape() != [xn, yn, 1] {
        return Err(Error::dim("decode_box", preds.heatmap.shape(), &[xn, yn, 1]));
    }
    let (mut best, mut conf) = (0usize, f64::NEG_INFINITY);
    for (i, &v) in preds.heatmap.data().iter().enumerate() {
        if v > conf {
            best = i;
            conf = v;
        }
    }
    let peak = [best / yn, best % yn];
    let off = [preds.offset.at(&[peak[0], peak[1], 0]), preds.offset.at(&[peak[0], peak[1], 1])];
    let center = [
        (peak[0] as f64 + off[0]) * geo.stride_m[0] + geo.origin[0],
        (peak[1] as f64 + off[1]) * geo.stride_m[1] + geo.origin[1],
        preds.z.at(&[peak[0], peak[1], 0]),
    ];
    let sin = preds.orientation.at(&[peak[0], peak[1], 0]);
    let cos = preds.orientation.at(&[peak[0], peak[1], 1]);
    Ok(Detection {
        local_box: Box3D::new(center, size, sin.atan2(cos))?,
        confidence: conf,
        peak,
    })
}

/// Predictions that equal `targets` exactly (heatmap = target heatmap).
pub fn perfect_predictions(targets: &TargetMaps) -> PredictionTensors {
    let s = targets.heatmap.shape();
    let (xn, yn) = (s[0], s[1]);
    let [cx, cy] = targets.center_cell;
    let mut offset = Tensor::zeros(&[xn, yn, 2]);
    let mut z = Tensor::zeros(&[xn, yn, 1]);
    let mut orientation = Tensor::zeros(&[xn, yn, 2]);
    for c in 0..2 {
        offset.set(&[cx, cy, c], targets.offset[c]);
        orientation.set(&[cx, cy, c], targets.orientation[c]);
    }
    z.set(&[cx, cy, 0], targets.z);
    PredictionTensors {
        heatmap: targets.heatmap.clone(),
        offset,
        z,
        orientation,
    }
}
