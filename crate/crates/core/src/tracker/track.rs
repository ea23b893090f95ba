use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::heads::{decode_box, PredictionTensors};
use crate::model::Model;
use crate::scene::{canonicalize_with_shift, decanonicalize, make_template, voxelize, Box3D, Sequence, VoxelGrid};
use crate::tensor::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackStep {
    #[serde(rename = "box")]
    pub bbox: Box3D,
    pub confidence: f64,
    /// The search crop was empty and the previous box was repeated.
    pub coasted: bool,
}

/// Tracker state: the fixed frame-0 template and the history so far.
#[derive(Debug, Clone)]
pub struct TrackState {
    pub current_box: Box3D,
    pub template: VoxelGrid,
    pub history: Vec<TrackStep>,
}

/// Seed of the voxel sampling RNG for frame `t` of a tracking run.
pub(crate) fn frame_seed(seed: u64, t: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(t as u64)
}

impl TrackState {
    pub fn init(model: &Model, seq: &Sequence, seed: u64) -> Result<Self> {
        let first = &seq.frames[0];
        let template = make_template(first, &first.gt_box);
        let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(seed, 0));
        let template = voxelize(&template.cloud, &model.config.voxel, &mut rng)?;
        Ok(Self {
            current_box: first.gt_box,
            template,
            history: vec![TrackStep {
                bbox: first.gt_box,
                confidence: 1.0,
                coasted: false,
            }],
        })
    }
}

/// Runs one forward pass on a search grid and returns the raw predictions.
pub fn predict(model: &Model, search: &VoxelGrid, template: &VoxelGrid) -> Result<PredictionTensors> {
    let mut g = Graph::new(&model.store);
    let out = model.forward(&mut g, search, template)?;
    Ok(out.preds.values(&g))
}

/// One-pass tracking: frame 0 is the ground truth, every later search crop
/// is centered on the previous prediction.
pub fn track_sequence(model: &Model, seq: &Sequence, seed: u64) -> Result<Vec<TrackStep>> {
    let mut state = TrackState::init(model, seq, seed)?;
    let geo = model.geometry();
    for (t, frame) in seq.frames.iter().enumerate().skip(1) {
        let crop = canonicalize_with_shift(frame, &state.current_box, [0.0, 0.0], &model.config.voxel);
        let step = if crop.cloud.is_empty() {
            TrackStep {
                bbox: state.current_box,
                confidence: 0.0,
                coasted: true,
            }
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(seed, t));
            let search = voxelize(&crop.cloud, &model.config.voxel, &mut rng)?;
            let preds = predict(model, &search, &state.template)?;
            let det = decode_box(&preds, &geo, seq.object_size)?;
            TrackStep {
                bbox: decanonicalize(&crop.frame(), &det.local_box),
                confidence: det.confidence,
                coasted: false,
            }
        };
        state.current_box = step.bbox;
        state.history.push(step);
    }
    Ok(state.history)
}
