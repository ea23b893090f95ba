use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{build_targets, loss, LossConfig, TargetMaps};
use crate::model::Model;
use crate::scene::{canonicalize, make_template, voxelize, Sequence, VoxelGrid};
use crate::tensor::{Adam, Graph, Optimizer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Samples per optimizer step.
    pub batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-3,
            batch: 4,
        }
    }
}

/// One (template, search) training pair.
#[derive(Debug, Clone)]
pub struct Sample {
    pub search: VoxelGrid,
    pub template: VoxelGrid,
    pub targets: TargetMaps,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub heat: f64,
    pub off: f64,
    pub z: f64,
    pub ori: f64,
}

/// Writes the loss curve as `step,total,heat,off,z,ori`.
pub fn write_loss_csv<W: Write>(records: &[LossRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "step,total,heat,off,z,ori")?;
    for r in records {
        writeln!(out, "{},{:e},{:e},{:e},{:e},{:e}", r.step, r.total, r.heat, r.off, r.z, r.ori)?;
    }
    Ok(())
}

/// Template grid of frame 0 for every sequence, `None` where the box is empty.
pub fn template_grids(model: &Model, data: &[Sequence], seed: u64) -> Result<Vec<Option<VoxelGrid>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    data.iter()
        .map(|seq| {
            let first = seq.frames.first().ok_or_else(|| Error::Dataset("empty sequence".into()))?;
            let t = make_template(first, &first.gt_box);
            if t.empty {
                Ok(None)
            } else {
                voxelize(&t.cloud, &model.config.voxel, &mut rng).map(Some)
            }
        })
        .collect()
}

/// Search frame `b ≥ 1` cropped around the previous ground-truth box with
/// the training-time random shift. `None` when the label leaves the map.
pub fn make_sample<R: Rng>(model: &Model, seq: &Sequence, template: &VoxelGrid, b: usize, rng: &mut R) -> Result<Option<Sample>> {
    let frame = &seq.frames[b];
    let reference = seq.frames[b - 1].gt_box;
    let crop = canonicalize(frame, &reference, rng, true, &model.config.voxel);
    let Some(targets) = build_targets(&crop.label_box, &model.geometry()) else {
        return Ok(None);
    };
    let search = voxelize(&crop.cloud, &model.config.voxel, rng)?;
    Ok(Some(Sample {
        search,
        template: template.clone(),
        targets,
    }))
}

pub struct Trainer {
    optimizer: Adam,
    loss: LossConfig,
    step: usize,
}

impl Trainer {
    pub fn new(lr: f64, loss: LossConfig) -> Self {
        Self {
            optimizer: Adam::new(lr),
            loss,
            step: 0,
        }
    }

    /// Mean loss over `batch`, one Adam update.
    pub fn step(&mut self, model: &mut Model, batch: &[Sample]) -> Result<LossRecord> {
        if batch.is_empty() {
            return Err(Error::Dataset("empty training batch".into()));
        }
        let scale = 1.0 / batch.len() as f64;
        let (grads, parts) = {
            let mut g = Graph::new(&model.store);
            let mut total = None;
            let mut parts = [0.0; 5];
            for s in batch {
                let out = model.forward(&mut g, &s.search, &s.template)?;
                let l = loss(&mut g, &out.preds, &s.targets, &self.loss)?;
                for (acc, v) in parts.iter_mut().zip(l.values(&g)) {
                    *acc += v * scale;
                }
                let scaled = g.scale(l.total, scale);
                total = Some(match total {
                    Some(t) => g.add(t, scaled)?,
                    None => scaled,
                });
            }
            let total = total.unwrap();
            if !parts.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite loss at step {}: {parts:?}", self.step)));
            }
            (g.backward(total)?, parts)
        };
        grads.accumulate_into(&mut model.store);
        self.optimizer.step(&mut model.store);
        model.store.zero_grad();
        let rec = LossRecord {
            step: self.step,
            total: parts[0],
            heat: parts[1],
            off: parts[2],
            z: parts[3],
            ori: parts[4],
        };
        self.step += 1;
        Ok(rec)
    }
}

/// Trains on random (frame 0 template, later search frame) pairs.
pub fn train(model: &mut Model, data: &[Sequence], config: &TrainConfig, loss: &LossConfig, seed: u64) -> Result<Vec<LossRecord>> {
    if data.is_empty() {
        return Err(Error::Dataset("no training sequences".into()));
    }
    let templates = template_grids(model, data, seed)?;
    let usable: Vec<usize> = (0..data.len()).filter(|&i| templates[i].is_some() && data[i].len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::Dataset("every sequence has an empty first-frame template".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let mut trainer = Trainer::new(config.lr, *loss);
    let mut records = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch);
        let mut attempts = 0;
        while batch.len() < config.batch.max(1) {
            attempts += 1;
            if attempts > 1000 * config.batch.max(1) {
                return Err(Error::Dataset("could not draw an in-range training sample".into()));
            }
            let &i = usable.choose(&mut rng).unwrap();
            let b = rng.gen_range(1..data[i].len());
            if let Some(s) = make_sample(model, &data[i], templates[i].as_ref().unwrap(), b, &mut rng)? {
                batch.push(s);
            }
        }
        let rec = trainer.step(model, &batch)?;
        if rec.step % 100 == 0 {
            log::debug!("step {} loss {:.5}", rec.step, rec.total);
        }
        records.push(rec);
    }
    Ok(records)
}
