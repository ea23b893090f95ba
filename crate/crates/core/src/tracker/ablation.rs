use std::io::Write;

use serde::{Deserialize, Serialize};

use super::metrics::{evaluate_ope, OpeResult};
use super::track::track_sequence;
use super::train::{train, TrainConfig};
use crate::error::Result;
use crate::heads::LossConfig;
use crate::model::{Model, ModelConfig, Variant};
use crate::scene::Sequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub label: String,
    pub success: f64,
    pub precision: f64,
}

/// Tracks every sequence and pools their frames into one OPE score.
pub fn evaluate_model(model: &Model, data: &[Sequence], seed: u64) -> Result<OpeResult> {
    let mut results = Vec::with_capacity(data.len());
    for seq in data {
        let track = track_sequence(model, seq, seed)?;
        let boxes: Vec<_> = track.iter().map(|s| s.bbox).collect();
        results.push(evaluate_ope(&boxes, &seq.gt_boxes())?);
    }
    OpeResult::merge(&results)
}

/// Trains and evaluates each variant from the same seed and data.
pub fn run_ablation(
    base: &ModelConfig,
    train_data: &[Sequence],
    eval_data: &[Sequence],
    train_config: &TrainConfig,
    loss: &LossConfig,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    Variant::ALL
        .iter()
        .map(|&variant| {
            let config = ModelConfig {
                variant,
                ..base.clone()
            };
            let mut model = Model::new(config, seed)?;
            train(&mut model, train_data, train_config, loss, seed)?;
            let ope = evaluate_model(&model, eval_data, seed)?;
            log::info!("{}: success {:.4} precision {:.4}", variant, ope.success, ope.precision);
            Ok(AblationRow {
                variant,
                label: variant.label().to_owned(),
                success: ope.success,
                precision: ope.precision,
            })
        })
        .collect()
}

pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "variant,label,success,precision")?;
    for r in rows {
        writeln!(out, "{},\"{}\",{:.6},{:.6}", r.variant, r.label, r.success, r.precision)?;
    }
    Ok(())
}
