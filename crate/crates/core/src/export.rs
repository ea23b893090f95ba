//! Raw arrays for external plotting. Each array is one file: a little-endian
//! `u64` rank, `rank` little-endian `u64` dimensions, then the values as
//! little-endian `f64` in row-major order. `maps.json` lists every file.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::scene::{canonicalize_with_shift, make_template, voxelize, Sequence};
use crate::tensor::{Graph, Tensor};
use crate::tracker::frame_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub variant: String,
    pub frame: usize,
    pub arrays: Vec<ArrayEntry>,
}

pub fn encode_array(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * (1 + t.shape().len() + t.len()));
    out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_array(bytes: &[u8]) -> Result<Tensor> {
    let word = |i: usize| -> Result<u64> {
        bytes
            .get(8 * i..8 * i + 8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::Input("array file truncated".into()))
    };
    let rank = word(0)? as usize;
    let shape = (0..rank).map(|i| word(1 + i).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let start = 8 * (1 + rank);
    let n: usize = shape.iter().product();
    if bytes.len() != start + 8 * n {
        return Err(Error::Input(format!("array file holds {} bytes, expected {}", bytes.len(), start + 8 * n)));
    }
    let data = bytes[start..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(shape, data)
}

/// Runs the model on frame `frame` of `seq` (search crop at the previous
/// ground-truth box, template from frame 0) and writes the head outputs,
/// region weights and attention maps into `out_dir`.
pub fn export_maps(model: &Model, seq: &Sequence, frame: usize, seed: u64, out_dir: &Path) -> Result<ExportManifest> {
    if frame == 0 || frame >= seq.len() {
        return Err(Error::Input(format!("frame {frame} outside 1..{}", seq.len())));
    }
    let first = &seq.frames[0];
    let template = make_template(first, &first.gt_box);
    let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(seed, 0));
    let template = voxelize(&template.cloud, &model.config.voxel, &mut rng)?;
    let crop = canonicalize_with_shift(&seq.frames[frame], &seq.frames[frame - 1].gt_box, [0.0, 0.0], &model.config.voxel);
    let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(seed, frame));
    let search = voxelize(&crop.cloud, &model.config.voxel, &mut rng)?;

    let mut g = Graph::new(&model.store);
    let out = model.forward(&mut g, &search, &template)?;
    let mut arrays: Vec<(String, Tensor)> = vec![
        ("heatmap".into(), g.value(out.preds.heatmap).clone()),
        ("offset".into(), g.value(out.preds.offset).clone()),
        ("z".into(), g.value(out.preds.z).clone()),
        ("orientation".into(), g.value(out.preds.orientation).clone()),
    ];
    let tr = &out.trace;
    if let Some(w) = tr.search_region_weights {
        arrays.push(("search_region_weights".into(), g.value(w).clone()));
    }
    if let Some(w) = tr.template_region_weights {
        arrays.push(("template_region_weights".into(), g.value(w).clone()));
    }
    for (l, regions) in tr.point_attention.iter().enumerate() {
        for (r, heads) in regions.iter().enumerate() {
            for (h, &a) in heads.iter().enumerate() {
                arrays.push((format!("point_attention.l{l}.r{r}.h{h}"), g.value(a).clone()));
            }
        }
    }
    for (l, heads) in tr.region_attention.iter().enumerate() {
        for (h, &a) in heads.iter().enumerate() {
            arrays.push((format!("region_attention.l{l}.h{h}"), g.value(a).clone()));
        }
    }
    for (h, &a) in tr.cross_attention.iter().enumerate() {
        arrays.push((format!("cross_attention.h{h}"), g.value(a).clone()));
    }

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(arrays.len());
    for (name, t) in arrays {
        let file = format!("{name}.bin");
        let path = out_dir.join(&file);
        fs::write(&path, encode_array(&t)).map_err(|e| Error::io(&path, e))?;
        entries.push(ArrayEntry {
            name,
            file,
            shape: t.shape().to_vec(),
        });
    }
    let manifest = ExportManifest {
        variant: model.variant().name().to_owned(),
        frame,
        arrays: entries,
    };
    let path = out_dir.join("maps.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
