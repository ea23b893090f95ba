//! Flat binary checkpoints: little-endian f64 values concatenated in store
//! order, with a JSON sidecar (`<file>.json`) mapping each name to its byte
//! offset and shape.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::param::ParamStore;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub offset: u64,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub tensor: Tensor,
}

pub fn index_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(store.num_elements() * 8);
    let mut index = BTreeMap::new();
    for p in store.iter() {
        index.insert(
            p.name.clone(),
            IndexEntry {
                offset: bytes.len() as u64,
                shape: p.tensor.shape().to_vec(),
            },
        );
        for v in p.tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let ipath = index_path(path);
    let json = serde_json::to_string_pretty(&index).map_err(|e| Error::json(&ipath, e))?;
    fs::write(&ipath, json).map_err(|e| Error::io(&ipath, e))
}

/// Reads every entry, ordered by offset.
pub fn load_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>> {
    let ipath = index_path(path);
    let text = fs::read_to_string(&ipath).map_err(|e| Error::io(&ipath, e))?;
    let index: BTreeMap<String, IndexEntry> = serde_json::from_str(&text).map_err(|e| Error::json(&ipath, e))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut entries: Vec<(String, IndexEntry)> = index.into_iter().collect();
    entries.sort_by_key(|(_, e)| e.offset);
    entries
        .into_iter()
        .map(|(name, entry)| {
            let n: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + n * 8;
            if end > bytes.len() {
                return Err(Error::Input(format!("checkpoint entry `{name}` runs past end of {}", path.display())));
            }
            let data = bytes[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(CheckpointEntry {
                name,
                tensor: Tensor::new(entry.shape, data)?,
            })
        })
        .collect()
}

impl ParamStore {
    /// Overwrites values by name. Every store parameter must be present with a matching shape.
    pub fn load_values(&mut self, entries: &[CheckpointEntry]) -> Result<()> {
        let by_name: BTreeMap<&str, &Tensor> = entries.iter().map(|e| (e.name.as_str(), &e.tensor)).collect();
        for p in self.iter_mut() {
            let src = by_name
                .get(p.name.as_str())
                .ok_or_else(|| Error::Input(format!("checkpoint lacks parameter `{}`", p.name)))?;
            if src.shape() != p.tensor.shape() {
                return Err(Error::dim("load_values", p.tensor.shape(), src.shape()));
            }
            p.tensor.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}
