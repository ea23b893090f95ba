//! Sequence files: JSON lines, one frame per line,
//! `{"points": [[x, y, z], ...], "box": {"center": [..], "size": [..], "yaw": ..}}`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::geometry::{Box3D, Frame, Point3, PointCloud, Sequence};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    points: Vec<Point3>,
    #[serde(rename = "box")]
    gt_box: Box3D,
}

pub fn write_sequence(seq: &Sequence, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for f in &seq.frames {
        let rec = FrameRecord {
            points: f.cloud.points.clone(),
            gt_box: f.gt_box,
        };
        serde_json::to_writer(&mut out, &rec).map_err(|e| Error::json(path, e))?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_sequence(path: &Path) -> Result<Sequence> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut frames = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord = serde_json::from_str(&line).map_err(|e| Error::json(path, e))?;
        let gt_box = Box3D::new(rec.gt_box.center, rec.gt_box.size, rec.gt_box.yaw)?;
        frames.push(Frame {
            cloud: PointCloud::new(rec.points)?,
            gt_box,
        });
    }
    let first = frames
        .first()
        .ok_or_else(|| Error::Dataset(format!("{} holds no frames", path.display())))?;
    let object_size = first.gt_box.size;
    if frames.iter().any(|f| f.gt_box.size != object_size) {
        return Err(Error::Dataset(format!("{}: object size changes between frames", path.display())));
    }
    Ok(Sequence { frames, object_size })
}

/// All `*.jsonl` files in `dir`, sorted by file name.
pub fn read_sequence_dir(dir: &Path) -> Result<Vec<(String, Sequence)>> {
    let mut names: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|p| {
            let stem = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            read_sequence(&p).map(|s| (stem, s))
        })
        .collect()
}
