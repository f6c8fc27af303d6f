//! Binary snapshots of dense blocks: a `.bin` file of row-major little-endian
//! `f64` values and a JSON manifest naming each block with its shape and
//! byte offset.

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub data_file: String,
    pub blocks: Vec<BlockEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("json"), base.with_extension("bin"))
}

/// Writes `<base>.json` and `<base>.bin`.
pub fn write_snapshot(base: impl AsRef<Path>, blocks: &[(String, ArrayView2<f64>)], meta: serde_json::Value) -> Result<()> {
    let (manifest_path, data_path) = paths(base.as_ref());
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(blocks.len());
    for (name, block) in blocks {
        entries.push(BlockEntry {
            name: name.clone(),
            rows: block.nrows(),
            cols: block.ncols(),
            offset: bytes.len(),
        });
        for row in block.rows() {
            for v in row {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let manifest = Manifest {
        data_file: data_path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        blocks: entries,
        meta,
    };
    std::fs::write(&data_path, &bytes).map_err(|e| Error::io(&data_path, e))?;
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

/// Named blocks in manifest order.
pub type Blocks = Vec<(String, Array2<f64>)>;

pub fn read_snapshot(base: impl AsRef<Path>) -> Result<(Manifest, Blocks)> {
    let (manifest_path, _) = paths(base.as_ref());
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let data_path = manifest_path.with_file_name(&manifest.data_file);
    let bytes = std::fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let mut out = Vec::with_capacity(manifest.blocks.len());
    for b in &manifest.blocks {
        let end = b.offset + 8 * b.rows * b.cols;
        if end > bytes.len() {
            return Err(Error::invalid(format!("block `{}` runs past end of data", b.name)));
        }
        let values: Vec<f64> = bytes[b.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let m = Array2::from_shape_vec((b.rows, b.cols), values).map_err(|e| Error::invalid(e.to_string()))?;
        out.push((b.name.clone(), m));
    }
    Ok((manifest, out))
}
