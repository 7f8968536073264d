//! Raw float32 export: `<stem>.f32` holds the samples (little-endian,
//! channel-major, x fastest) and `<stem>.json` describes them.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Grid, Volume};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub channels: usize,
    pub dtype: String,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("f32"), stem.with_extension("json"))
}

pub fn save_raw(v: &Volume, stem: impl AsRef<Path>) -> Result<()> {
    let (data_path, header_path) = paths(stem.as_ref());
    let header = RawHeader {
        dims: v.dims(),
        spacing: v.spacing(),
        channels: v.channels(),
        dtype: "f32le".into(),
    };
    let json = serde_json::to_vec_pretty(&header).map_err(|e| Error::Json { path: header_path.clone(), source: e })?;
    fs::write(&header_path, json).map_err(|e| Error::io(&header_path, e))?;
    let body: Vec<u8> = v.data().iter().flat_map(|x| x.to_le_bytes()).collect();
    fs::write(&data_path, body).map_err(|e| Error::io(&data_path, e))
}

pub fn load_raw(stem: impl AsRef<Path>) -> Result<Volume> {
    let (data_path, header_path) = paths(stem.as_ref());
    let text = fs::read(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: RawHeader =
        serde_json::from_slice(&text).map_err(|e| Error::Json { path: header_path.clone(), source: e })?;
    if header.dtype != "f32le" {
        return Err(Error::Format { path: header_path, reason: format!("dtype {:?}", header.dtype) });
    }
    let grid = Grid::new(header.dims, header.spacing)?;
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let expected = 4 * header.channels * grid.len();
    if bytes.len() != expected {
        return Err(Error::Truncated { path: data_path, expected: expected as u64, actual: bytes.len() as u64 });
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Volume::new(grid, header.channels, data)
}
