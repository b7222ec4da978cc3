//! Dataset and checkpoint files.

use std::fs;
use std::path::Path;

use salb_core::synthgen::{SynthDataset, SynthSpec};
use salb_core::trainer::{Layout, ModelDims, Moments, TrainConfig, TrainState};
use salb_core::Matrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{decode, encode};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &str = "SALB";
pub const CHECKPOINT_MAGIC: &str = "SALB-CKPT";
const DATASET_ARRAYS: [&str; 5] = ["image", "text", "roi", "tag", "relevance"];
const CHECKPOINT_ARRAYS: [&str; 3] = ["params", "adam_m", "adam_v"];

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `bytes`, refusing to replace an existing file unless `force`.
pub fn write_file(path: &Path, bytes: &[u8], force: bool) -> Result<()> {
    if !force && path.exists() {
        return Err(Error::OutputExists(path.to_path_buf()));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_dataset(d: &SynthDataset) -> Result<Vec<u8>> {
    let arrays = [&d.image, &d.text, &d.roi, &d.tag, &d.relevance];
    let named: Vec<(&str, &Matrix)> = DATASET_ARRAYS.iter().copied().zip(arrays).collect();
    encode(DATASET_MAGIC, &d.spec, &named)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<SynthDataset> {
    let (spec, arrays): (SynthSpec, Vec<Matrix>) = decode(bytes, DATASET_MAGIC, &DATASET_ARRAYS)?;
    let [image, text, roi, tag, relevance]: [Matrix; 5] = arrays.try_into().expect("array names checked");
    let d = SynthDataset { spec, image, text, roi, tag, relevance };
    d.validate().map_err(|e| Error::format(e.to_string(), Some(crate::container::VERSION)))?;
    Ok(d)
}

pub fn save_dataset(path: &Path, d: &SynthDataset, force: bool) -> Result<()> {
    write_file(path, &encode_dataset(d)?, force)
}

/// The dataset and the SHA-256 of its file.
pub fn load_dataset(path: &Path) -> Result<(SynthDataset, String)> {
    let bytes = read_file(path)?;
    Ok((decode_dataset(&bytes)?, sha256_hex(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    config: TrainConfig,
    dims: ModelDims,
    step: u64,
    param_len: usize,
}

pub fn encode_checkpoint(s: &TrainState) -> Result<Vec<u8>> {
    let meta = CheckpointMeta { config: s.config.clone(), dims: s.layout.dims, step: s.step(), param_len: s.layout.len };
    let row = |v: &[f64]| Matrix::new(1, v.len(), v.to_vec()).map_err(Error::from);
    let (p, m, v) = (row(&s.params)?, row(&s.moments.m)?, row(&s.moments.v)?);
    encode(CHECKPOINT_MAGIC, &meta, &[("params", &p), ("adam_m", &m), ("adam_v", &v)])
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let (meta, arrays): (CheckpointMeta, Vec<Matrix>) = decode(bytes, CHECKPOINT_MAGIC, &CHECKPOINT_ARRAYS)?;
    let version = Some(crate::container::VERSION);
    let layout = Layout::new(meta.dims, !meta.config.loss.shared_temperature);
    if layout.len != meta.param_len {
        return Err(Error::format(format!("parameter count {} does not match the dimensions ({})", meta.param_len, layout.len), version));
    }
    if let Some(a) = arrays.iter().find(|a| a.shape() != (1, layout.len)) {
        return Err(Error::format(format!("array of shape {:?}, expected (1, {})", a.shape(), layout.len), version));
    }
    meta.config.validate().map_err(|e| Error::format(e.to_string(), version))?;
    let [params, m, v]: [Matrix; 3] = arrays.try_into().expect("array names checked");
    Ok(TrainState {
        config: meta.config,
        layout,
        params: params.into_vec(),
        moments: Moments { m: m.into_vec(), v: v.into_vec(), step: meta.step },
    })
}

pub fn save_checkpoint(path: &Path, s: &TrainState, force: bool) -> Result<()> {
    write_file(path, &encode_checkpoint(s)?, force)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    decode_checkpoint(&read_file(path)?)
}
