//! Binary checkpoint: `GSKIT1`, a little-endian `u64` header length, a JSON
//! header, then every parameter as little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::scene::write_atomic;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"GSKIT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the data section.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    model: ModelConfig,
    #[serde(default)]
    train: serde_json::Value,
    params: Vec<ParamEntry>,
}

/// A model together with the (opaque) training configuration that made it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub train: serde_json::Value,
}

pub fn save_checkpoint<T: Real>(path: &Path, model: &Model<T>, train: &serde_json::Value) -> Result<()> {
    let mut params = Vec::with_capacity(model.params.len());
    let mut offset = 0;
    for (name, t) in model.params.names().iter().zip(model.params.tensors()) {
        params.push(ParamEntry { name: name.clone(), shape: t.shape().to_vec(), offset });
        offset += 8 * t.len();
    }
    let header = Header { version: CHECKPOINT_VERSION, model: model.config.clone(), train: train.clone(), params };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes = Vec::with_capacity(14 + json.len() + offset);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for t in model.params.tensors() {
        for v in t.data() {
            bytes.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    write_atomic(path, &bytes)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::format(path, reason);
    if bytes.len() < 14 || &bytes[..6] != CHECKPOINT_MAGIC {
        return Err(bad("not a GSKIT1 checkpoint".into()));
    }
    let len = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes")) as usize;
    let data_start = 14usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[14..data_start]).map_err(|e| bad(format!("bad header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {}", header.version)));
    }
    let data = &bytes[data_start..];
    let mut names = Vec::with_capacity(header.params.len());
    let mut tensors = Vec::with_capacity(header.params.len());
    for p in &header.params {
        let n: usize = p.shape.iter().product();
        let chunk = p
            .offset
            .checked_add(8 * n)
            .filter(|&e| e <= data.len())
            .map(|e| &data[p.offset..e])
            .ok_or_else(|| bad(format!("parameter {} extends past end of file", p.name)))?;
        let values: Vec<T> = chunk.chunks_exact(8).map(|b| T::lit(f64::from_le_bytes(b.try_into().expect("8 bytes")))).collect();
        names.push(p.name.clone());
        tensors.push(Tensor::new(p.shape.clone(), values)?);
    }
    let params = ModelParams::from_parts(names, tensors)?;
    let model = Model::from_parts(header.model, params).map_err(|e| bad(e.to_string()))?;
    Ok(Checkpoint { model, train: header.train })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let dir = std::env::temp_dir().join(format!("gskit-ckpt-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.ckpt");
        let m: Model<f64> = Model::new(ModelConfig::for_image(32, 32), 7).unwrap();
        let train = serde_json::json!({"lr": 0.02});
        save_checkpoint(&path, &m, &train).unwrap();
        let c: Checkpoint<f64> = load_checkpoint(&path).unwrap();
        assert_eq!(c.model, m);
        assert_eq!(c.train, train);
        let first = fs::read(&path).unwrap();
        save_checkpoint(&path, &m, &train).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);

        let mut cut = first.clone();
        cut.truncate(cut.len() - 8);
        fs::write(&path, &cut).unwrap();
        assert!(load_checkpoint::<f64>(&path).unwrap_err().to_string().contains("past end"));
        fs::write(&path, b"GSKIT2........").unwrap();
        assert!(load_checkpoint::<f64>(&path).is_err());
        fs::remove_dir_all(&dir).unwrap();
    }
}
