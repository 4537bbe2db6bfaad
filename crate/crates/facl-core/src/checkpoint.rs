//! Single-file checkpoint format for model parameters.
//!
//! Layout (little-endian):
//!
//! ```text
//! bytes 0..8    magic "FACLCKP1"
//! bytes 8..12   u32 format version (currently 1)
//! bytes 12..20  u64 metadata length M
//! bytes 20..20+M  metadata JSON
//! then          raw f64 data for each tensor, in metadata order
//! ```
//!
//! The metadata JSON carries `kind` (e.g. "generator", "classifier"), a
//! caller-provided `payload` (config, normalization stats, accuracy, ...),
//! and the tensor index (name + shape per tensor).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use facl_tensor::TensorMap;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FACLCKP1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub payload: serde_json::Value,
    pub tensors: Vec<TensorInfo>,
    pub created_utc: String,
}

pub fn save(
    path: &Path,
    kind: &str,
    payload: &impl Serialize,
    params: &TensorMap,
) -> Result<()> {
    let tensors: Vec<TensorInfo> = params
        .iter()
        .map(|(name, v)| TensorInfo {
            name: name.clone(),
            shape: v.shape().to_vec(),
        })
        .collect();
    let meta = CheckpointMeta {
        kind: kind.to_string(),
        payload: serde_json::to_value(payload)?,
        tensors,
        created_utc: chrono::Utc::now().to_rfc3339(),
    };
    let meta_bytes = serde_json::to_vec(&meta)?;

    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io_at(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(meta_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&meta_bytes)?;
    for (_, v) in params.iter() {
        for x in v.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(CheckpointMeta, TensorMap)> {
    let file = File::open(path).map_err(|e| Error::io_at(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4)?;
    let version = u32::from_le_bytes(v4);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut l8 = [0u8; 8];
    r.read_exact(&mut l8)?;
    let meta_len = u64::from_le_bytes(l8) as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)?;

    let mut params = TensorMap::new();
    let mut buf8 = [0u8; 8];
    for info in &meta.tensors {
        let n: usize = info.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf8)?;
            data.push(f64::from_le_bytes(buf8));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&info.shape), data)
            .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", info.name)))?;
        params.insert(info.name.clone(), arr);
    }
    Ok((meta, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let mut params = TensorMap::new();
        params.insert(
            "a.w",
            ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.5, -0.25, 1e-300, 0.0, -0.0, 3.7])
                .unwrap(),
        );
        params.insert("b", ArrayD::from_elem(IxDyn(&[4]), 0.123456789));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.ckpt");
        #[derive(Serialize)]
        struct P {
            note: &'static str,
        }
        save(&path, "classifier", &P { note: "x" }, &params).unwrap();
        let (meta, loaded) = load(&path).unwrap();
        assert_eq!(meta.kind, "classifier");
        assert_eq!(loaded.checksum(), params.checksum());
    }

    #[test]
    fn rejects_non_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(load(&path).is_err());
    }
}
