//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `PVMTCKPT`, a `u32` format version, a `u64`
//! header length and a JSON header, then every tensor as a `u32` name
//! length, the UTF-8 name, a `u32` rank, `u64` dims, and the row-major
//! values as little-endian `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, ModelParams, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PVMTCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub step: u64,
    /// Free-form state owned by whoever wrote the checkpoint.
    #[serde(default)]
    pub extra: serde_json::Value,
    pub tensor_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(
        params: &ModelParams,
        vocab_hash: &str,
        step: u64,
        extra: serde_json::Value,
        more: Vec<(String, Tensor)>,
    ) -> Self {
        let mut tensor_names: Vec<String> =
            params.names.iter().map(|n| format!("param/{n}")).collect();
        let mut tensors = params.tensors.clone();
        for (n, t) in more {
            tensor_names.push(n);
            tensors.push(t);
        }
        Self {
            header: CheckpointHeader {
                version: VERSION,
                config: params.config.clone(),
                vocab_hash: vocab_hash.to_string(),
                step,
                extra,
                tensor_names,
            },
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.header
            .tensor_names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    /// Tensors whose names start with `prefix`, in file order.
    pub fn with_prefix(&self, prefix: &str) -> Vec<Tensor> {
        self.header
            .tensor_names
            .iter()
            .zip(&self.tensors)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.clone())
            .collect()
    }

    /// Model parameters, after checking the config and vocabulary against
    /// what the caller expects.
    pub fn params(&self, expected: &ModelConfig, vocab_hash: &str) -> Result<ModelParams> {
        if &self.header.config != expected {
            return Err(ModelError::ConfigMismatch);
        }
        if self.header.vocab_hash != vocab_hash {
            return Err(ModelError::VocabMismatch {
                expected: vocab_hash.to_string(),
                found: self.header.vocab_hash.clone(),
            });
        }
        let fresh = super::init_model(expected, 0)?;
        let mut tensors = Vec::with_capacity(fresh.names.len());
        for (name, t) in fresh.names.iter().zip(&fresh.tensors) {
            let found = self
                .tensor(&format!("param/{name}"))
                .ok_or_else(|| ModelError::Checkpoint(format!("missing tensor {name}")))?;
            if found.shape() != t.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    found.shape(),
                    t.shape()
                )));
            }
            tensors.push(found.clone());
        }
        Ok(ModelParams {
            config: expected.clone(),
            names: fresh.names,
            tensors,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let header = serde_json::to_vec(&ckpt.header)
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for (name, t) in ckpt.header.tensor_names.iter().zip(&ckpt.tensors) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint("not a checkpoint file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let hlen = read_u64(&mut r)? as usize;
    let mut hbytes = vec![0u8; hlen];
    r.read_exact(&mut hbytes)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&hbytes).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut tensors = Vec::with_capacity(header.tensor_names.len());
    for expected in &header.tensor_names {
        let n = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; n];
        r.read_exact(&mut name)?;
        if name != expected.as_bytes() {
            return Err(ModelError::Checkpoint(format!(
                "tensor order mismatch at {expected}"
            )));
        }
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.push(Tensor::new(shape, data)?);
    }
    Ok(Checkpoint { header, tensors })
}

#[cfg(test)]
mod tests {
    use super::super::init_model;
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact_and_checks_compatibility() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = ModelConfig {
            layers: 1,
            max_len: 6,
            ..ModelConfig::default()
        };
        let p = init_model(&cfg, 9).unwrap();
        let extra = serde_json::json!({"round": 3});
        let more = vec![("adam_m/x".to_string(), Tensor::filled(&[2], 0.5))];
        save_checkpoint(&path, &Checkpoint::new(&p, "abc", 12, extra.clone(), more)).unwrap();
        let c = load_checkpoint(&path).unwrap();
        assert_eq!(c.header.step, 12);
        assert_eq!(c.header.extra, extra);
        assert_eq!(c.params(&cfg, "abc").unwrap(), p);
        assert_eq!(c.with_prefix("adam_m/"), vec![Tensor::filled(&[2], 0.5)]);
        assert!(matches!(
            c.params(&cfg, "xyz"),
            Err(ModelError::VocabMismatch { .. })
        ));
        let other = ModelConfig { layers: 2, ..cfg };
        assert!(matches!(c.params(&other, "abc"), Err(ModelError::ConfigMismatch)));
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"hello world, not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(ModelError::Checkpoint(_))));
    }
}
