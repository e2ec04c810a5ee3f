//! Binary tensor files and the directories built from them.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  b"CRTN"
//! u16    version (1)
//! u8     dtype (1 = f32, 2 = f64)
//! u8     ndim
//! u64    dims[ndim]
//! data   numel values of dtype
//! ```
//!
//! A corpus directory holds `{split}_x.bin` / `{split}_y.bin` pairs and a
//! `manifest.json` that records the generating spec and a SHA-256 per file.
//! A checkpoint directory holds `param_{i}.bin` (f64) and `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cmnist::{CMnistCorpus, CMnistSpec};
use crate::data::LabeledDataset;
use crate::error::{invalid, Error, Result};
use crate::model::{Model, ModelSpec};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"CRTN";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

pub fn encode(t: &Tensor, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.ndim() + dtype.width() * t.numel());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype.code());
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        Dtype::F32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => t.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(Tensor, Dtype)> {
    if bytes.len() < 8 {
        return Err(Error::Truncated(format!("tensor header needs 8 bytes, found {}", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            expected: u32::from_be_bytes(MAGIC),
            found: u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(invalid("tensor_decode", format!("unsupported version {version}")));
    }
    let dtype = match bytes[6] {
        1 => Dtype::F32,
        2 => Dtype::F64,
        other => return Err(invalid("tensor_decode", format!("unknown dtype code {other}"))),
    };
    let ndim = bytes[7] as usize;
    let header = 8 + 8 * ndim;
    if bytes.len() < header {
        return Err(Error::Truncated(format!("tensor header needs {header} bytes, found {}", bytes.len())));
    }
    let shape: Vec<usize> = bytes[8..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")) as usize)
        .collect();
    let numel: usize = shape.iter().product();
    let body = &bytes[header..];
    if body.len() != numel * dtype.width() {
        return Err(Error::Truncated(format!(
            "tensor body: expected {} bytes, found {}",
            numel * dtype.width(),
            body.len()
        )));
    }
    let data = match dtype {
        Dtype::F32 => body.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4-byte chunk")))).collect(),
        Dtype::F64 => body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect(),
    };
    Ok((Tensor::new(shape, data)?, dtype))
}

pub fn write_tensor(path: &Path, t: &Tensor, dtype: Dtype) -> Result<String> {
    let bytes = encode(t, dtype);
    fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    Ok(decode(&fs::read(path)?)?.0)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u16,
    pub dtype: Dtype,
    pub spec: CMnistSpec,
    pub splits: BTreeMap<String, usize>,
    pub sha256: BTreeMap<String, String>,
}

fn save_split(dir: &Path, name: &str, data: &LabeledDataset, hashes: &mut BTreeMap<String, String>) -> Result<()> {
    let x = format!("{name}_x.bin");
    let y = format!("{name}_y.bin");
    hashes.insert(x.clone(), write_tensor(&dir.join(&x), &data.x, Dtype::F32)?);
    hashes.insert(y.clone(), write_tensor(&dir.join(&y), &Tensor::from_vec(data.y.clone()), Dtype::F32)?);
    Ok(())
}

pub fn load_split(dir: &Path, name: &str) -> Result<LabeledDataset> {
    let x = read_tensor(&dir.join(format!("{name}_x.bin")))?;
    let y = read_tensor(&dir.join(format!("{name}_y.bin")))?;
    LabeledDataset::new(x, y.into_data())
}

/// Write `train`, `val`, `test` and any `extra` splits plus the manifest.
pub fn save_corpus(dir: &Path, corpus: &CMnistCorpus, extra: &[(&str, &LabeledDataset)]) -> Result<CorpusManifest> {
    fs::create_dir_all(dir)?;
    let mut hashes = BTreeMap::new();
    let mut splits = BTreeMap::new();
    let named = [("train", &corpus.train), ("val", &corpus.val), ("test", &corpus.test)];
    for (name, data) in named.into_iter().chain(extra.iter().copied()) {
        save_split(dir, name, data, &mut hashes)?;
        splits.insert(name.to_string(), data.len());
    }
    let manifest = CorpusManifest {
        format_version: VERSION,
        dtype: Dtype::F32,
        spec: corpus.spec.clone(),
        splits,
        sha256: hashes,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_corpus_manifest(dir: &Path) -> Result<CorpusManifest> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?)
}

/// Load a corpus and check every file against its recorded hash.
pub fn load_corpus(dir: &Path) -> Result<(CorpusManifest, BTreeMap<String, LabeledDataset>)> {
    let manifest = read_corpus_manifest(dir)?;
    for (file, want) in &manifest.sha256 {
        let got = sha256_hex(&fs::read(dir.join(file))?);
        if &got != want {
            return Err(invalid("load_corpus", format!("{file}: sha256 {got} does not match manifest {want}")));
        }
    }
    let mut splits = BTreeMap::new();
    for name in manifest.splits.keys() {
        splits.insert(name.clone(), load_split(dir, name)?);
    }
    Ok((manifest, splits))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u16,
    pub model: ModelSpec,
    pub seed: u64,
    pub epoch: usize,
    pub iteration: usize,
    /// Resolved run configuration.
    pub config: serde_json::Value,
    pub params: Vec<String>,
}

pub fn save_checkpoint(
    dir: &Path,
    model: &Model,
    seed: u64,
    epoch: usize,
    iteration: usize,
    config: serde_json::Value,
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir)?;
    let mut params = Vec::with_capacity(model.params.len());
    for (i, p) in model.params.iter().enumerate() {
        let name = format!("param_{i}.bin");
        write_tensor(&dir.join(&name), p, Dtype::F64)?;
        params.push(name);
    }
    let manifest = CheckpointManifest {
        format_version: VERSION,
        model: model.spec.clone(),
        seed,
        epoch,
        iteration,
        config,
        params,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointManifest, Model)> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let fresh = Model::init(manifest.model.clone(), 0)?;
    let mut params = Vec::with_capacity(manifest.params.len());
    for (name, want) in manifest.params.iter().zip(&fresh.params) {
        let t = read_tensor(&dir.join(name))?;
        if t.shape() != want.shape() {
            return Err(Error::ShapeMismatch {
                op: "load_checkpoint",
                lhs: t.shape().to_vec(),
                rhs: want.shape().to_vec(),
            });
        }
        params.push(t.with_grad());
    }
    if params.len() != fresh.params.len() {
        return Err(invalid("load_checkpoint", format!("expected {} parameters, found {}", fresh.params.len(), params.len())));
    }
    let model = Model {
        spec: manifest.model.clone(),
        params,
    };
    Ok((manifest, model))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_round_trip_is_exact() {
        let t = Tensor::new(vec![2, 3], vec![0.1, -2.5, 1e-300, f64::MAX, 0.0, 3.0]).unwrap();
        let (back, dtype) = decode(&encode(&t, Dtype::F64)).unwrap();
        assert_eq!(dtype, Dtype::F64);
        assert_eq!(back, t);
    }

    #[test]
    fn f32_round_trip_rounds_once() {
        let t = Tensor::from_vec(vec![0.1, 0.5]);
        let (back, _) = decode(&encode(&t, Dtype::F32)).unwrap();
        assert_eq!(back.data(), &[f64::from(0.1f32), 0.5]);
    }

    #[test]
    fn header_errors() {
        let t = Tensor::from_vec(vec![1.0]);
        let mut bytes = encode(&t, Dtype::F64);
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::BadMagic { .. })));
        assert!(matches!(decode(b"CRT"), Err(Error::Truncated(_))));
    }

    #[test]
    fn scalar_tensor_has_no_dims() {
        let bytes = encode(&Tensor::scalar(2.0), Dtype::F64);
        assert_eq!(bytes.len(), 8 + 8);
        assert_eq!(decode(&bytes).unwrap().0.item(), 2.0);
    }
}
