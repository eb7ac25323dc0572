//! Self-describing checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "CHRLMCK1"
//! header_len   u64
//! header       header_len bytes of UTF-8 JSON (CheckpointHeader)
//! data         concatenated tensors, each `numel * dtype size` bytes,
//!              at the offsets listed in the header
//! ```
//!
//! The file length must equal `16 + header_len + data_len` exactly.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::ArrayViewD;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, Params, Transformer};
use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 8] = b"CHRLMCK1";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    #[serde(default)]
    pub epoch: f64,
    #[serde(default)]
    pub step: usize,
    #[serde(default)]
    pub val_loss: Option<f64>,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: DType,
    pub config: ModelConfig,
    pub tokenizer_hash: String,
    pub metadata: CheckpointMeta,
    pub tensors: Vec<TensorEntry>,
    pub data_len: usize,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: Transformer<T>,
    pub tokenizer_hash: String,
    pub metadata: CheckpointMeta,
}

/// A loaded checkpoint plus any compatibility warnings.
#[derive(Clone, Debug)]
pub struct Loaded<T> {
    pub checkpoint: Checkpoint<T>,
    pub warnings: Vec<String>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: Transformer<T>, tokenizer_hash: impl Into<String>, metadata: CheckpointMeta) -> Self {
        Checkpoint {
            model,
            tokenizer_hash: tokenizer_hash.into(),
            metadata,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let named = self.model.params().named();
        let mut tensors = Vec::with_capacity(named.len());
        let mut data = Vec::with_capacity(self.model.parameter_count() * T::DTYPE.size_in_bytes());
        for (name, _, view) in &named {
            let offset = data.len();
            write_tensor(view, &mut data);
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: view.shape().to_vec(),
                offset,
                length: data.len() - offset,
            });
        }
        let header = CheckpointHeader {
            dtype: T::DTYPE,
            config: self.model.config().clone(),
            tokenizer_hash: self.tokenizer_hash.clone(),
            metadata: self.metadata.clone(),
            tensors,
            data_len: data.len(),
        };
        let header = serde_json::to_vec(&header).expect("serializable header");
        let mut out = Vec::with_capacity(16 + header.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |d: &str| Error::format("checkpoint", d);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[16..header_end]).map_err(|e| Error::format("checkpoint", e))?;
        if header.dtype != T::DTYPE {
            return Err(Error::DTypeMismatch {
                expected: T::DTYPE.to_string(),
                found: header.dtype.to_string(),
            });
        }
        let data = &bytes[header_end..];
        if data.len() != header.data_len {
            return Err(corrupt(&format!(
                "expected {} data bytes, found {}",
                header.data_len,
                data.len()
            )));
        }
        header.config.validate()?;
        let mut params = Params::<T>::zeros(&header.config);
        let expected: Vec<(String, Vec<usize>)> = params
            .named()
            .into_iter()
            .map(|(n, _, v)| (n, v.shape().to_vec()))
            .collect();
        if expected.len() != header.tensors.len() {
            return Err(corrupt(&format!(
                "expected {} tensors, found {}",
                expected.len(),
                header.tensors.len()
            )));
        }
        let size = T::DTYPE.size_in_bytes();
        for ((name, shape), (entry, mut dst)) in expected.iter().zip(header.tensors.iter().zip(params.tensors_mut())) {
            if *name != entry.name || *shape != entry.shape {
                return Err(Error::ShapeMismatch {
                    name: entry.name.clone(),
                    expected: shape.clone(),
                    found: entry.shape.clone(),
                });
            }
            let numel: usize = shape.iter().product();
            if entry.length != numel * size || entry.offset + entry.length > data.len() {
                return Err(corrupt(&format!("tensor {name} has a bad extent")));
            }
            let src = &data[entry.offset..entry.offset + entry.length];
            for (v, chunk) in dst.iter_mut().zip(src.chunks_exact(size)) {
                *v = T::read_le(chunk);
            }
        }
        Ok(Checkpoint {
            model: Transformer::from_params(header.config, params)?,
            tokenizer_hash: header.tokenizer_hash,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint; a tokenizer hash different from
    /// `expected_tokenizer` is reported as a warning, not an error.
    pub fn load(path: &Path, expected_tokenizer: Option<&str>) -> Result<Loaded<T>> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let checkpoint = Self::from_bytes(&bytes)?;
        let mut warnings = Vec::new();
        if let Some(expected) = expected_tokenizer {
            if expected != checkpoint.tokenizer_hash {
                let w = format!(
                    "{}: trained with tokenizer {}, but tokenizer {} was supplied",
                    path.display(),
                    short(&checkpoint.tokenizer_hash),
                    short(expected)
                );
                log::warn!("{w}");
                warnings.push(w);
            }
        }
        Ok(Loaded { checkpoint, warnings })
    }
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

fn write_tensor<T: Scalar>(view: &ArrayViewD<T>, out: &mut Vec<u8>) {
    for &v in view.iter() {
        v.write_le(out);
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            n_kv_heads: 1,
            d_model: 16,
            d_ff: 40,
            vocab_size: 50,
            context_length: 24,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let model = Transformer::<f32>::new(config()).unwrap();
        let ck = Checkpoint::new(
            model,
            "abc",
            CheckpointMeta {
                epoch: 2.0,
                step: 10,
                val_loss: Some(3.5),
                ..Default::default()
            },
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::<f32>::load(&path, Some("abc")).unwrap();
        assert!(loaded.warnings.is_empty());
        assert_eq!(loaded.checkpoint.metadata, ck.metadata);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let len = rng.gen_range(1..=24);
            let toks: Vec<u32> = (0..len).map(|_| rng.gen_range(0..50)).collect();
            let a = ck.model.logits(&toks).unwrap();
            let b = loaded.checkpoint.model.logits(&toks).unwrap();
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn truncated_file_fails() {
        let ck = Checkpoint::new(
            Transformer::<f32>::new(config()).unwrap(),
            "h",
            CheckpointMeta::default(),
        );
        let bytes = ck.to_bytes();
        for cut in [4, 20, bytes.len() - 1] {
            assert!(Checkpoint::<f32>::from_bytes(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn tokenizer_mismatch_warns() {
        let ck = Checkpoint::new(
            Transformer::<f32>::new(config()).unwrap(),
            "aaaa",
            CheckpointMeta::default(),
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::<f32>::load(&path, Some("bbbb")).unwrap();
        assert_eq!(loaded.warnings.len(), 1);
    }

    #[test]
    fn dtype_is_checked() {
        let ck = Checkpoint::new(
            Transformer::<f64>::new(config()).unwrap(),
            "h",
            CheckpointMeta::default(),
        );
        let err = Checkpoint::<f32>::from_bytes(&ck.to_bytes()).unwrap_err();
        assert!(matches!(err, Error::DTypeMismatch { .. }));
        assert!(Checkpoint::<f64>::from_bytes(&ck.to_bytes()).is_ok());
    }
}
