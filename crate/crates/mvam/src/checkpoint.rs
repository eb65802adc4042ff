//! Self-describing binary model checkpoints.
//!
//! Layout: an 8-byte magic, a little-endian u64 header length, a JSON
//! header (model config, tensor index, vocabulary hash, label names), then
//! all tensor values as little-endian f64 in header order. Values survive a
//! save/load round trip bitwise.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

const MAGIC: &[u8; 8] = b"MVAMCKP1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, counted in f64 elements.
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab_sha256: String,
    label_names: Vec<String>,
    tensors: Vec<TensorEntry>,
}

/// A model frozen together with the identity of the data it was trained
/// on: the vocabulary hash guards against evaluating under a different
/// token mapping, the label names pin the label-id order.
#[derive(Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab_sha256: String,
    pub label_names: Vec<String>,
}

/// Fresh model whose tensors copy `model`'s current values (tensor handles
/// share storage, so a plain clone would alias the original).
fn duplicate_model(model: &Model) -> Result<Model> {
    let copy = Model::init(model.config.clone(), None, 0)?;
    let source = model.params.all_tensors();
    for ((name, dst), (src_name, src)) in copy.params.all_tensors().iter().zip(&source) {
        debug_assert_eq!(name, src_name);
        dst.set_data(src.data())?;
    }
    Ok(copy)
}

impl Checkpoint {
    /// Deep-copies the model, so later training steps do not mutate the
    /// checkpoint.
    pub fn snapshot(
        model: &Model,
        vocab_sha256: String,
        label_names: Vec<String>,
    ) -> Result<Checkpoint> {
        if label_names.len() != model.config.num_labels {
            return Err(Error::invalid(
                "checkpoint",
                format!(
                    "{} label names for a {}-label model",
                    label_names.len(),
                    model.config.num_labels
                ),
            ));
        }
        Ok(Checkpoint {
            model: duplicate_model(model)?,
            vocab_sha256,
            label_names,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors = self.model.params.all_tensors();
        let mut entries = Vec::with_capacity(tensors.len());
        let mut payload: Vec<u8> = Vec::new();
        let mut offset = 0usize;
        for (name, tensor) in &tensors {
            let data = tensor.data();
            entries.push(TensorEntry {
                name: name.clone(),
                shape: tensor.shape().to_vec(),
                offset,
                len: data.len(),
            });
            offset += data.len();
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            config: self.model.config.clone(),
            vocab_sha256: self.vocab_sha256.clone(),
            label_names: self.label_names.clone(),
            tensors: entries,
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| Error::json("encoding checkpoint header", e))?;
        let mut out = Vec::with_capacity(16 + header_bytes.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        out.extend_from_slice(&payload);
        fs::write(path, out)
            .map_err(|e| Error::io(format!("writing checkpoint {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let broken = |details: String| Error::Checkpoint {
            path: path.to_path_buf(),
            details,
        };
        let bytes = fs::read(path)
            .map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(broken("missing or unknown magic".into()));
        }
        let header_len =
            u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let payload_start = 16usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| broken("header length exceeds file size".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..payload_start])
            .map_err(|e| broken(format!("bad header: {e}")))?;
        let payload = &bytes[payload_start..];
        if payload.len() % 8 != 0 {
            return Err(broken("payload is not a whole number of f64 values".into()));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();

        if header.label_names.len() != header.config.num_labels {
            return Err(broken(format!(
                "{} label names for a {}-label config",
                header.label_names.len(),
                header.config.num_labels
            )));
        }
        let model = Model::init(header.config, None, 0)
            .map_err(|e| broken(format!("config rejected: {e}")))?;
        let tensors = model.params.all_tensors();
        if tensors.len() != header.tensors.len() {
            return Err(broken(format!(
                "expected {} tensors, header lists {}",
                tensors.len(),
                header.tensors.len()
            )));
        }
        for ((name, tensor), entry) in tensors.iter().zip(&header.tensors) {
            if *name != entry.name {
                return Err(broken(format!(
                    "tensor order mismatch: expected {name}, found {}",
                    entry.name
                )));
            }
            if tensor.shape() != entry.shape.as_slice() {
                return Err(broken(format!(
                    "tensor {name}: shape {:?} does not match config's {:?}",
                    entry.shape,
                    tensor.shape()
                )));
            }
            let end = entry
                .offset
                .checked_add(entry.len)
                .filter(|&e| e <= values.len())
                .ok_or_else(|| broken(format!("tensor {name}: payload range out of bounds")))?;
            tensor
                .set_data(values[entry.offset..end].to_vec())
                .map_err(|e| broken(format!("tensor {name}: {e}")))?;
        }
        Ok(Checkpoint {
            model,
            vocab_sha256: header.vocab_sha256,
            label_names: header.label_names,
        })
    }

    /// True when configs, label names, vocabulary hashes, and every tensor
    /// value agree exactly.
    pub fn bitwise_eq(&self, other: &Checkpoint) -> bool {
        if self.model.config != other.model.config
            || self.vocab_sha256 != other.vocab_sha256
            || self.label_names != other.label_names
        {
            return false;
        }
        let a = self.model.params.all_tensors();
        let b = other.model.params.all_tensors();
        a.len() == b.len()
            && a.iter().zip(&b).all(|((na, ta), (nb, tb))| {
                na == nb
                    && ta.shape() == tb.shape()
                    && ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_e: 4,
            d_c: 3,
            k: 2,
            d_ff: 5,
            num_labels: 2,
            vocab_size: 7,
            ..ModelConfig::default()
        }
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("l{i}")).collect()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = Model::init(tiny_config(), None, 99).unwrap();
        // Make the values adversarial: negative zero, subnormals, extremes.
        model.params.conv_bias.update_data(|d| {
            d[0] = -0.0;
            d[1] = f64::MIN_POSITIVE / 2.0;
            d[2] = 1e300;
        });
        let ckpt = Checkpoint::snapshot(&model, "cafe".into(), names(2)).unwrap();
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert!(loaded.bitwise_eq(&ckpt));
        assert_eq!(loaded.vocab_sha256, "cafe");
        assert_eq!(loaded.label_names, names(2));
        // Negative zero sign survives.
        assert_eq!(loaded.model.params.conv_bias.data()[0].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn snapshot_is_a_deep_copy() {
        let model = Model::init(tiny_config(), None, 1).unwrap();
        let ckpt = Checkpoint::snapshot(&model, "h".into(), names(2)).unwrap();
        let before = ckpt.model.params.conv_kernel.data();
        model.params.conv_kernel.update_data(|d| d[0] += 42.0);
        assert_eq!(ckpt.model.params.conv_kernel.data(), before);
        assert!(Checkpoint::snapshot(&model, "h".into(), names(3)).is_err());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = Model::init(tiny_config(), None, 5).unwrap();
        let ckpt = Checkpoint::snapshot(&model, "h".into(), names(2)).unwrap();
        ckpt.save(&path).unwrap();
        let good = std::fs::read(&path).unwrap();

        std::fs::write(&path, b"short").unwrap();
        assert!(Checkpoint::load(&path).is_err());

        let mut bad_magic = good.clone();
        bad_magic[0] ^= 0xff;
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(Checkpoint::load(&path).is_err());

        let mut bad_len = good.clone();
        bad_len[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        std::fs::write(&path, &bad_len).unwrap();
        assert!(Checkpoint::load(&path).is_err());

        // Truncated payload: drop the final tensor value.
        let truncated = good[..good.len() - 8].to_vec();
        std::fs::write(&path, &truncated).unwrap();
        assert!(Checkpoint::load(&path).is_err());

        // Odd payload size.
        let ragged = good[..good.len() - 3].to_vec();
        std::fs::write(&path, &ragged).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn bitwise_eq_detects_value_and_metadata_differences() {
        let model = Model::init(tiny_config(), None, 5).unwrap();
        let a = Checkpoint::snapshot(&model, "h".into(), names(2)).unwrap();
        let b = Checkpoint::snapshot(&model, "h".into(), names(2)).unwrap();
        assert!(a.bitwise_eq(&b));
        b.model.params.conv_bias.update_data(|d| d[0] += 1e-300);
        assert!(!a.bitwise_eq(&b));
        let c = Checkpoint::snapshot(&model, "other".into(), names(2)).unwrap();
        assert!(!a.bitwise_eq(&c));
    }
}
