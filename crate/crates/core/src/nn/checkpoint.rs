//! Checkpoint files: magic, version, a JSON manifest, then PSTN tensors.
//!
//! Layout: `b"PSGRCKPT"`, `u32` version, `u64` manifest length (all little
//! endian), the manifest, then the tensor blobs back to back. Offsets in the
//! manifest are relative to the first blob.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::SegNet;
use super::train::TrainConfig;
use crate::error::{PsgrError, Result};
use crate::pstn;
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 8] = b"PSGRCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    offset: u64,
    len: u64,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: TrainConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: SegNet<f32>,
}

fn to_bytes(config: &TrainConfig, model: &SegNet<f32>) -> Result<Vec<u8>> {
    let mut named: Vec<(String, Tensor<f32>)> = model
        .param_names()
        .iter()
        .cloned()
        .zip(model.params().iter().cloned())
        .collect();
    named.extend(model.buffers());
    let mut blobs = Vec::new();
    let mut tensors = Vec::with_capacity(named.len());
    for (name, t) in &named {
        let bytes = pstn::encode(t);
        tensors.push(TensorEntry {
            name: name.clone(),
            offset: blobs.len() as u64,
            len: bytes.len() as u64,
            shape: t.shape().to_vec(),
            dtype: f32::DTYPE.name().to_string(),
        });
        blobs.extend(bytes);
    }
    let manifest = serde_json::to_vec(&Manifest {
        config: config.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(20 + manifest.len() + blobs.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend(manifest);
    out.extend(blobs);
    Ok(out)
}

fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| PsgrError::Format(format!("checkpoint: {m}"));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = 20usize.checked_add(mlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[20..body])?;
    manifest.config.validate()?;
    let blobs = &bytes[body..];
    let mut model = SegNet::<f32>::new(manifest.config.model_config(), manifest.config.seed)?;
    let expected = model.param_names().len() + model.buffers().len();
    if manifest.tensors.len() != expected {
        return Err(bad(&format!("{} tensors, expected {expected}", manifest.tensors.len())));
    }
    for e in &manifest.tensors {
        let start = e.offset as usize;
        let end = start
            .checked_add(e.len as usize)
            .filter(|&end| end <= blobs.len())
            .ok_or_else(|| bad(&format!("tensor {} out of range", e.name)))?;
        let t: Tensor<f32> = pstn::decode(&blobs[start..end])?.into_float()?;
        if t.shape() != e.shape.as_slice() {
            return Err(bad(&format!("tensor {} shape disagrees with manifest", e.name)));
        }
        model.set_tensor(&e.name, t)?;
    }
    Ok(Checkpoint {
        config: manifest.config,
        model,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, config: &TrainConfig, model: &SegNet<f32>) -> Result<()> {
    std::fs::write(path, to_bytes(config, model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn round_trip_preserves_every_tensor() {
        let cfg = TrainConfig { ru: 0.1, n_classes: 3, ..TrainConfig::default() };
        let mut model = SegNet::<f32>::new(cfg.model_config(), 3).unwrap();
        let mut rng = Rng::new(1);
        let shape = model.params()[2].shape().to_vec();
        model.params_mut()[2] = rng.normal_tensor(&shape);
        model.set_tensor("bn.dec1.var", rng.uniform_tensor(&[16], 0.5, 2.0)).unwrap();
        let bytes = to_bytes(&cfg, &model).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.config, cfg);
        assert_eq!(back.model, model);
        assert_eq!(to_bytes(&back.config, &back.model).unwrap(), bytes);
    }

    #[test]
    fn corrupt_input_is_a_format_error() {
        let cfg = TrainConfig::default();
        let model = SegNet::<f32>::new(cfg.model_config(), 0).unwrap();
        let bytes = to_bytes(&cfg, &model).unwrap();
        assert!(matches!(from_bytes(&bytes[..10]), Err(PsgrError::Format(_))));
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(from_bytes(&wrong), Err(PsgrError::Format(_))));
    }
}
