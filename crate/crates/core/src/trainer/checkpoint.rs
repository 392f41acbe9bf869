//! Binary checkpoints: `IPA` + one version byte, a little-endian `u32`
//! header length, a JSON header, then little-endian `f32` blobs in header order.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, ModelParams};
use crate::ndgrad::Tensor;
use crate::trainer::{AdamState, TrainConfig};
use crate::{Error, Result};

pub const MAGIC: &[u8; 3] = b"IPA";
pub const VERSION: u8 = b'1';

/// Position of a [`ChaCha8Rng`] stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal `u128` word position.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint(format!("malformed rng state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (k, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * k..2 * k + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the blob section.
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: Option<TrainConfig>,
    step: usize,
    best_metric: Option<f64>,
    rng: Option<RngState>,
    adam_t: Option<u64>,
    blobs: Vec<BlobEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub adam: Option<AdamState<f32>>,
    pub step: usize,
    pub rng: Option<RngState>,
    /// Best dev WER seen so far.
    pub best_metric: Option<f64>,
    pub train_config: Option<TrainConfig>,
}

impl Checkpoint {
    pub fn new(params: ModelParams<f32>) -> Self {
        Self {
            params,
            adam: None,
            step: 0,
            rng: None,
            best_metric: None,
            train_config: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<(String, &Tensor<f32>)> = Vec::new();
        let order = self.params.config().param_shapes();
        for (name, _) in &order {
            tensors.push((format!("param/{name}"), &self.params.tensors()[name]));
        }
        if let Some(a) = &self.adam {
            for (prefix, map) in [("adam.m", &a.m), ("adam.v", &a.v)] {
                for (name, _) in &order {
                    let t = map
                        .get(name)
                        .ok_or_else(|| Error::Checkpoint(format!("optimizer state lacks {name}")))?;
                    tensors.push((format!("{prefix}/{name}"), t));
                }
            }
        }
        let mut offset = 0;
        let blobs = tensors
            .iter()
            .map(|(name, t)| {
                let e = BlobEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len() * 4;
                e
            })
            .collect();
        let header = Header {
            model: self.params.config().clone(),
            train: self.train_config.clone(),
            step: self.step,
            best_metric: self.best_metric,
            rng: self.rng.clone(),
            adam_t: self.adam.as_ref().map(|a| a.t),
            blobs,
        };
        let head = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + head.len() + offset);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(head.len() as u32).to_le_bytes());
        out.extend_from_slice(&head);
        for (_, t) in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..3] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        if bytes[3] != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version byte {:?}, expected {:?}",
                bytes[3] as char, VERSION as char
            )));
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let body = bytes
            .get(8..8 + hlen)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
        let blob = &bytes[8 + hlen..];
        let expected: usize = header
            .blobs
            .iter()
            .map(|b| b.shape.iter().product::<usize>() * 4)
            .sum();
        if blob.len() != expected {
            return Err(Error::Checkpoint(format!(
                "blob section holds {} bytes, header describes {expected}",
                blob.len()
            )));
        }
        let mut params = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        let mut cursor = 0;
        for b in &header.blobs {
            if b.offset != cursor {
                return Err(Error::Checkpoint(format!("blob {} at offset {}, expected {cursor}", b.name, b.offset)));
            }
            let n: usize = b.shape.iter().product();
            let data: Vec<f32> = blob[cursor..cursor + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            cursor += 4 * n;
            let t = Tensor::new(b.shape.clone(), data)?;
            let (kind, name) = b
                .name
                .split_once('/')
                .ok_or_else(|| Error::Checkpoint(format!("unnamed blob {}", b.name)))?;
            let slot = match kind {
                "param" => &mut params,
                "adam.m" => &mut m,
                "adam.v" => &mut v,
                _ => return Err(Error::Checkpoint(format!("unknown blob kind {kind}"))),
            };
            if slot.insert(name.to_string(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate blob {}", b.name)));
            }
        }
        let params = ModelParams::from_tensors(header.model, params)?;
        let adam = match header.adam_t {
            Some(t) => Some(AdamState { m, v, t }),
            None => None,
        };
        Ok(Self {
            params,
            adam,
            step: header.step,
            rng: header.rng,
            best_metric: header.best_metric,
            train_config: header.train,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
