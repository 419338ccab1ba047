//! Binary checkpoints: model weights, normalization, optimizer state and
//! training progress in one checksummed file.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, JSON header,
//! raw little-endian `f32` tensor data, then the SHA-256 of everything
//! before it.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::NormalizationSpec;
use crate::model::{AqNet, AqNetConfig};
use crate::nn::{AdamW, AdamWConfig, Moments, NamedParams, Tensor};
use crate::train::TrainConfig;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"AQNETCK1";
const FORMAT_VERSION: u32 = 1;

/// Position of a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    /// Completed optimizer iterations.
    pub iteration: u64,
    pub best_val_rmse: Option<f64>,
    pub best_iteration: Option<u64>,
    /// Training loss accumulated since the last log record.
    pub loss_sum: f64,
    pub loss_count: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: AqNet<f32>,
    pub norm: NormalizationSpec,
    pub optimizer: AdamW<f32>,
    pub progress: TrainProgress,
    pub train_config: Option<TrainConfig>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: u32,
    model_config: AqNetConfig,
    norm: NormalizationSpec,
    optimizer: AdamWConfig,
    optimizer_step: u64,
    progress: TrainProgress,
    train_config: Option<TrainConfig>,
    tensors: Vec<TensorEntry>,
}

const PARAM: &str = "param/";
const FIRST: &str = "adam.m/";
const SECOND: &str = "adam.v/";

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.model.validate()?;
        let mut tensors: Vec<(String, &Tensor<f32>)> = self
            .model
            .named()
            .into_iter()
            .map(|(n, t)| (format!("{PARAM}{n}"), t))
            .collect();
        for (n, m) in &self.optimizer.moments {
            tensors.push((format!("{FIRST}{n}"), &m.first));
            tensors.push((format!("{SECOND}{n}"), &m.second));
        }
        let mut entries = Vec::with_capacity(tensors.len());
        let mut offset = 0;
        for (name, t) in &tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
        }
        let header = Header {
            format: FORMAT_VERSION,
            model_config: self.model.config.clone(),
            norm: self.norm.clone(),
            optimizer: self.optimizer.config,
            optimizer_step: self.optimizer.step,
            progress: self.progress.clone(),
            train_config: self.train_config.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 4 * offset + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch (file is corrupt or truncated)"));
        }
        let hlen = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
        let json = body
            .get(16..16 + hlen)
            .ok_or_else(|| bad("header length exceeds file"))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| bad(&format!("header: {e}")))?;
        if header.format != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {}", header.format)));
        }
        let data = &body[16 + hlen..];
        if data.len() % 4 != 0 {
            return Err(bad("tensor data is not a whole number of f32 values"));
        }
        let floats: Vec<f32> = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();

        let mut by_name: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let slice = floats
                .get(e.offset..e.offset + n)
                .ok_or_else(|| bad(&format!("tensor {} exceeds data", e.name)))?;
            by_name.insert(e.name.clone(), Tensor::new(e.shape.clone(), slice.to_vec())?);
        }

        let mut model = AqNet::<f32>::zeros(header.model_config.clone())?;
        for (name, slot) in model.named_mut() {
            let t = by_name
                .remove(&format!("{PARAM}{name}"))
                .ok_or_else(|| bad(&format!("missing parameter {name}")))?;
            if t.shape() != slot.shape() {
                return Err(bad(&format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        model.validate()?;

        let mut optimizer = AdamW::new(header.optimizer);
        optimizer.step = header.optimizer_step;
        let firsts: Vec<String> = by_name
            .keys()
            .filter_map(|k| k.strip_prefix(FIRST).map(str::to_string))
            .collect();
        for name in firsts {
            let first = by_name.remove(&format!("{FIRST}{name}")).expect("listed");
            let second = by_name
                .remove(&format!("{SECOND}{name}"))
                .ok_or_else(|| bad(&format!("missing second moment for {name}")))?;
            optimizer.moments.insert(name, Moments { first, second });
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(bad(&format!("unexpected tensor {extra}")));
        }
        header.norm.validate()?;
        Ok(Self {
            model,
            norm: header.norm,
            optimizer,
            progress: header.progress,
            train_config: header.train_config,
        })
    }

    /// Writes to a temporary sibling and renames it into place, so readers
    /// never observe a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Short content hash identifying this checkpoint.
    pub fn id(&self) -> Result<String> {
        let bytes = self.to_bytes()?;
        Ok(hex::encode(&bytes[bytes.len() - 32..][..8]))
    }
}
