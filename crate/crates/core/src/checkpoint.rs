//! Checkpoint files.
//!
//! Layout: the 8-byte magic `VOLTACKP`, the header length as a little-endian
//! `u64`, a compact JSON header, then every tensor as contiguous
//! little-endian `f64`s. The header holds the format version, the run
//! config, the vocabulary, the optimizer kind and step count, the training
//! step, and a directory of `(name, shape, offset)` entries whose offsets
//! count `f64`s from the start of the payload. Parameters are stored as
//! `param/<name>`, optimizer buffers as `opt.m/<name>` and `opt.v/<name>`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VoltaError};
use crate::model::{ModelConfig, VoltaModel};
use crate::tensor::{ParamStore, Tensor};
use crate::tokenizer::Vocab;
use crate::train::{OptimizerKind, OptimizerState, RunConfig, Trainer};

pub const MAGIC: &[u8; 8] = b"VOLTACKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    step: usize,
    config: RunConfig,
    vocab: Vocab,
    optimizer_kind: OptimizerKind,
    optimizer_t: u64,
    payload_len: usize,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub config: RunConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub optimizer: OptimizerState,
}

fn err(field: impl Into<String>, message: impl Into<String>) -> VoltaError {
    VoltaError::Checkpoint {
        field: field.into(),
        message: message.into(),
    }
}

/// Checks that `params` has exactly the names and shapes `cfg` implies.
pub fn check_shapes(params: &ParamStore, cfg: &ModelConfig) -> Result<()> {
    let template = VoltaModel::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    // a latent width change shows up everywhere the stream is read, so the
    // heads that define it are reported first
    let mut order: Vec<(&String, &Tensor)> = template.params.iter().collect();
    order.sort_by_key(|(n, _)| !(n.starts_with("head.") || n.starts_with("prior.")));
    for (name, t) in order {
        let got = params
            .get(name)
            .map_err(|_| err(format!("param/{name}"), "missing from checkpoint"))?;
        if got.shape() != t.shape() {
            return Err(err(
                format!("param/{name}"),
                format!(
                    "shape {:?} in checkpoint, {:?} expected by the config",
                    got.shape(),
                    t.shape()
                ),
            ));
        }
    }
    if let Some(extra) = params.names().find(|n| !template.params.contains(n)) {
        return Err(err(format!("param/{extra}"), "not part of the configured model"));
    }
    Ok(())
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Checkpoint {
        Checkpoint {
            step: t.step,
            config: t.config.clone(),
            vocab: t.vocab.clone(),
            params: t.model.params.clone(),
            optimizer: t.optimizer.clone(),
        }
    }

    pub fn model(&self) -> VoltaModel {
        VoltaModel {
            config: self.config.model.clone(),
            params: self.params.clone(),
        }
    }

    /// Rebuilds a trainer that continues from this checkpoint.
    pub fn into_trainer(self) -> Result<Trainer> {
        let corpus = self.config.load_corpus()?;
        let model = self.model();
        Trainer::with_state(self.config, self.vocab, corpus, model, Some(self.optimizer), self.step)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut payload: Vec<f64> = Vec::new();
        let mut push = |prefix: &str, store: &ParamStore| {
            for (name, t) in store.iter() {
                tensors.push(TensorEntry {
                    name: format!("{prefix}/{name}"),
                    shape: t.shape().to_vec(),
                    offset: payload.len(),
                });
                payload.extend_from_slice(t.data());
            }
        };
        push("param", &self.params);
        push("opt.m", &self.optimizer.m);
        push("opt.v", &self.optimizer.v);
        let header = Header {
            version: FORMAT_VERSION,
            step: self.step,
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            optimizer_kind: self.optimizer.kind,
            optimizer_t: self.optimizer.t,
            payload_len: payload.len(),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for x in payload {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(err("magic", "not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err(err("header", format!("truncated: {} of {hlen} bytes", body.len())));
        }
        let value: serde_json::Value =
            serde_json::from_slice(&body[..hlen]).map_err(|e| err("header", e.to_string()))?;
        match value.get("version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(FORMAT_VERSION) => {}
            Some(v) => return Err(err("version", format!("format version {v}, expected {FORMAT_VERSION}"))),
            None => return Err(err("version", "missing")),
        }
        let header: Header = serde_json::from_value(value).map_err(|e| err("header", e.to_string()))?;
        let payload = &body[hlen..];
        if payload.len() != header.payload_len * 8 {
            return Err(err(
                "payload",
                format!(
                    "truncated or oversized: {} bytes, {} expected",
                    payload.len(),
                    header.payload_len * 8
                ),
            ));
        }
        let read = |e: &TensorEntry| -> Result<Tensor> {
            let n: usize = e.shape.iter().product();
            if e.offset + n > header.payload_len {
                return Err(err(e.name.clone(), "extends past the payload"));
            }
            let data = payload[e.offset * 8..(e.offset + n) * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::new(e.shape.clone(), data).map_err(|x| err(e.name.clone(), x.to_string()))
        };
        let mut params = ParamStore::new();
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for e in &header.tensors {
            let (prefix, name) = e
                .name
                .split_once('/')
                .ok_or_else(|| err(e.name.clone(), "unknown tensor group"))?;
            let store = match prefix {
                "param" => &mut params,
                "opt.m" => &mut m,
                "opt.v" => &mut v,
                _ => return Err(err(e.name.clone(), "unknown tensor group")),
            };
            store.insert(name, read(e)?);
        }
        check_shapes(&params, &header.config.model)?;
        Ok(Checkpoint {
            step: header.step,
            config: header.config,
            vocab: header.vocab,
            params,
            optimizer: OptimizerState {
                kind: header.optimizer_kind,
                t: header.optimizer_t,
                m,
                v,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| VoltaError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| VoltaError::Io(format!("{}: {e}", path.display())))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Loads and checks the weights against a model config other than the
    /// one stored in the file.
    pub fn load_for(path: &Path, cfg: &ModelConfig) -> Result<Checkpoint> {
        let ck = Checkpoint::load(path)?;
        let want = ModelConfig {
            vocab_size: ck.vocab.len(),
            ..cfg.clone()
        };
        check_shapes(&ck.params, &want)?;
        Ok(ck)
    }
}
