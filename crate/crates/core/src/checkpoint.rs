//! Checkpoint files: a JSON header followed by raw little-endian parameter
//! and optimizer blobs.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{config_hash, PolicyConfig, TrainConfig};
use crate::episode::TaskEntry;
use crate::error::{Error, Result};
use crate::instruction::EncoderSpec;
use crate::model::Policy;
use crate::params::{hex, Adam};
use crate::tensor::Tensor;
use crate::train::MetricsRow;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DSKCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    /// Decimal; the word position is a u128.
    word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config_hash: String,
    policy: PolicyConfig,
    encoder: EncoderSpec,
    train: TrainConfig,
    iteration: u64,
    adam_step: u64,
    rng: RngState,
    params: Vec<ParamEntry>,
    log: Vec<MetricsRow>,
    tasks: Vec<TaskEntry>,
}

/// Everything needed to resume training or to run the policy.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub policy: Policy<f32>,
    pub adam: Adam<f32>,
    pub iteration: u64,
    pub train: TrainConfig,
    pub log: Vec<MetricsRow>,
    /// Task variations of the dataset the policy was trained from, both splits.
    pub tasks: Vec<TaskEntry>,
    rng: RngState,
}

impl Checkpoint {
    pub fn new(
        policy: &Policy<f32>,
        adam: &Adam<f32>,
        rng: &ChaCha8Rng,
        iteration: u64,
        train: &TrainConfig,
        log: &[MetricsRow],
    ) -> Self {
        Checkpoint {
            policy: policy.clone(),
            adam: adam.clone(),
            iteration,
            train: train.clone(),
            log: log.to_vec(),
            tasks: Vec::new(),
            rng: RngState {
                seed: hex(&rng.get_seed()),
                stream: rng.get_stream(),
                word_pos: rng.get_word_pos().to_string(),
            },
        }
    }

    /// Hash of the policy config, text encoder and training config.
    pub fn config_hash(&self) -> String {
        config_hash(&(&self.policy.config, &self.policy.encoder_spec, &self.train))
    }

    /// The sampling stream at the saved iteration.
    pub fn rng(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::BadContainer("malformed rng state".into());
        let s = &self.rng.seed;
        if s.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.rng.stream);
        rng.set_word_pos(self.rng.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let store = &self.policy.params;
        let header = Header {
            config_hash: self.config_hash(),
            policy: self.policy.config.clone(),
            encoder: self.policy.encoder_spec.clone(),
            train: self.train.clone(),
            iteration: self.iteration,
            adam_step: self.adam.step,
            rng: self.rng.clone(),
            params: store
                .iter()
                .map(|(_, name, t)| ParamEntry { name: name.to_string(), shape: t.shape().to_vec() })
                .collect(),
            log: self.log.clone(),
            tasks: self.tasks.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        let body_start = out.len();
        out.extend_from_slice(&header);
        let blobs = store.iter().map(|(_, _, t)| t).chain(&self.adam.m).chain(&self.adam.v);
        for t in blobs {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out[body_start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 16 {
            return Err(Error::Truncated(format!("{} bytes is shorter than the preamble", buf.len())));
        }
        if &buf[..8] != CHECKPOINT_MAGIC {
            return Err(Error::BadContainer("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
        }
        let header_len = u32::from_le_bytes(buf[12..16].try_into().unwrap()) as usize;
        let header_end = 16 + header_len;
        if buf.len() < header_end + 4 {
            return Err(Error::Truncated("header extends past end of file".into()));
        }
        let header: Header = serde_json::from_slice(&buf[16..header_end])?;
        let n: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
        let expected_len = header_end + 3 * n * 4 + 4;
        if buf.len() < expected_len {
            return Err(Error::Truncated(format!("{} bytes, expected {expected_len}", buf.len())));
        }
        if buf.len() > expected_len {
            return Err(Error::BadContainer(format!("{} trailing bytes", buf.len() - expected_len)));
        }
        let stored = u32::from_le_bytes(buf[expected_len - 4..].try_into().unwrap());
        let found = crc32fast::hash(&buf[16..expected_len - 4]);
        if stored != found {
            return Err(Error::Checksum { expected: stored, found });
        }

        let mut policy = Policy::<f32>::new(header.policy.clone(), header.encoder.clone())?;
        let layout: Vec<ParamEntry> = policy
            .params
            .iter()
            .map(|(_, name, t)| ParamEntry { name: name.to_string(), shape: t.shape().to_vec() })
            .collect();
        if layout != header.params {
            return Err(Error::Incompatible("parameter layout differs from the one the config builds".into()));
        }
        let mut cursor = header_end;
        let mut read = |shape: &[usize]| {
            let len: usize = shape.iter().product();
            let data = buf[cursor..cursor + 4 * len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            cursor += 4 * len;
            Tensor::new(shape, data)
        };
        let ids: Vec<_> = policy.params.ids().collect();
        for (&id, p) in ids.iter().zip(&header.params) {
            *policy.params.get_mut(id) = read(&p.shape);
        }
        let mut adam = Adam::new(header.train.adam(), &policy.params);
        adam.step = header.adam_step;
        for (m, p) in adam.m.iter_mut().zip(&header.params) {
            *m = read(&p.shape);
        }
        for (v, p) in adam.v.iter_mut().zip(&header.params) {
            *v = read(&p.shape);
        }
        let ckpt = Checkpoint {
            policy,
            adam,
            iteration: header.iteration,
            train: header.train,
            log: header.log,
            tasks: header.tasks,
            rng: header.rng,
        };
        if ckpt.config_hash() != header.config_hash {
            return Err(Error::Incompatible("config hash does not match the stored configs".into()));
        }
        ckpt.rng()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::from(e).in_file(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
        Self::from_bytes(&buf).map_err(|e| e.in_file(path))
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(self.to_bytes()?)))
    }
}
