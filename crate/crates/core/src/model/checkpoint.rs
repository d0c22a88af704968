//! Self-describing JSON checkpoints.

use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::net::{Block, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::seed::Rng;
use crate::split::hex;

pub const FORMAT: &str = "phasedg-checkpoint/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Init,
    Pretrained,
    Finetuned,
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub kind: CheckpointKind,
    pub seed: u64,
    pub epoch: usize,
    pub step: usize,
    /// Free-form labels (variant, init checkpoint hash, manifest hash, ...).
    #[serde(default)]
    pub notes: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        RngState {
            seed: hex(&rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<Rng> {
        let bad = || Error::Checkpoint("malformed rng state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub block_index: Vec<String>,
    pub trainable_blocks: usize,
    pub provenance: Provenance,
    pub rng: Option<RngState>,
    pub weights_sha256: String,
    pub blocks: Vec<Block>,
}

/// SHA-256 over the configuration and the little-endian bytes of every
/// parameter in block order.
pub fn weights_hash(config: &ModelConfig, blocks: &[Block]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    for b in blocks {
        h.update(b.name.as_bytes());
        for p in &b.params {
            h.update(p.name.as_bytes());
            for v in &p.data {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex(&h.finalize())
}

impl Checkpoint {
    pub fn new(model: &Model, provenance: Provenance, rng: Option<&Rng>) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            config: model.config().clone(),
            block_index: model.config().block_names(),
            trainable_blocks: model.n_trainable_blocks(),
            provenance,
            rng: rng.map(RngState::capture),
            weights_sha256: weights_hash(model.config(), model.blocks()),
            blocks: model.blocks().to_vec(),
        }
    }

    pub fn hash(&self) -> &str {
        &self.weights_sha256
    }

    pub fn model(&self) -> Result<Model> {
        self.verify()?;
        let total = self.config.n_blocks();
        if self.trainable_blocks == 0 || self.trainable_blocks > total {
            return Err(Error::BlockRange {
                k: self.trainable_blocks,
                total,
            });
        }
        Model::from_blocks(self.config.clone(), self.blocks.clone(), total - self.trainable_blocks)
    }

    pub fn verify(&self) -> Result<()> {
        if self.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", self.format)));
        }
        if self.block_index != self.config.block_names() {
            return Err(Error::Checkpoint("block index does not match configuration".into()));
        }
        let h = weights_hash(&self.config, &self.blocks);
        if h != self.weights_sha256 {
            return Err(Error::Checkpoint(format!(
                "weights hash mismatch: stored {}, computed {h}",
                self.weights_sha256
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let s = serde_json::to_string(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Checkpoint = serde_json::from_str(&s)?;
        c.verify()?;
        Ok(c)
    }
}
