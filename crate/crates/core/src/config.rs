//! The structured configuration file that drives every CLI verb.
//!
//! A config is a TOML document whose tables mirror [`GlobalConfig`]. Every
//! key is optional; missing keys take the defaults below. Individual keys
//! can be overridden with dotted paths (`finetune.lr=0.0005`), which are
//! parsed as TOML values and merged into the document before it is decoded.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::finetune::{InitKind, StepUnit, TrainConfig};
use crate::model::{ModelConfig, PromptPolicy};
use crate::ssl::SslConfig;

/// A fine-tuning depth: the last `k` blocks, or all of them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlocksK {
    Last(usize),
    All,
}

impl BlocksK {
    pub fn resolve(self, n_blocks: usize) -> usize {
        match self {
            BlocksK::Last(k) => k,
            BlocksK::All => n_blocks,
        }
    }
}

impl fmt::Display for BlocksK {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlocksK::Last(k) => write!(f, "{k}"),
            BlocksK::All => f.write_str("all"),
        }
    }
}

impl std::str::FromStr for BlocksK {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(BlocksK::All);
        }
        match s.parse::<usize>() {
            Ok(k) if k >= 1 => Ok(BlocksK::Last(k)),
            _ => Err(Error::InvalidConfig(format!(
                "blocks_k must be a positive integer or \"all\", got {s:?}"
            ))),
        }
    }
}

impl Serialize for BlocksK {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            BlocksK::Last(k) => s.serialize_u64(*k as u64),
            BlocksK::All => s.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for BlocksK {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(k) => format!("{k}").parse(),
            Raw::S(s) => s.parse(),
        }
        .map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub train_fractions: Vec<f64>,
    /// Checkpoint grid of the epoch sweep.
    pub epoch_grid: Vec<usize>,
    pub blocks_k: Vec<BlocksK>,
    pub prompt_policies: Vec<PromptPolicy>,
    /// Test-subset sizes of the bootstrap dispersion analysis.
    pub bootstrap_sizes: Vec<usize>,
    pub bootstrap_resamples: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            train_fractions: vec![0.2, 0.5, 1.0],
            epoch_grid: vec![10, 25, 50, 100, 200],
            blocks_k: vec![BlocksK::Last(1), BlocksK::Last(2), BlocksK::All],
            prompt_policies: PromptPolicy::ALL.to_vec(),
            bootstrap_sizes: vec![5, 10, 25, 50],
            bootstrap_resamples: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalConfig {
    /// Seed for single-run verbs.
    pub seed: u64,
    /// Seeds of the sweeps.
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub exec: ExecMode,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub ssl: SslConfig,
    pub finetune: TrainConfig,
    pub baseline: TrainConfig,
    /// Prompts given to fine-tuned models at evaluation time.
    pub eval_policy: PromptPolicy,
    pub sweeps: SweepConfig,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        GlobalConfig {
            seed: 0,
            seeds: vec![0, 1, 2],
            out_dir: PathBuf::from("runs"),
            exec: ExecMode::Parallel,
            corpus: CorpusConfig::default(),
            model: ModelConfig {
                base_channels: 4,
                ..ModelConfig::default()
            },
            ssl: SslConfig::default(),
            // last two blocks at a reduced rate; each prompt kind dropped
            // half the time so every evaluation policy is seen in training
            finetune: TrainConfig {
                length: 150,
                lr: 3e-4,
                trainable_blocks_k: Some(2),
                prompt_policy: PromptPolicy::PointsAndBox,
                prompt_dropout: 0.5,
                ..TrainConfig::default()
            },
            baseline: TrainConfig {
                length: 150,
                init: InitKind::Random,
                prompt_policy: PromptPolicy::None,
                ..TrainConfig::default()
            },
            eval_policy: PromptPolicy::Box,
            sweeps: SweepConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Value, patch: toml::Value) {
    match (base, patch) {
        (toml::Value::Table(b), toml::Value::Table(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses `a.b.c=value` into a nested table. The value is read as TOML and
/// falls back to a bare string.
pub fn parse_override(spec: &str) -> Result<toml::Value> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override {spec:?} is not key=value")))?;
    let path = path.trim();
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(Error::InvalidConfig(format!("override {spec:?} has an empty key")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok(path.rsplit('.').fold(value, |acc, key| {
        toml::Value::Table(toml::Table::from_iter([(key.to_string(), acc)]))
    }))
}

impl GlobalConfig {
    /// Decodes a TOML document after applying dotted-key overrides. Both are
    /// merged over the rendered defaults, so a partial table keeps the
    /// defaults of its siblings.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc = toml::Value::try_from(GlobalConfig::default()).map_err(|e| Error::Serde(e.to_string()))?;
        let user = toml::from_str::<toml::Table>(text).map_err(|e| Error::InvalidConfig(format!("config: {e}")))?;
        merge(&mut doc, toml::Value::Table(user));
        for o in overrides {
            merge(&mut doc, parse_override(o)?);
        }
        let cfg: GlobalConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Reads `path` (or starts from the defaults when `None`) and applies
    /// the overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(crate::split::hex(&Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.seeds.is_empty() {
            return bad("seeds must list at least one seed");
        }
        self.corpus.validate()?;
        self.model.validate()?;
        self.ssl.validate()?;
        self.finetune.validate()?;
        self.baseline.validate()?;
        let s = &self.sweeps;
        if s.train_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return bad("train_fractions must lie in (0, 1]");
        }
        if s.epoch_grid.contains(&0) || s.bootstrap_sizes.contains(&0) || s.bootstrap_resamples < 2 {
            return bad("epoch_grid and bootstrap_sizes must be >= 1 and bootstrap_resamples >= 2");
        }
        let n = self.model.n_blocks();
        if s.blocks_k.iter().any(|k| !(1..=n).contains(&k.resolve(n))) {
            return bad("blocks_k entries must lie in 1..=number of blocks");
        }
        Ok(())
    }

    /// The baseline schedule used by the epoch sweep: epoch units with a
    /// snapshot at every grid point, no validation selection.
    pub fn epoch_sweep_schedule(&self) -> TrainConfig {
        TrainConfig {
            length: self.sweeps.epoch_grid.iter().copied().max().unwrap_or(1),
            unit: StepUnit::Epochs,
            val_every: None,
            snapshot_epochs: self.sweeps.epoch_grid.clone(),
            ..self.baseline.clone()
        }
    }
}
