use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::growth::{EpochSplit, PimConfig};
use crate::model::{ArchSpec, GrowthFactor};

use super::optim::{OptimConfig, OptimizerKind};

pub const CONFIG_VERSION: u32 = 1;

/// Which online-learning recipe a run follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Inherit, search and grow at every step after the first.
    Growclip,
    /// Rebuild the base architecture from scratch at every step.
    Tfs,
    /// Keep training the previous weights.
    Twp,
    /// Shrink and perturb the previous weights, then train.
    Sap,
    /// Search from scratch, then train the winner from scratch.
    Nas,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "growclip" => Ok(Mode::Growclip),
            "tfs" => Ok(Mode::Tfs),
            "twp" => Ok(Mode::Twp),
            "sap" => Ok(Mode::Sap),
            "nas" => Ok(Mode::Nas),
            _ => Err(Error::Config(format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub total_pairs: usize,
    pub steps: usize,
    pub corpus_seed: u64,
    pub permutation_seed: u64,
    /// Held-out images scored during architecture selection.
    pub selection_size: usize,
    /// Held-out pairs for per-step reporting.
    pub test_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSettings {
    pub alpha: f64,
    /// Factors that never grow.
    #[serde(default)]
    pub frozen: Vec<GrowthFactor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub lr: f64,
    /// Linear warmup iterations at the start of every step.
    pub warmup: usize,
    pub epochs: EpochSplit,
    pub optimizer: OptimConfig,
}

/// Complete description of one run. Serialized as TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub mode: Mode,
    pub seed: u64,
    pub data: DataConfig,
    pub base: ArchSpec,
    pub pim: PimConfig,
    pub selection: SelectionSettings,
    pub train: TrainSettings,
}

impl RunConfig {
    /// Desk defaults: the step-1 base architecture, 30 epochs per step split 2/2/26.
    pub fn desk() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            mode: Mode::Growclip,
            seed: 0,
            data: DataConfig {
                total_pairs: 8000,
                steps: 4,
                corpus_seed: 0,
                permutation_seed: 1,
                selection_size: 1024,
                test_size: 1024,
            },
            base: ArchSpec::base(Vocabulary::new().len()),
            pim: PimConfig::default(),
            selection: SelectionSettings { alpha: 0.5, frozen: Vec::new() },
            train: TrainSettings {
                batch_size: 64,
                lr: 3e-3,
                warmup: 200,
                epochs: EpochSplit::default(),
                optimizer: OptimConfig::default(),
            },
        }
    }

    /// Full-scale preset: LAMB at 0.01, batch 1536, 4000 warmup iterations, 224-pixel images.
    pub fn full() -> Self {
        let mut c = Self::desk();
        c.base.image_size = 224;
        c.base.patch_size = 16;
        c.train.batch_size = 1536;
        c.train.lr = 0.01;
        c.train.warmup = 4000;
        c.train.optimizer.kind = OptimizerKind::Lamb;
        c
    }

    /// Desk schedule on a one-block, two-head base of width 8 with a 256-image
    /// selection set. Fits a full four-step run into minutes on one core.
    pub fn tiny() -> Self {
        let mut c = Self::desk();
        let b = &mut c.base;
        (b.head_dim_img, b.head_dim_txt, b.heads_img, b.heads_txt) = (4, 4, 2, 2);
        (b.blocks_img, b.blocks_txt, b.embed_dim, b.stem_channels) = (1, 1, 16, 3);
        c.data.selection_size = 256;
        c
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            "full" => Ok(Self::full()),
            _ => Err(Error::Config(format!("unknown profile `{name}` (desk, tiny, full)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.base.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.pim.validate()?;
        let vocab = Vocabulary::new().len();
        if self.base.vocab_size < vocab {
            return Err(Error::Config(format!("vocab_size {} is below the corpus vocabulary of {vocab}", self.base.vocab_size)));
        }
        if self.data.steps == 0 || self.data.total_pairs < self.data.steps {
            return Err(Error::Config("need 1 <= steps <= total_pairs".into()));
        }
        if self.data.selection_size == 0 || self.data.test_size == 0 {
            return Err(Error::Config("selection and test splits must be non-empty".into()));
        }
        let first = self.data.total_pairs / self.data.steps;
        if self.train.batch_size == 0 || self.train.batch_size > first {
            return Err(Error::Config(format!(
                "batch size {} must lie in 1..={first} (the step-1 manifest)",
                self.train.batch_size
            )));
        }
        if !(self.train.lr > 0.0) || !(self.selection.alpha >= 0.0) {
            return Err(Error::Config("lr must be > 0 and alpha >= 0".into()));
        }
        if self.train.epochs.total() == 0 {
            return Err(Error::Config("the per-step epoch budget is zero".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Epochs every step trains for.
    pub fn epoch_budget(&self) -> usize {
        self.train.epochs.total()
    }

    /// SHA-256 of the canonical TOML; checkpoints record it for resume checks.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Applies a `key=value` override to a scalar field, e.g. `train.lr=0.001`.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let mut doc: toml::Value = toml::Value::try_from(&*self).expect("config serializes");
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        *slot = match slot {
            toml::Value::Integer(_) => toml::Value::Integer(value.parse().map_err(|_| bad_value(key, value))?),
            toml::Value::Float(_) => toml::Value::Float(value.parse().map_err(|_| bad_value(key, value))?),
            toml::Value::Boolean(_) => toml::Value::Boolean(value.parse().map_err(|_| bad_value(key, value))?),
            toml::Value::String(_) => toml::Value::String(value.to_string()),
            _ => return Err(Error::Config(format!("`{key}` is not a scalar"))),
        };
        let next: RunConfig = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        next.validate()?;
        *self = next;
        Ok(())
    }
}

fn bad_value(key: &str, value: &str) -> Error {
    Error::Config(format!("`{value}` is not a valid value for `{key}`"))
}
