//! Transformer encoder-decoder for next-utterance prediction.
//!
//! Everything is double precision and single threaded. Gradients come from
//! a small reverse-mode tape ([`tape`]) recorded during the forward pass.

mod checkpoint;
mod decode;
mod params;
mod tape;
mod train;
mod transformer;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use params::ParamStore;
pub use decode::argmax;
pub use train::{clip_global_norm, global_norm, train, train_with, AdamW, TrainOutcome};
pub use transformer::{init_model, Batch, Model};

use crate::corpus::MAX_CONTEXT;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected paper or desk)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub max_context: usize,
    pub vocab_size: usize,
    pub seed: u64,
    /// Map word vectors of a different width onto `d_model` through a
    /// seeded random projection.
    pub project_embeddings: bool,
}

impl ModelConfig {
    /// 3 layers, 300 wide, 6 heads.
    pub fn paper(vocab_size: usize, seed: u64) -> Self {
        Self {
            n_layers: 3,
            d_model: 300,
            n_heads: 6,
            d_ff: 1200,
            dropout: 0.1,
            max_context: MAX_CONTEXT,
            vocab_size,
            seed,
            project_embeddings: false,
        }
    }

    /// 2 layers, 64 wide, 2 heads.
    pub fn desk(vocab_size: usize, seed: u64) -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 2,
            d_ff: 128,
            dropout: 0.1,
            max_context: MAX_CONTEXT,
            vocab_size,
            seed,
            project_embeddings: true,
        }
    }

    pub fn preset(preset: Preset, vocab_size: usize, seed: u64) -> Self {
        match preset {
            Preset::Paper => Self::paper(vocab_size, seed),
            Preset::Desk => Self::desk(vocab_size, seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.vocab_size < 2 || self.max_context == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// lr 2e-4, batch 64, 15 epochs, clip 1.0, AdamW.
    pub fn paper(seed: u64) -> Self {
        Self {
            learning_rate: 2e-4,
            batch_size: 64,
            epochs: 15,
            clip_norm: 1.0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed,
        }
    }

    /// Batch 16, 5 epochs. The learning rate is raised to 3e-3 so that
    /// five desk epochs get past unigram statistics.
    pub fn desk(seed: u64) -> Self {
        Self {
            learning_rate: 3e-3,
            batch_size: 16,
            epochs: 5,
            ..Self::paper(seed)
        }
    }

    pub fn preset(preset: Preset, seed: u64) -> Self {
        match preset {
            Preset::Paper => Self::paper(seed),
            Preset::Desk => Self::desk(seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.epochs == 0 || !(self.clip_norm > 0.0) || self.batch_size == 0 {
            return Err(Error::Config(
                "learning rate, epochs, batch size and clip value must be positive".into(),
            ));
        }
        Ok(())
    }
}
