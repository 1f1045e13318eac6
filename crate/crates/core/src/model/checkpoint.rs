use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::transformer::Model;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

pub const CHECKPOINT_FORMAT: &str = "semsmooth-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

/// A model snapshot. Floats are written with round-trip precision, so a
/// loaded model reproduces the saved one's outputs bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub seed: u64,
    pub epoch: usize,
    pub vocab: Vocabulary,
    tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(model: &Model, vocab: &Vocabulary, seed: u64, epoch: usize) -> Result<Self> {
        if vocab.len() != model.config.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens, model expects {}",
                vocab.len(),
                model.config.vocab_size
            )));
        }
        let tensors = model
            .params
            .iter()
            .map(|(name, t)| NamedTensor {
                name: name.to_string(),
                shape: [t.nrows(), t.ncols()],
                data: t.iter().copied().collect(),
            })
            .collect();
        Ok(Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            seed,
            epoch,
            vocab: vocab.clone(),
            tensors,
        })
    }

    pub fn to_model(&self) -> Result<Model> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        if self.vocab.len() != self.config.vocab_size {
            return Err(Error::Data(format!(
                "checkpoint vocabulary has {} tokens, config says {}",
                self.vocab.len(),
                self.config.vocab_size
            )));
        }
        let mut params = ParamStore::new();
        for t in &self.tensors {
            let tensor = Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone())
                .map_err(|e| Error::Data(format!("tensor `{}`: {e}", t.name)))?;
            if params.index_of(&t.name).is_some() {
                return Err(Error::Data(format!("tensor `{}` stored twice", t.name)));
            }
            params.add(t.name.clone(), tensor);
        }
        if !params.all_finite() {
            return Err(Error::Data("checkpoint holds non-finite values".into()));
        }
        Model::from_params(self.config.clone(), params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
