use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ParamStore, StoredTensor};
use super::train::{Adam, TrainConfig, Trainer};
use super::{Model, ModelConfig, Sizes};
use crate::encoding::EncodingSpec;
use crate::error::{Error, Result};
use crate::kg::{GraphFile, Vocab};
use crate::rng::RngState;

pub const CHECKPOINT_FORMAT: &str = "numcqa-checkpoint/v1";

/// Everything needed to rank with a model or to continue training it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub model: ModelConfig,
    pub encoding: EncodingSpec,
    pub value_types: Vec<String>,
    pub sizes: Sizes,
    pub params: BTreeMap<String, StoredTensor>,
    pub optimizer: Adam,
    pub train: TrainConfig,
    pub rng: RngState,
    pub step: u64,
    /// Vocabulary of the training graph, so that queries can be bound
    /// without it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<GraphFile>,
    /// Free-form run configuration kept for reproducibility.
    #[serde(default)]
    pub run: serde_json::Value,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer, run: serde_json::Value) -> Self {
        let m = &t.model;
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_owned(),
            model: m.config,
            encoding: m.encoding.clone(),
            value_types: m.value_types.clone(),
            sizes: m.sizes,
            params: m.params.to_stored(),
            optimizer: t.adam.clone(),
            train: t.config,
            rng: t.rng_state(),
            step: t.step,
            vocab: None,
            run,
        }
    }

    pub fn model(&self) -> Result<Model> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format `{}`", self.format)));
        }
        self.encoding.validate()?;
        let params =
            ParamStore::from_stored(&self.params).ok_or_else(|| Error::Checkpoint("tensor with inconsistent shape".into()))?;
        Ok(Model {
            config: self.model,
            encoding: self.encoding.clone(),
            value_types: self.value_types.clone(),
            sizes: self.sizes,
            params,
        })
    }

    pub fn with_vocab(mut self, vocab: &Vocab) -> Self {
        self.vocab = Some(GraphFile::from_vocab(vocab));
        self
    }

    /// The stored vocabulary, checked against the model sizes.
    pub fn vocab(&self) -> Result<Option<Vocab>> {
        let Some(f) = &self.vocab else {
            return Ok(None);
        };
        let v = f.vocab()?;
        self.model()?.check_vocab(&v)?;
        Ok(Some(v))
    }

    pub fn trainer(&self) -> Result<Trainer> {
        Trainer::resume(self.model()?, self.optimizer.clone(), self.train, self.rng, self.step)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Checkpoint = serde_json::from_str(&text)?;
        c.model()?;
        Ok(c)
    }
}
