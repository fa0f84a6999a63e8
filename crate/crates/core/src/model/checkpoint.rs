use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, TranslationModel};
use crate::corpus::Tokenizer;

pub const CHECKPOINT_FORMAT: &str = "ctxslt-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Model configuration, vocabulary and every parameter by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub vocabulary: Tokenizer,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn from_model(model: &TranslationModel, vocabulary: &Tokenizer) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            config: model.config().clone(),
            vocabulary: vocabulary.clone(),
            params: model
                .store()
                .iter()
                .map(|p| ParamRecord {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    data: p.tensor.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds the model and checks that every parameter is present with the
    /// expected shape.
    pub fn into_model(self) -> Result<(TranslationModel, Tokenizer), ModelError> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Checkpoint(format!("unsupported format {:?}", self.format)));
        }
        if self.vocabulary.len() != self.config.vocab_size {
            return Err(ModelError::Checkpoint(format!(
                "vocabulary has {} entries but vocab_size is {}",
                self.vocabulary.len(),
                self.config.vocab_size
            )));
        }
        let mut model = TranslationModel::new(self.config, 0)?;
        if self.params.len() != model.store().len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameters, found {}",
                model.store().len(),
                self.params.len()
            )));
        }
        for rec in self.params {
            let store = model.store_mut();
            let id = store
                .id(&rec.name)
                .ok_or_else(|| ModelError::Checkpoint(format!("unknown parameter {:?}", rec.name)))?;
            let p = store.get_mut(id);
            if p.tensor.shape() != rec.shape.as_slice() || rec.data.len() != p.tensor.numel() {
                return Err(ModelError::Checkpoint(format!(
                    "parameter {:?} has shape {:?}, expected {:?}",
                    rec.name,
                    rec.shape,
                    p.tensor.shape()
                )));
            }
            if rec.data.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::Checkpoint(format!("parameter {:?} is not finite", rec.name)));
            }
            p.tensor.data_mut().copy_from_slice(&rec.data);
        }
        Ok((model, self.vocabulary))
    }
}

/// Parses checkpoint JSON into a model and its vocabulary.
pub fn parse_checkpoint(text: &str) -> Result<(TranslationModel, Tokenizer), ModelError> {
    let ck: Checkpoint = serde_json::from_str(text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    ck.into_model()
}

pub fn save_checkpoint(path: &Path, model: &TranslationModel, vocabulary: &Tokenizer) -> Result<(), ModelError> {
    let text = serde_json::to_string(&Checkpoint::from_model(model, vocabulary))
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    fs::write(path, text).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(TranslationModel, Tokenizer), ModelError> {
    let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_checkpoint(&text)
}
