use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::autodiff::Tensor;
use crate::data::FeatureScaler;
use crate::error::{Error, Result};
use crate::model::SslMtpp;

const FORMAT: &str = "ssl-mtpp-checkpoint";
const VERSION: u32 = 1;

/// A trained network with everything needed to evaluate it.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: SslMtpp,
    pub scaler: FeatureScaler,
    pub config: TrainConfig,
    pub protocol: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// JSON container: row-major `f64` values by parameter name, plus the config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub num_classes: usize,
    pub protocol: String,
    pub scaler: FeatureScaler,
    pub has_autoencoder: bool,
    pub params: Vec<SavedParam>,
}

impl Checkpoint {
    pub fn from_trained(trained: &TrainedModel) -> Self {
        let model = &trained.model;
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            config: trained.config.clone(),
            num_classes: model.config().num_classes,
            protocol: trained.protocol.clone(),
            scaler: trained.scaler,
            has_autoencoder: model.has_autoencoder(),
            params: model
                .params()
                .iter()
                .map(|p| SavedParam { name: p.name.clone(), shape: p.value.shape().to_vec(), values: p.value.data().to_vec() })
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("corrupt checkpoint: {e}")))?;
        if ck.format != FORMAT || ck.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format {} v{}", ck.format, ck.version)));
        }
        Ok(ck)
    }

    /// Rebuilds the network under `config`. Any parameter whose stored shape
    /// disagrees with that config is a shape error.
    pub fn restore_with(&self, config: &TrainConfig) -> Result<TrainedModel> {
        let mut model = SslMtpp::new(config.model_config(self.num_classes), config.seed)?;
        if self.params.len() != model.params().len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, config expects {}",
                self.params.len(),
                model.params().len()
            )));
        }
        for saved in &self.params {
            let id = model
                .params()
                .find(&saved.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{}`", saved.name)))?;
            let value = Tensor::new(saved.shape.clone(), saved.values.clone())
                .map_err(|e| Error::Checkpoint(format!("parameter `{}`: {e}", saved.name)))?;
            model.params_mut().set(id, value)?;
        }
        Ok(TrainedModel { model, scaler: self.scaler, config: config.clone(), protocol: self.protocol.clone() })
    }

    pub fn restore(&self) -> Result<TrainedModel> {
        self.restore_with(&self.config)
    }
}

pub fn save_checkpoint(trained: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, Checkpoint::from_trained(trained).to_json()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainedModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    Checkpoint::from_json(&text)?.restore()
}
