use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DecoderMode, ModelConfig};

/// Training and architecture settings. Serialized as a flat TOML table whose
/// keys are exactly these field names; missing keys take the defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub seed: u64,
    /// Unlabeled reconstruction steps after each labeled step.
    pub unlabeled_ratio: usize,
    pub clip_norm: f64,
    /// Supervised-only training: `lambda` is treated as 0 and the
    /// encoder-decoder is left at its initialization.
    pub baseline: bool,
    pub embed_dim: usize,
    pub sup_hidden: usize,
    pub sup_layers: usize,
    pub enc_hidden: usize,
    pub enc_layers: usize,
    pub head_hidden: usize,
    pub dropout: f64,
    pub decoder: DecoderMode,
    /// Build the encoder-decoder at all.
    pub autoencoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::new(2);
        TrainConfig {
            epochs: 100,
            learning_rate: 0.01,
            batch_size: 1024,
            lambda: m.lambda,
            seed: 0,
            unlabeled_ratio: 1,
            clip_norm: 5.0,
            baseline: false,
            embed_dim: m.embed_dim,
            sup_hidden: m.sup_hidden,
            sup_layers: m.sup_layers,
            enc_hidden: m.enc_hidden,
            enc_layers: m.enc_layers,
            head_hidden: m.head_hidden,
            dropout: m.dropout,
            decoder: m.decoder,
            autoencoder: true,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: TrainConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return bad(format!("clip_norm {} must be positive", self.clip_norm));
        }
        self.model_config(2).validate()
    }

    /// Fusion weight actually used; zero in baseline mode.
    pub fn effective_lambda(&self) -> f64 {
        if self.baseline {
            0.0
        } else {
            self.lambda
        }
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            num_classes,
            embed_dim: self.embed_dim,
            sup_hidden: self.sup_hidden,
            sup_layers: self.sup_layers,
            enc_hidden: self.enc_hidden,
            enc_layers: self.enc_layers,
            head_hidden: self.head_hidden,
            dropout: self.dropout,
            lambda: self.effective_lambda(),
            decoder: self.decoder,
            autoencoder: self.autoencoder,
        }
    }
}
