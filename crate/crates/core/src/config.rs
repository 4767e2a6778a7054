//! Run configuration loaded from TOML. Every section rejects unknown keys.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_synth::SyntheticDatasetSpec;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics::EvalSpec;
use crate::network::ModelSpec;
use crate::optim::OptimConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub clip_len: usize,
    pub clips_per_video: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Frames on either side of an event that also receive its label.
    pub label_dilation: usize,
    /// Validate every this many epochs (the last epoch is always validated).
    pub eval_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            clip_len: 128,
            clips_per_video: 2,
            batch_size: 2,
            epochs: 30,
            seed: 0,
            label_dilation: 0,
            eval_every: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub dataset: SyntheticDatasetSpec,
    pub model: ModelSpec,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub eval: EvalSpec,
    pub train: TrainOptions,
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: TrainConfig = toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            let field = message
                .strip_prefix("unknown field `")
                .and_then(|rest| rest.split('`').next())
                .unwrap_or("config")
                .to_string();
            Error::config(field, message)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Check every section and tie the schedule horizon to the epoch count.
    pub fn validate(&mut self) -> Result<()> {
        let t = &self.train;
        if t.clip_len < 2 || t.clip_len % 2 != 0 {
            return Err(Error::config("train.clip_len", "must be even and >= 2"));
        }
        for (name, v) in [
            ("train.clips_per_video", t.clips_per_video),
            ("train.batch_size", t.batch_size),
            ("train.epochs", t.epochs),
            ("train.eval_every", t.eval_every),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be >= 1"));
            }
        }
        self.optim.total_epochs = t.epochs;
        self.dataset.validate()?;
        self.model.backbone.validate()?;
        if self.model.projection_dim == 0 {
            return Err(Error::config("model.projection_dim", "must be >= 1"));
        }
        self.loss.validate(self.dataset.num_classes)?;
        self.optim.validate()?;
        self.eval.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::ContrastiveKind;
    use crate::optim::Sharpness;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = TrainConfig::from_toml_str("").unwrap();
        assert_eq!(cfg.train.clip_len, 128);
        assert_eq!(cfg.optim.total_epochs, cfg.train.epochs);
        assert_eq!(cfg.loss.mixup_alpha, 0.1);
        assert_eq!(cfg.optim.rho, 0.1);
        assert_eq!(cfg.model.projection_dim, 128);
        assert_eq!(cfg.loss.bank_size, 256);
    }

    #[test]
    fn ablation_flags_parse() {
        let cfg = TrainConfig::from_toml_str(
            "[loss]\ncontrastive = \"ic\"\nmixup = false\n[optim]\nsharpness = \"sam\"\n[model.backbone]\nastrm_enabled = false\n",
        )
        .unwrap();
        assert_eq!(cfg.loss.contrastive, ContrastiveKind::Ic);
        assert!(!cfg.loss.mixup);
        assert_eq!(cfg.optim.sharpness, Sharpness::Sam);
        assert!(!cfg.model.backbone.astrm_enabled);
    }

    #[test]
    fn unknown_keys_name_the_field() {
        match TrainConfig::from_toml_str("[train]\nbatchsize = 3\n") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "batchsize"),
            other => panic!("unexpected {other:?}"),
        }
        match TrainConfig::from_toml_str("[train]\nclip_len = 7\n") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "train.clip_len"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = TrainConfig::default();
        cfg.train.epochs = 7;
        cfg.validate().unwrap();
        let back = TrainConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }
}
