//! JSON experiment config with one-to-one flag overrides.

use std::path::Path;

use clap::Args;
use serde::{Deserialize, Serialize};

use emnet_core::model::ModelConfig;
use emnet_core::trainer::TrainConfig;
use emnet_core::{Error, Result};

/// A config file carries a `model` and a `train` section; both fall back
/// to defaults and reject unknown keys.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Flag overrides mirroring the config keys.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub decay_step: Option<usize>,
    #[arg(long)]
    pub decay_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Patch shape as depth,height,width.
    #[arg(long, value_delimiter = ',')]
    pub patch_shape: Option<Vec<usize>>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Encoder widths: stem plus one per stage, e.g. 16,32,64,128.
    #[arg(long, value_delimiter = ',')]
    pub encoder_channels: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub seg_decoder_channels: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub det_decoder_channels: Option<Vec<usize>>,
}

impl CliConfig {
    /// Read the config file (defaults when absent), apply flag overrides
    /// and re-validate everything.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg: CliConfig = match path {
            Some(p) => {
                let text = std::fs::read(p)?;
                serde_json::from_slice(&text)
                    .map_err(|e| Error::Config(format!("config {p:?}: {e}")))?
            }
            None => CliConfig::default(),
        };
        if let Some(v) = overrides.lr0 {
            cfg.train.lr0 = v;
        }
        if let Some(v) = overrides.decay_step {
            cfg.train.decay_step = v;
        }
        if let Some(v) = overrides.decay_rate {
            cfg.train.decay_rate = v;
        }
        if let Some(v) = overrides.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = &overrides.patch_shape {
            if v.len() != 3 {
                return Err(Error::Config(format!(
                    "--patch-shape needs exactly depth,height,width, got {v:?}"
                )));
            }
            cfg.train.patch_shape = [v[0], v[1], v[2]];
        }
        if let Some(v) = overrides.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = overrides.lambda {
            cfg.train.lambda = Some(v);
        }
        if let Some(v) = overrides.seed {
            cfg.train.seed = v;
        }
        if let Some(v) = overrides.train_fraction {
            cfg.train.train_fraction = v;
        }
        if let Some(v) = &overrides.encoder_channels {
            cfg.model.encoder_channels = v.clone();
        }
        if let Some(v) = &overrides.seg_decoder_channels {
            cfg.model.seg_decoder_channels = v.clone();
        }
        if let Some(v) = &overrides.det_decoder_channels {
            cfg.model.det_decoder_channels = v.clone();
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}
