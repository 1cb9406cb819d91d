//! The run configuration document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tt_core::attention::{AttentionMask, Context, EncoderConfig};
use tt_core::decode::DecodeConfig;
use tt_core::frontend::FrontendConfig;
use tt_core::model::ModelConfig;
use tt_core::train::{AdamConfig, ScheduleConfig, TrainConfig};
use tt_core::transducer::JointConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub paths: Paths,
    pub model: ModelSection,
    pub mask: MaskSection,
    #[serde(default)]
    pub frontend: FrontendConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainSection,
    #[serde(default)]
    pub decode: DecodeConfig,
}

/// Dataset files, relative to the config file unless absolute.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_data: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_data: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Non-blank output symbols.
    pub symbols: usize,
    /// Width of one input frame before stacking.
    pub feature_dim: usize,
    pub audio: EncoderShape,
    pub label: EncoderShape,
    pub label_embedding_dim: usize,
    pub joint_dim: usize,
}

/// An encoder stack without its attention window, which comes from the mask
/// section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderShape {
    pub num_layers: usize,
    pub model_dim: usize,
    pub ff_dim1: usize,
    pub ff_dim2: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    #[serde(default)]
    pub dropout_ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_relative_offset: Option<usize>,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
}

fn default_eps() -> f64 {
    1e-5
}

/// Audio and label attention windows, one row of a context experiment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSection {
    pub audio_left: Context,
    pub audio_right: Context,
    pub label_left: Context,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub steps: u64,
    #[serde(default)]
    pub weight_noise_sigma: f64,
    #[serde(default)]
    pub weight_noise_start: u64,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub checkpoint_every: u64,
}

fn default_clip() -> f64 {
    5.0
}

impl EncoderShape {
    fn resolve(&self, input_dim: usize, mask: AttentionMask) -> EncoderConfig {
        EncoderConfig {
            input_dim,
            num_layers: self.num_layers,
            model_dim: self.model_dim,
            ff_dim1: self.ff_dim1,
            ff_dim2: self.ff_dim2,
            num_heads: self.num_heads,
            head_dim: self.head_dim,
            dropout_ratio: self.dropout_ratio,
            mask,
            max_relative_offset: self.max_relative_offset,
            layer_norm_eps: self.layer_norm_eps,
        }
    }
}

impl RunConfig {
    /// Reads and validates `path`; relative data paths are resolved against
    /// its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.paths.train_data, &mut cfg.paths.dev_data].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::parse(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            CliError::Usage(format!("config error at `{key}`: {}", e.into_inner().message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model_config().validate("model")?;
        self.frontend.validate("frontend")?;
        self.schedule.validate("schedule")?;
        self.train_config().validate("train")?;
        if self.decode.beam_width == 0 {
            return Err(CliError::Usage("config error at `decode.beam_width`: must be at least 1".into()));
        }
        Ok(())
    }

    pub fn audio_mask(&self) -> AttentionMask {
        AttentionMask {
            left: self.mask.audio_left,
            right: self.mask.audio_right,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        let label_mask = AttentionMask {
            left: self.mask.label_left,
            right: Context::Limited(0),
        };
        ModelConfig {
            vocab_size: m.symbols + 1,
            audio: m.audio.resolve(self.frontend.output_dim(m.feature_dim), self.audio_mask()),
            label: m.label.resolve(m.label_embedding_dim, label_mask),
            joint: JointConfig { joint_dim: m.joint_dim },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            steps: t.steps,
            seed: self.seed,
            weight_noise_sigma: t.weight_noise_sigma,
            weight_noise_start: t.weight_noise_start,
            adam: t.adam,
            clip_norm: t.clip_norm,
            checkpoint_every: t.checkpoint_every,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_else(|e| format!("# unprintable config: {e}\n"))
    }
}
