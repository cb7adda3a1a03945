//! Model, training and inference settings, read from a TOML document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::error::{Error, Result};
use crate::illumination::IasConfig;
use crate::loss::LossWeights;
use crate::memory::ForgetPolicy;
use crate::sap::{EncoderConfig, LowFreqInput};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub stages: usize,
    pub blocks_per_stage: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            stages: 6,
            blocks_per_stage: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderSection {
    pub blocks: usize,
}

impl Default for DecoderSection {
    fn default() -> Self {
        Self { blocks: 6 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SapSection {
    pub lowfreq_input: LowFreqInput,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    /// Consecutive frames streamed through one differentiable pass.
    pub clip_len: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    /// Window of the moving average reported as the smoothed loss.
    pub smoothing: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 200,
            clip_len: 3,
            learning_rate: 0.2,
            clip_norm: 1.0,
            smoothing: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferSection {
    /// Points below this percentile of all confidences are left out of
    /// the fused cloud.
    pub confidence_percentile: f64,
}

impl Default for InferSection {
    fn default() -> Self {
        Self {
            confidence_percentile: 20.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    /// Window side (in tokens) of the windowed attention inside SAP blocks.
    pub window: usize,
    pub encoder: EncoderSection,
    pub decoder: DecoderSection,
    pub memory: ForgetPolicy,
    pub sap: SapSection,
    pub ias: IasConfig,
    pub loss: LossWeights,
    pub train: TrainSection,
    pub infer: InferSection,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 64,
            width: 64,
            patch: 8,
            dim: 64,
            heads: 4,
            window: 2,
            encoder: EncoderSection::default(),
            decoder: DecoderSection::default(),
            memory: ForgetPolicy::default(),
            sap: SapSection::default(),
            ias: IasConfig::default(),
            loss: LossWeights::default(),
            train: TrainSection::default(),
            infer: InferSection::default(),
        }
    }
}

impl ModelConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads a config file; a missing or unreadable file is an I/O error,
    /// bad contents are a configuration error.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = crate::io::read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::format(path, "config is not UTF-8"))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            dim: self.dim,
            heads: self.heads,
            window: self.window,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            stages: self.encoder.stages,
            blocks_per_stage: self.encoder.blocks_per_stage,
            patch: self.patch,
            dim: self.dim,
            heads: self.heads,
            window: self.window,
            height: self.height,
            width: self.width,
            lowfreq_input: self.sap.lowfreq_input,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn tokens(&self) -> usize {
        self.encoder_config().tokens()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config().validate()?;
        let (gh, gw) = self.grid();
        if self.window > gh.div_ceil(2).min(gw.div_ceil(2)) {
            return Err(Error::Config(format!(
                "window {} exceeds the {}x{} low-frequency token grid",
                self.window,
                gh.div_ceil(2),
                gw.div_ceil(2)
            )));
        }
        if self.decoder.blocks == 0 {
            return Err(Error::Config("decoder needs at least one block".into()));
        }
        self.memory.validate()?;
        self.ias.validate()?;
        self.loss.validate()?;
        let t = &self.train;
        if t.clip_len == 0 || t.smoothing == 0 {
            return Err(Error::Config("train clip_len and smoothing must be positive".into()));
        }
        if !(t.learning_rate > 0.0) || !(t.clip_norm > 0.0) {
            return Err(Error::Config("train learning_rate and clip_norm must be positive".into()));
        }
        if !(0.0..=100.0).contains(&self.infer.confidence_percentile) {
            return Err(Error::Config(format!(
                "confidence percentile {} outside [0, 100]",
                self.infer.confidence_percentile
            )));
        }
        Ok(())
    }
}
