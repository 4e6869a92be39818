//! Experiment configuration: one sectioned `key = value` document.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{load_csv, Dataset, DatasetError, GlyphSpec, Gmm2dSpec};
use crate::diffusion::{DiffusionSchedule, TimestepWeighting};
use crate::intensity::{IntensityController, OverfitEstimator};
use crate::metrics::EmbeddingKind;
use crate::networks::NetworkConfig;
use crate::objectives::LossWeights;
use crate::training::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config `{path}`: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid `{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

fn invalid(key: &str, reason: impl ToString) -> ConfigError {
    ConfigError::Invalid { key: key.to_string(), reason: reason.to_string() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Gmm,
    Glyphs,
    Csv,
}

/// Source data. Shape keys apply to the procedural sources only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub seed: u64,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub modes_per_class: usize,
    pub radius: f64,
    pub mode_std: f64,
    pub side: usize,
    pub jitter: f64,
    pub path: String,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let gmm = Gmm2dSpec::default();
        let glyph = GlyphSpec::default();
        Self {
            kind: DatasetKind::Gmm,
            seed: 0,
            num_classes: gmm.num_classes,
            samples_per_class: gmm.samples_per_class,
            modes_per_class: gmm.modes_per_class,
            radius: gmm.radius,
            mode_std: gmm.mode_std,
            side: glyph.side,
            jitter: glyph.jitter,
            path: String::new(),
        }
    }
}

impl DatasetConfig {
    pub fn gmm_spec(&self) -> Option<Gmm2dSpec> {
        (self.kind == DatasetKind::Gmm).then(|| Gmm2dSpec {
            num_classes: self.num_classes,
            modes_per_class: self.modes_per_class,
            radius: self.radius,
            mode_std: self.mode_std,
            samples_per_class: self.samples_per_class,
        })
    }

    pub fn glyph_spec(&self) -> Option<GlyphSpec> {
        (self.kind == DatasetKind::Glyphs).then(|| GlyphSpec {
            num_classes: self.num_classes,
            side: self.side,
            samples_per_class: self.samples_per_class,
            jitter: self.jitter,
        })
    }

    pub fn load(&self) -> Result<Dataset, DatasetError> {
        match self.kind {
            DatasetKind::Gmm => self.gmm_spec().expect("gmm kind").generate(self.seed),
            DatasetKind::Glyphs => self.glyph_spec().expect("glyph kind").generate(self.seed),
            DatasetKind::Csv => load_csv(Path::new(&self.path)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub t_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub sigma: f64,
    pub weighting: TimestepWeighting,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { t_steps: 64, beta_min: 1e-4, beta_max: 0.02, sigma: 0.5, weighting: TimestepWeighting::Priority }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<DiffusionSchedule, ConfigError> {
        DiffusionSchedule::new(self.t_steps, self.beta_min, self.beta_max, self.sigma, self.weighting)
            .map_err(|e| invalid("diffusion", e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntensityConfig {
    pub step_const: f64,
    pub d_target: f64,
    pub max_d: f64,
    pub max_c: f64,
    pub window: usize,
}

impl Default for IntensityConfig {
    fn default() -> Self {
        Self { step_const: 0.02, d_target: 0.6, max_d: 1.0, max_c: 0.3, window: 16 }
    }
}

impl IntensityConfig {
    pub fn controllers(&self, k_max: usize) -> Result<(IntensityController, IntensityController), ConfigError> {
        let d = IntensityController::discriminator(self.step_const, self.d_target, self.max_d)
            .map_err(|e| invalid("intensity", e))?;
        let c = IntensityController::classifier(k_max, self.max_c).map_err(|e| invalid("intensity", e))?;
        Ok((d, c))
    }

    pub fn estimator(&self) -> OverfitEstimator {
        OverfitEstimator::new(self.window)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingChoice {
    /// Identity for 2-D points, random projection otherwise.
    Auto,
    Identity,
    FixedRandomProjection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Generated samples per evaluation, split evenly over classes; the
    /// same number of real samples is drawn.
    pub samples: usize,
    pub k: usize,
    pub seed: u64,
    pub embedding: EmbeddingChoice,
    pub embedding_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { samples: 1000, k: 3, seed: 12345, embedding: EmbeddingChoice::Auto, embedding_seed: 0 }
    }
}

impl EvalConfig {
    pub fn embedding_kind(&self, data_dim: usize) -> EmbeddingKind {
        match self.embedding {
            EmbeddingChoice::Identity => EmbeddingKind::Identity,
            EmbeddingChoice::FixedRandomProjection => EmbeddingKind::FixedRandomProjection,
            EmbeddingChoice::Auto if data_dim <= 2 => EmbeddingKind::Identity,
            EmbeddingChoice::Auto => EmbeddingKind::FixedRandomProjection,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub diffusion: DiffusionConfig,
    pub intensity: IntensityConfig,
    pub network: NetworkConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    /// The effective configuration as a document that parses back to `self`.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.dataset;
        if d.kind != DatasetKind::Csv && d.num_classes < 1 {
            return Err(invalid("dataset.num_classes", "must be at least 1"));
        }
        if let Some(spec) = d.gmm_spec() {
            spec.validate().map_err(|e| invalid("dataset", e))?;
        }
        if let Some(spec) = d.glyph_spec() {
            spec.validate().map_err(|e| invalid("dataset", e))?;
        }
        if d.kind == DatasetKind::Csv && d.path.is_empty() {
            return Err(invalid("dataset.path", "required for kind = \"csv\""));
        }
        self.diffusion.schedule()?;
        self.intensity.controllers(self.train.k_max.max(1))?;
        if self.intensity.window == 0 {
            return Err(invalid("intensity.window", "must be positive"));
        }
        let n = &self.network;
        for (key, v) in [
            ("network.hidden_units", n.hidden_units),
            ("network.d_z", n.d_z),
            ("network.d_e", n.d_e),
            ("network.d_t", n.d_t),
            ("network.d_h", n.d_h),
        ] {
            if v == 0 {
                return Err(invalid(key, "must be positive"));
            }
        }
        if !(n.leaky_slope >= 0.0 && n.leaky_slope < 1.0) {
            return Err(invalid("network.leaky_slope", format!("{} outside [0, 1)", n.leaky_slope)));
        }
        self.loss.validate().map_err(|e| invalid("loss", e))?;
        let classes = if d.kind == DatasetKind::Csv { 1 } else { d.num_classes };
        self.train.validate(classes)?;
        if self.eval.k == 0 {
            return Err(invalid("eval.k", "must be positive"));
        }
        Ok(())
    }
}

pub(crate) fn invalid_key(key: &str, reason: impl ToString) -> ConfigError {
    invalid(key, reason)
}
