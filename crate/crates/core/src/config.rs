//! Declarative run configuration, read from TOML. Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapter::Placement;
use crate::data::{LongTailedDataset, SamplerStrategy, SynthSpec};
use crate::encoder::{ModelDims, PromptSpec};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    TwoPhase,
    PhaseAOnly,
    Joint,
    ZeroShotBaseline,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::TwoPhase, Mode::PhaseAOnly, Mode::Joint, Mode::ZeroShotBaseline];
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::TwoPhase => "two_phase",
            Mode::PhaseAOnly => "phase_a_only",
            Mode::Joint => "joint",
            Mode::ZeroShotBaseline => "zero_shot_baseline",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SynthSpec),
    File { path: PathBuf },
}

impl DatasetSource {
    pub fn load(&self) -> Result<LongTailedDataset> {
        match self {
            DatasetSource::Synthetic(spec) => spec.generate(),
            DatasetSource::File { path } => crate::dataset_file::ingest(path),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub visual_out: usize,
    pub embed_dim: usize,
    pub text_hidden: Vec<usize>,
    pub text_out: usize,
    pub joint_dim: usize,
    pub num_templates: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![64],
            visual_out: 32,
            embed_dim: 16,
            text_hidden: vec![],
            text_out: 32,
            joint_dim: 24,
            num_templates: 1,
        }
    }
}

impl ModelConfig {
    pub fn dims(&self, input_dim: usize, num_classes: usize) -> ModelDims {
        ModelDims {
            input_dim,
            hidden: self.hidden.clone(),
            visual_out: self.visual_out,
            embed_dim: self.embed_dim,
            text_hidden: self.text_hidden.clone(),
            text_out: self.text_out,
            joint_dim: self.joint_dim,
            num_classes,
            num_templates: self.num_templates,
        }
    }
}

/// Brief balanced pre-training of the backbone on a pool drawn around the
/// synthetic class means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmStart {
    pub per_class: u64,
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::epochs_a")]
    pub epochs_a: usize,
    #[serde(default = "defaults::epochs_b")]
    pub epochs_b: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::lr_backbone")]
    pub lr_backbone: f64,
    #[serde(default = "defaults::lr_adapter")]
    pub lr_adapter: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "defaults::lambda")]
    pub lambda: f64,
    #[serde(default = "defaults::tau")]
    pub tau: f64,
    #[serde(default)]
    pub placement: Placement,
    #[serde(default)]
    pub symmetric_loss: bool,
    /// Strategy used in Phase A when `balance_phase_a` is set.
    #[serde(default = "defaults::balanced")]
    pub sampler_a: SamplerStrategy,
    /// Strategy used in Phase B when `balance_phase_b` is set.
    #[serde(default = "defaults::balanced")]
    pub sampler_b: SamplerStrategy,
    #[serde(default)]
    pub balance_phase_a: bool,
    #[serde(default = "defaults::yes")]
    pub balance_phase_b: bool,
    #[serde(default)]
    pub template_id: usize,
    #[serde(default)]
    pub warm_start: Option<WarmStart>,
    #[serde(default)]
    pub output: OutputConfig,
}

mod defaults {
    use crate::data::SamplerStrategy;

    pub fn epochs_a() -> usize {
        50
    }
    pub fn epochs_b() -> usize {
        10
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn lr_backbone() -> f64 {
        0.05
    }
    pub fn lr_adapter() -> f64 {
        0.2
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn lambda() -> f64 {
        0.2
    }
    pub fn tau() -> f64 {
        1.0
    }
    pub fn balanced() -> SamplerStrategy {
        SamplerStrategy::ClassBalanced
    }
    pub fn yes() -> bool {
        true
    }
}

impl RunConfig {
    /// Defaults on the standard synthetic task.
    pub fn default_task(seed: u64) -> Self {
        RunConfig {
            dataset: DatasetSource::Synthetic(SynthSpec::default_task(seed)),
            model: ModelConfig::default(),
            mode: Mode::TwoPhase,
            seed,
            epochs_a: defaults::epochs_a(),
            epochs_b: defaults::epochs_b(),
            batch_size: defaults::batch_size(),
            lr_backbone: defaults::lr_backbone(),
            lr_adapter: defaults::lr_adapter(),
            momentum: defaults::momentum(),
            lambda: defaults::lambda(),
            tau: defaults::tau(),
            placement: Placement::Visual,
            symmetric_loss: false,
            sampler_a: defaults::balanced(),
            sampler_b: defaults::balanced(),
            balance_phase_a: false,
            balance_phase_b: true,
            template_id: 0,
            warm_start: None,
            output: OutputConfig::default(),
        }
    }

    /// Sets the run seed and, for synthetic data, the dataset seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        if let DatasetSource::Synthetic(spec) = &mut self.dataset {
            spec.seed = seed;
        }
        self
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        RunConfig::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr_backbone > 0.0) || !(self.lr_adapter > 0.0) {
            return bad("learning rates must be > 0".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::InvalidTemperature(self.tau));
        }
        if self.template_id >= self.model.num_templates {
            return bad(format!(
                "template_id {} >= num_templates {}",
                self.template_id, self.model.num_templates
            ));
        }
        if let Some(w) = &self.warm_start {
            if w.per_class == 0 || !(w.lr > 0.0) {
                return bad("warm_start needs per_class >= 1 and lr > 0".into());
            }
            if !matches!(self.dataset, DatasetSource::Synthetic(_)) {
                return bad("warm_start requires a synthetic dataset".into());
            }
        }
        Ok(())
    }

    pub fn prompt(&self) -> PromptSpec {
        PromptSpec {
            template_id: self.template_id,
        }
    }

    pub fn phase_a_sampler(&self) -> SamplerStrategy {
        if self.balance_phase_a {
            self.sampler_a
        } else {
            SamplerStrategy::Instance
        }
    }

    pub fn phase_b_sampler(&self) -> SamplerStrategy {
        if self.balance_phase_b {
            self.sampler_b
        } else {
            SamplerStrategy::Instance
        }
    }
}
