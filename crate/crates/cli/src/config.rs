//! Run configuration. Every section and key is optional and falls back to
//! the documented default; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use leaf_core::autodiff::AdamConfig;
use leaf_core::continual::{StreamShape, TrainConfig};
use leaf_core::data_synth::GeneratorSpec;
use leaf_core::encoder::{BaseTrainOptions, EncoderConfig, MaskedLmOptions};
use leaf_core::moe_lora::RoutingMode;
use leaf_core::objectives::LossWeights;

use crate::CliError;

/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "LEAF_SEED";
pub const SNAPSHOT_FILE: &str = "config.snapshot.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Full system.
    #[default]
    Leaf,
    /// One LoRA per projection, cross-entropy only.
    BaselineSingleLora,
    /// Token-level routing, no description or distillation terms.
    MoleToken,
    /// Baseline plus the routed expert pools and router loss.
    PlusExperts,
    /// `plus-experts` plus both distillation terms.
    PlusDistill,
}

impl Mode {
    /// The ladder from the bare baseline to the full system.
    pub const LADDER: [Mode; 4] = [
        Mode::BaselineSingleLora,
        Mode::PlusExperts,
        Mode::PlusDistill,
        Mode::Leaf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Leaf => "leaf",
            Mode::BaselineSingleLora => "baseline-single-lora",
            Mode::MoleToken => "mole-token",
            Mode::PlusExperts => "plus-experts",
            Mode::PlusDistill => "plus-distill",
        }
    }

    /// Overrides the mode controls; everything else in `train` is kept.
    pub fn apply(self, train: &mut TrainConfig) {
        let full = train.loss;
        match self {
            Mode::Leaf => train.routing_mode = RoutingMode::Instance,
            Mode::BaselineSingleLora => {
                train.num_experts = 1;
                train.top_k = 1;
                train.routing_mode = RoutingMode::Instance;
                train.loss = LossWeights::zero();
            }
            Mode::MoleToken => {
                train.routing_mode = RoutingMode::Token;
                train.loss = LossWeights {
                    alpha_router: full.alpha_router,
                    ..LossWeights::zero()
                };
            }
            Mode::PlusExperts => {
                train.routing_mode = RoutingMode::Instance;
                train.loss = LossWeights {
                    alpha_router: full.alpha_router,
                    ..LossWeights::zero()
                };
            }
            Mode::PlusDistill => {
                train.routing_mode = RoutingMode::Instance;
                train.loss.alpha_label = 0.0;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Output of `gen-data`.
    pub data_dir: Option<PathBuf>,
    /// Output of `pretrain-base`.
    pub base_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseSection {
    /// The first `num_labels` label ids form the base task and never enter the stream.
    pub num_labels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Masked-token epochs over unlabeled train sentences of every label and
    /// the descriptions, run before base fine-tuning. 0 skips the phase.
    pub mlm_epochs: usize,
    pub mlm_lr: f64,
}

impl Default for BaseSection {
    fn default() -> Self {
        Self {
            num_labels: 8,
            epochs: 30,
            batch_size: 16,
            lr: 2e-3,
            mlm_epochs: 20,
            mlm_lr: 2e-3,
        }
    }
}

impl BaseSection {
    pub fn mlm_options(&self) -> MaskedLmOptions {
        MaskedLmOptions {
            epochs: self.mlm_epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.mlm_lr,
                ..AdamConfig::default()
            },
            ..MaskedLmOptions::default()
        }
    }

    pub fn options(&self) -> BaseTrainOptions {
        BaseTrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Seeds per setting in `ablate`: `seed, seed+1, …`.
    pub n_seeds: usize,
    pub mode: Mode,
    /// Descriptions kept per label, sampled from those on file.
    pub n_descriptions: usize,
    pub paths: Paths,
    pub data: GeneratorSpec,
    pub encoder: EncoderConfig,
    pub base: BaseSection,
    pub stream: StreamShape,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_seeds: 5,
            mode: Mode::Leaf,
            n_descriptions: 5,
            paths: Paths::default(),
            data: GeneratorSpec::default(),
            encoder: EncoderConfig::default(),
            base: BaseSection::default(),
            stream: StreamShape::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// TOML, or JSON when the file ends in `.json`.
    pub fn parse(text: &str, source: &Path) -> Result<Self, CliError> {
        let cfg: RunConfig = if source.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("{}: {e}", source.display())))?
        } else {
            toml::from_str(text).map_err(|e| CliError::Config(format!("{}: {e}", source.display())))?
        };
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = leaf_core::fsutil::read_to_string(p).map_err(|e| CliError::Config(e.to_string()))?;
                Self::parse(&text, p)
            }
        }
    }

    /// Seed precedence: command-line flag, then `LEAF_SEED`, then the file.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<(), CliError> {
        if let Some(s) = flag {
            self.seed = s;
        } else if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |e: leaf_core::Error| CliError::Config(e.to_string());
        self.data.validate().map_err(bad)?;
        self.encoder.validate().map_err(bad)?;
        self.train.validate(self.encoder.model_dim).map_err(bad)?;
        if self.n_seeds == 0 || self.n_descriptions == 0 {
            return Err(CliError::Config("n_seeds and n_descriptions must be positive".into()));
        }
        if self.base.num_labels < 2 || self.base.epochs == 0 || self.base.batch_size == 0 {
            return Err(CliError::Config(
                "base needs num_labels >= 2 and positive epochs, batch_size".into(),
            ));
        }
        if ![self.base.lr, self.base.mlm_lr]
            .iter()
            .all(|l| l.is_finite() && *l > 0.0)
        {
            return Err(CliError::Config("base.lr and base.mlm_lr must be positive".into()));
        }
        let s = &self.stream;
        if s.n_way == 0 || s.k_shot == 0 || s.num_tasks == 0 {
            return Err(CliError::Config(
                "stream n_way, k_shot, num_tasks must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Train settings with the mode and seed folded in.
    pub fn effective_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        self.mode.apply(&mut t);
        t.seed = self.seed;
        t
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
