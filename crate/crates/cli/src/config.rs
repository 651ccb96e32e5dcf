//! Layered settings: built-in defaults, then the config file, then flags.
//!
//! Every section is a struct of optional fields shared by clap and serde.
//! `overlay` lets flags win over the file, `resolved` fills the remaining
//! gaps with engine defaults.

use std::path::Path;

use clap::Args;
use serde::{Deserialize, Serialize};
use tcv2_core::data::{SynthConfig, SynthTask};
use tcv2_core::eval::{AggInit, FinetuneConfig};
use tcv2_core::model::{Activation, EncoderConfig, ModelConfig};
use tcv2_core::train::{AdamWConfig, AugmentConfig, TrainConfig};
use tcv2_core::{Error, Result};

macro_rules! overlay {
    ($top:expr, $base:expr; $($f:ident),+) => {
        Self { $($f: $top.$f.or($base.$f)),+ }
    };
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub synth: SynthArgs,
    pub model: ModelArgs,
    pub train: TrainArgs,
    pub finetune: FinetuneArgs,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthArgs {
    /// Number of slides.
    #[arg(long)]
    pub slides: Option<usize>,
    /// Instances per slide.
    #[arg(long)]
    pub instances: Option<usize>,
    /// Instance feature width.
    #[arg(long)]
    pub d_in: Option<usize>,
    /// Binary tasks as `name:concept` pairs, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub tasks: Option<Vec<String>>,
    /// Fraction of instances carrying the concept in positive slides.
    #[arg(long)]
    pub signal_fraction: Option<f64>,
    /// Standard deviation of the background noise.
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Length of each concept vector.
    #[arg(long)]
    pub concept_norm: Option<f64>,
    /// Cohort seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seed of the concept directions; defaults to the cohort seed.
    #[arg(long)]
    pub concept_seed: Option<u64>,
    /// Largest number of slides per patient.
    #[arg(long)]
    pub max_slides_per_patient: Option<usize>,
    /// Train, val and test fractions of the patient split.
    #[arg(long, value_delimiter = ',')]
    pub split: Option<Vec<f64>>,
    /// Seed of the patient split; defaults to the cohort seed.
    #[arg(long)]
    pub split_seed: Option<u64>,
}

impl SynthArgs {
    pub fn overlay(self, base: Self) -> Self {
        overlay!(self, base; slides, instances, d_in, tasks, signal_fraction, noise_sigma, concept_norm, seed,
            concept_seed, max_slides_per_patient, split, split_seed)
    }

    pub fn resolved(self) -> Self {
        let d = SynthConfig::default();
        let seed = self.seed.unwrap_or(d.seed);
        Self {
            slides: Some(self.slides.unwrap_or(d.n_slides)),
            instances: Some(self.instances.unwrap_or(d.instances_per_slide)),
            d_in: Some(self.d_in.unwrap_or(d.d_in)),
            tasks: Some(self.tasks.unwrap_or_else(|| {
                d.tasks.iter().map(|t| format!("{}:{}", t.task_id, t.concepts[0])).collect()
            })),
            signal_fraction: Some(self.signal_fraction.unwrap_or(d.signal_fraction)),
            noise_sigma: Some(self.noise_sigma.unwrap_or(d.noise_sigma)),
            concept_norm: Some(self.concept_norm.unwrap_or(d.concept_norm)),
            seed: Some(seed),
            concept_seed: Some(self.concept_seed.unwrap_or(seed)),
            max_slides_per_patient: Some(self.max_slides_per_patient.unwrap_or(d.max_slides_per_patient)),
            split: Some(self.split.unwrap_or(vec![0.7, 0.15, 0.15])),
            split_seed: Some(self.split_seed.unwrap_or(seed)),
        }
    }

    /// Engine config and split fractions; expects [`SynthArgs::resolved`] input.
    pub fn to_core(&self) -> Result<(SynthConfig, (f64, f64, f64))> {
        let tasks = self
            .tasks
            .iter()
            .flatten()
            .map(|spec| {
                let (name, concept) = spec
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("task `{spec}` is not `name:concept`")))?;
                let concept = concept
                    .parse()
                    .map_err(|_| Error::Config(format!("task `{spec}` has a non-integer concept")))?;
                Ok(SynthTask::binary(name, concept))
            })
            .collect::<Result<Vec<_>>>()?;
        let split = match self.split.as_deref() {
            Some(&[a, b, c]) => (a, b, c),
            other => return Err(Error::Config(format!("split needs three fractions, got {other:?}"))),
        };
        let cfg = SynthConfig {
            n_slides: self.slides.unwrap_or_default(),
            instances_per_slide: self.instances.unwrap_or_default(),
            d_in: self.d_in.unwrap_or_default(),
            tasks,
            signal_fraction: self.signal_fraction.unwrap_or_default(),
            noise_sigma: self.noise_sigma.unwrap_or_default(),
            concept_norm: self.concept_norm.unwrap_or_default(),
            seed: self.seed.unwrap_or_default(),
            concept_seed: self.concept_seed,
            max_slides_per_patient: self.max_slides_per_patient.unwrap_or_default(),
        };
        Ok((cfg, split))
    }
}

#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelArgs {
    /// Instance embedding width.
    #[arg(long)]
    pub width: Option<usize>,
    /// Hidden layer widths of the encoder, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// Encoder activation: relu or tanh.
    #[arg(long)]
    pub activation: Option<String>,
    /// Attention heads.
    #[arg(long)]
    pub heads: Option<usize>,
    /// Attention scoring width.
    #[arg(long)]
    pub att_dim: Option<usize>,
    /// Dropout before each task head.
    #[arg(long)]
    pub dropout: Option<f64>,
}

pub const DEFAULT_WIDTH: usize = 64;

impl ModelArgs {
    pub fn overlay(self, base: Self) -> Self {
        overlay!(self, base; width, hidden, activation, heads, att_dim, dropout)
    }

    pub fn resolved(self, input_width: usize) -> Self {
        let width = self.width.unwrap_or(DEFAULT_WIDTH);
        let d = ModelConfig::new(EncoderConfig::new(input_width, width));
        Self {
            width: Some(width),
            hidden: Some(self.hidden.unwrap_or(d.encoder.hidden_widths)),
            activation: Some(self.activation.unwrap_or(d.encoder.activation.to_string())),
            heads: Some(self.heads.unwrap_or(d.heads)),
            att_dim: Some(self.att_dim.unwrap_or(d.att_dim)),
            dropout: Some(self.dropout.unwrap_or(d.dropout_p)),
        }
    }

    pub fn to_core(&self, input_width: usize) -> Result<ModelConfig> {
        let r = self.clone().resolved(input_width);
        let activation: Activation = r.activation.as_deref().unwrap_or_default().parse()?;
        let mut cfg = ModelConfig::new(EncoderConfig {
            input_width,
            hidden_widths: r.hidden.unwrap_or_default(),
            output_width: r.width.unwrap_or_default(),
            activation,
        });
        cfg.heads = r.heads.unwrap_or_default();
        cfg.att_dim = r.att_dim.unwrap_or_default();
        cfg.dropout_p = r.dropout.unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    /// Training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<u64>,
    /// AdamW learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// AdamW decoupled weight decay.
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Smallest training bag.
    #[arg(long)]
    pub bag_min: Option<usize>,
    /// Largest training bag.
    #[arg(long)]
    pub bag_max: Option<usize>,
    /// Validation bag size.
    #[arg(long)]
    pub val_bag: Option<usize>,
    /// Bags per task in each step.
    #[arg(long)]
    pub bags_per_task: Option<usize>,
    /// Feature jitter standard deviation.
    #[arg(long)]
    pub jitter: Option<f64>,
    /// Instance drop probability.
    #[arg(long)]
    pub instance_drop: Option<f64>,
    /// Enable feature-space augmentation.
    #[arg(long)]
    pub augment: Option<bool>,
    /// Validate after every epoch.
    #[arg(long)]
    pub validate: Option<bool>,
}

impl TrainArgs {
    pub fn overlay(self, base: Self) -> Self {
        overlay!(self, base; seed, epochs, lr, weight_decay, bag_min, bag_max, val_bag, bags_per_task, jitter,
            instance_drop, augment, validate)
    }

    /// Fills gaps from `defaults`; the seed stays unset if nobody gave one.
    pub fn resolved(self, defaults: &TrainConfig) -> Self {
        Self {
            seed: self.seed,
            epochs: Some(self.epochs.unwrap_or(defaults.epochs)),
            lr: Some(self.lr.unwrap_or(defaults.adamw.lr)),
            weight_decay: Some(self.weight_decay.unwrap_or(defaults.adamw.weight_decay)),
            bag_min: Some(self.bag_min.unwrap_or(defaults.bag_min)),
            bag_max: Some(self.bag_max.unwrap_or(defaults.bag_max)),
            val_bag: Some(self.val_bag.unwrap_or(defaults.val_bag)),
            bags_per_task: Some(self.bags_per_task.unwrap_or(defaults.bags_per_task)),
            jitter: Some(self.jitter.unwrap_or(defaults.augment.feature_jitter_sigma)),
            instance_drop: Some(self.instance_drop.unwrap_or(defaults.augment.instance_drop_p)),
            augment: Some(self.augment.unwrap_or(defaults.augment.enabled)),
            validate: Some(self.validate.unwrap_or(defaults.validate)),
        }
    }

    pub fn to_core(&self, defaults: &TrainConfig) -> Result<TrainConfig> {
        let r = self.clone().resolved(defaults);
        let seed = r
            .seed
            .ok_or_else(|| Error::Config("a seed is required: pass --seed or set it in the config file".into()))?;
        let cfg = TrainConfig {
            bag_min: r.bag_min.unwrap_or_default(),
            bag_max: r.bag_max.unwrap_or_default(),
            val_bag: r.val_bag.unwrap_or_default(),
            epochs: r.epochs.unwrap_or_default(),
            adamw: AdamWConfig {
                lr: r.lr.unwrap_or_default(),
                weight_decay: r.weight_decay.unwrap_or_default(),
                ..defaults.adamw.clone()
            },
            seed,
            augment: AugmentConfig {
                feature_jitter_sigma: r.jitter.unwrap_or_default(),
                instance_drop_p: r.instance_drop.unwrap_or_default(),
                enabled: r.augment.unwrap_or_default(),
            },
            bags_per_task: r.bags_per_task.unwrap_or_default(),
            validate: r.validate.unwrap_or_default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneArgs {
    /// Downstream task id; optional when the manifest has a single task.
    #[arg(long)]
    pub task: Option<String>,
    /// Number of repeats; repeat r trains with seed + r.
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Aggregation start: pretrained_agg or random_agg.
    #[arg(long)]
    pub init: Option<String>,
}

impl FinetuneArgs {
    pub fn overlay(self, base: Self) -> Self {
        overlay!(self, base; task, repeats, init)
    }

    pub fn resolved(self) -> Self {
        let d = FinetuneConfig::default();
        Self {
            task: self.task,
            repeats: Some(self.repeats.unwrap_or(d.repeats)),
            init: Some(self.init.unwrap_or(d.init.to_string())),
        }
    }

    pub fn init(&self) -> Result<AggInit> {
        self.clone().resolved().init.as_deref().unwrap_or_default().parse()
    }
}
