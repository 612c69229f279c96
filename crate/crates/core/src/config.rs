//! Experiment configuration (TOML), validated at parse time.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticConfig;
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::genopt::GenConfig;
use crate::moe::MetaConfig;
use crate::nn::OptimizerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        #[serde(default = "default_classes")]
        num_classes: usize,
        #[serde(default = "default_n_per_class")]
        n_per_class: usize,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_spread")]
        spread: f64,
        #[serde(default = "default_radius")]
        radius: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

fn default_classes() -> usize {
    SyntheticConfig::default().num_classes
}
fn default_n_per_class() -> usize {
    SyntheticConfig::default().n_per_class
}
fn default_test_per_class() -> usize {
    SyntheticConfig::default().test_per_class
}
fn default_dim() -> usize {
    SyntheticConfig::default().dim
}
fn default_spread() -> f64 {
    SyntheticConfig::default().spread
}
fn default_radius() -> f64 {
    SyntheticConfig::default().radius
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::from_synthetic(SyntheticConfig::default())
    }
}

impl DatasetConfig {
    pub fn from_synthetic(s: SyntheticConfig) -> Self {
        DatasetConfig::Synthetic {
            num_classes: s.num_classes,
            n_per_class: s.n_per_class,
            test_per_class: s.test_per_class,
            dim: s.dim,
            spread: s.spread,
            radius: s.radius,
        }
    }

    pub fn synthetic(&self) -> Option<SyntheticConfig> {
        match *self {
            DatasetConfig::Synthetic {
                num_classes,
                n_per_class,
                test_per_class,
                dim,
                spread,
                radius,
            } => Some(SyntheticConfig {
                num_classes,
                n_per_class,
                test_per_class,
                dim,
                spread,
                radius,
            }),
            DatasetConfig::Idx { .. } => None,
        }
    }

    /// Class count when known without reading files.
    pub fn declared_classes(&self) -> Option<usize> {
        self.synthetic().map(|s| s.num_classes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Every client trains the full model.
    Fedavg,
    /// Width-reduced clients, first units of every layer.
    StaticPt,
    /// Width-reduced clients, window rolling one unit per round.
    RollingPt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    /// N.
    pub clients: usize,
    /// S, clients sampled per round.
    pub sampled: usize,
    /// Dirichlet concentration ω.
    pub omega: f64,
    pub sigma: u32,
    pub rho: u32,
    pub scheme: Scheme,
    /// I, local steps per round.
    pub local_steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            clients: 10,
            sampled: 10,
            omega: 0.01,
            sigma: 4,
            rho: 5,
            scheme: Scheme::Fedavg,
            local_steps: 10,
            batch_size: 32,
            optimizer: OptimizerConfig::sgd(0.1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// T₁.
    pub warmup_rounds: usize,
    /// T₂.
    pub finetune_rounds: usize,
    /// Multiplier on the local learning rate after distillation.
    pub finetune_lr_factor: f64,
    /// Run generator training, the teacher and distillation after warm-up.
    pub distill: bool,
    /// Write a checkpoint every this many rounds (0 = only at the end of warm-up).
    pub checkpoint_every: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            warmup_rounds: 40,
            finetune_rounds: 40,
            finetune_lr_factor: 0.1,
            distill: true,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoeConfig {
    /// Defaults to the class count.
    pub top_k: Option<usize>,
    /// Prototypes per client.
    pub q: usize,
    pub meta: MetaConfig,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            top_k: None,
            q: 2,
            meta: MetaConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub federation: FederationConfig,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub generator: GenConfig,
    pub moe: MoeConfig,
    pub distill: DistillConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetConfig::default(),
            federation: FederationConfig::default(),
            schedule: ScheduleConfig::default(),
            model: ModelConfig::default(),
            generator: GenConfig::default(),
            moe: MoeConfig::default(),
            distill: DistillConfig::default(),
        }
    }
}

fn check(ok: bool, field: &str, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("{field}: {msg}")))
    }
}

fn check_optimizer(o: &OptimizerConfig, field: &str) -> Result<()> {
    match *o {
        OptimizerConfig::Sgd { lr, momentum } => {
            check(lr > 0.0, &format!("{field}.lr"), "must be positive")?;
            check((0.0..1.0).contains(&momentum), &format!("{field}.momentum"), "must lie in [0, 1)")
        }
        OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
            check(lr > 0.0, &format!("{field}.lr"), "must be positive")?;
            check((0.0..1.0).contains(&beta1), &format!("{field}.beta1"), "must lie in [0, 1)")?;
            check((0.0..1.0).contains(&beta2), &format!("{field}.beta2"), "must lie in [0, 1)")?;
            check(eps > 0.0, &format!("{field}.eps"), "must be positive")
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.dataset.synthetic() {
            check(s.num_classes >= 2, "dataset.num_classes", "must be at least 2")?;
            check(s.dim >= 2, "dataset.dim", "must be at least 2")?;
            check(s.n_per_class >= 2, "dataset.n_per_class", "must be at least 2")?;
            check(s.test_per_class >= 2, "dataset.test_per_class", "must be at least 2")?;
            check(s.spread >= 0.0, "dataset.spread", "must be non-negative")?;
            check(s.radius > 0.0, "dataset.radius", "must be positive")?;
        }
        let f = &self.federation;
        check(f.clients >= 1, "federation.clients", "must be at least 1")?;
        check(f.sampled >= 1 && f.sampled <= f.clients, "federation.sampled", "must lie in 1..=clients")?;
        check(f.omega > 0.0 && f.omega.is_finite(), "federation.omega", "must be positive")?;
        check(f.batch_size >= 2, "federation.batch_size", "must be at least 2")?;
        check_optimizer(&f.optimizer, "federation.optimizer")?;
        let s = &self.schedule;
        check(
            s.finetune_lr_factor > 0.0 && s.finetune_lr_factor <= 1.0,
            "schedule.finetune_lr_factor",
            "must lie in (0, 1]",
        )?;
        check(!self.model.hidden.is_empty(), "model.hidden", "needs at least one hidden layer")?;
        check(self.model.hidden.iter().all(|&w| w >= 1), "model.hidden", "widths must be positive")?;
        let g = &self.generator;
        check(g.latent_dim >= 1, "generator.latent_dim", "must be positive")?;
        check(g.hidden >= 1, "generator.hidden", "must be positive")?;
        check(g.batch_size >= 2, "generator.batch_size", "must be at least 2")?;
        check(g.lr_generator > 0.0, "generator.lr_generator", "must be positive")?;
        check(g.lr_discriminator > 0.0, "generator.lr_discriminator", "must be positive")?;
        check((0.0..1.0).contains(&g.beta1), "generator.beta1", "must lie in [0, 1)")?;
        for (v, name) in [
            (g.lambda_entropy, "generator.lambda_entropy"),
            (g.lambda_diversity, "generator.lambda_diversity"),
            (g.lambda_inversion, "generator.lambda_inversion"),
        ] {
            check(v >= 0.0, name, "must be non-negative")?;
        }
        let m = &self.moe;
        check(m.q >= 1, "moe.q", "must be at least 1")?;
        if let (Some(k), Some(c)) = (m.top_k, self.dataset.declared_classes()) {
            check(k >= 1 && k <= c, "moe.top_k", "must lie in 1..=num_classes")?;
        }
        check(m.top_k != Some(0), "moe.top_k", "must be at least 1")?;
        check((0.0..=1.0).contains(&m.meta.ema_decay), "moe.meta.ema_decay", "must lie in [0, 1]")?;
        check(m.meta.lr > 0.0, "moe.meta.lr", "must be positive")?;
        check(m.meta.batch_size >= 1, "moe.meta.batch_size", "must be positive")?;
        let d = &self.distill;
        check(d.lambda_soft >= 0.0, "distill.lambda_soft", "must be non-negative")?;
        check(d.lambda_hard >= 0.0, "distill.lambda_hard", "must be non-negative")?;
        check(d.lambda_soft + d.lambda_hard > 0.0, "distill", "lambda_soft + lambda_hard must be positive")?;
        check(d.temperature > 0.0, "distill.temperature", "must be positive")?;
        check(d.batch_size >= 2, "distill.batch_size", "must be at least 2")?;
        check_optimizer(&d.optimizer, "distill.optimizer")?;
        Ok(())
    }
}
