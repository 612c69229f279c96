//! Server-side distillation of a teacher into the global student over
//! synthetic samples.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genopt::ensemble_sample;
use crate::matrix::Matrix;
use crate::moe::{vanilla_ensemble, ExpertSet, MetaInput};
use crate::nn::graph::{backward, commit_running_stats, forward_from, predict, Mode};
use crate::nn::loss::{cross_entropy, kl_divergence_t};
use crate::nn::{ModelSpec, Optimizer, OptimizerConfig, ParamSet};
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    MetaMoe,
    ClasswiseUniform,
    Vanilla,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub lambda_soft: f64,
    pub lambda_hard: f64,
    /// L₃.
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub temperature: f64,
    pub teacher: TeacherKind,
    /// Run the student in eval mode so synthetic batches never touch its
    /// running batch-norm statistics.
    pub freeze_student_bn: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda_soft: 0.8,
            lambda_hard: 0.2,
            epochs: 10,
            steps_per_epoch: 20,
            batch_size: 64,
            optimizer: OptimizerConfig::adam(1e-3),
            temperature: 1.0,
            teacher: TeacherKind::MetaMoe,
            freeze_student_bn: true,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_soft >= 0.0 && self.lambda_hard >= 0.0 && self.lambda_soft + self.lambda_hard > 0.0) {
            return Err(Error::config("λ_soft, λ_hard must be ≥ 0 with a positive sum"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        Ok(())
    }
}

/// `λ_soft·KL(p_T ‖ p_S) + λ_hard·CE(student, argmax teacher)` and its
/// gradient w.r.t. the student logits.
pub fn kd_loss(student: &Matrix, teacher: &Matrix, lambda_soft: f64, lambda_hard: f64, temperature: f64) -> Result<(f64, Matrix)> {
    let (kl, gkl) = kl_divergence_t(student, teacher, temperature)?;
    let hard = teacher.argmax_rows();
    let (ce, gce) = cross_entropy(student, &hard)?;
    let mut g = gkl.scale(lambda_soft);
    g.add_scaled(&gce, lambda_hard);
    Ok((lambda_soft * kl + lambda_hard * ce, g))
}

/// Anything that maps a batch to teacher logits.
pub enum Teacher<'a> {
    MetaMoe(&'a ExpertSet),
    ClasswiseUniform(&'a ExpertSet),
    Vanilla {
        spec: &'a ModelSpec,
        models: Vec<(usize, &'a ParamSet)>,
    },
    Model {
        spec: &'a ModelSpec,
        params: &'a ParamSet,
    },
}

impl Teacher<'_> {
    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Teacher::MetaMoe(set) => set.meta_forward(x, MetaInput::RawInput),
            Teacher::ClasswiseUniform(set) => set.classwise_uniform(x, MetaInput::RawInput),
            Teacher::Vanilla { spec, models } => vanilla_ensemble(spec, models, x),
            Teacher::Model { spec, params } => predict(params, spec, x),
        }
    }
}

/// Where distillation inputs come from.
pub enum SampleSource<'a> {
    Ensemble {
        spec: &'a ModelSpec,
        generators: Vec<(usize, &'a ParamSet)>,
    },
    /// Random rows of a fixed matrix (real-data reference runs).
    Fixed(&'a Matrix),
}

impl SampleSource<'_> {
    pub fn draw(&self, batch_size: usize, rng: &mut StreamRng) -> Result<Matrix> {
        match self {
            SampleSource::Ensemble { spec, generators } => Ok(ensemble_sample(spec, generators, batch_size, rng)?.samples),
            SampleSource::Fixed(m) => {
                if m.rows() == 0 {
                    return Err(Error::config("empty sample pool"));
                }
                let b = batch_size.min(m.rows());
                Ok(m.select_rows(&index::sample(rng, m.rows(), b).into_vec()))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct DistillResult {
    pub student: ParamSet,
    /// Mean kd loss per epoch.
    pub curve: Vec<f64>,
}

/// `epochs × steps_per_epoch` optimizer steps on `kd_loss`; the teacher is
/// only queried, never changed.
pub fn distill_student(
    student: &ParamSet,
    spec: &ModelSpec,
    teacher: &Teacher<'_>,
    source: &SampleSource<'_>,
    cfg: &DistillConfig,
    rng: &mut StreamRng,
) -> Result<DistillResult> {
    cfg.validate()?;
    let mut p = student.clone();
    let mut opt = Optimizer::new(cfg.optimizer);
    let mode = if cfg.freeze_student_bn { Mode::Eval } else { Mode::Train };
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let x = source.draw(cfg.batch_size, rng)?;
            let t = teacher.logits(&x)?;
            let fp = forward_from(&p, spec, &x, 0, mode)?;
            let (loss, g) = kd_loss(&fp.logits, &t, cfg.lambda_soft, cfg.lambda_hard, cfg.temperature)?;
            let grads = backward(&p, &fp.cache, &g)?;
            opt.step(&mut p, &grads)?;
            if mode == Mode::Train {
                commit_running_stats(&mut p, spec, &fp.batch_stats)?;
            }
            total += loss;
        }
        curve.push(total / cfg.steps_per_epoch.max(1) as f64);
    }
    Ok(DistillResult { student: p, curve })
}
