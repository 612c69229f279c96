//! Client-side generator training and the server-side ensemble sampler.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::graph::{backward, backward_full, commit_running_stats, forward_from, Mode, Upstream};
use crate::nn::loss::{entropy_unchecked, log_sigmoid, sigmoid, softmax};
use crate::nn::spec::param_name;
use crate::nn::{Layer, ModelSpec, Optimizer, OptimizerConfig, ParamSet};
use crate::protocol::{draw_batch, fedavg_aggregate, Contribution};
use crate::rng::{stream, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub batch_size: usize,
    /// L₁.
    pub epochs: usize,
    /// Lower bound on steps per epoch, so tiny shards still train.
    pub min_steps_per_epoch: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub beta1: f64,
    pub lambda_entropy: f64,
    pub lambda_diversity: f64,
    pub lambda_inversion: f64,
    /// Inversion applies only to clients with fewer samples than this.
    pub tau: usize,
    /// Use `-log D(G(z))` instead of `log(1 - D(G(z)))`.
    pub non_saturating: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            hidden: 32,
            batch_size: 64,
            epochs: 50,
            min_steps_per_epoch: 10,
            lr_generator: 1e-3,
            lr_discriminator: 1e-3,
            beta1: 0.5,
            lambda_entropy: 1.0,
            lambda_diversity: 5.0,
            lambda_inversion: 10.0,
            tau: 1000,
            non_saturating: false,
        }
    }
}

impl GenConfig {
    fn adam(&self, lr: f64) -> OptimizerConfig {
        OptimizerConfig::Adam {
            lr,
            beta1: self.beta1,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Mean per-row softmax entropy and its gradient w.r.t. the logits.
pub fn entropy_from_logits(logits: &Matrix) -> (f64, Matrix) {
    let p = softmax(logits);
    let n = logits.rows() as f64;
    let mut total = 0.0;
    let mut g = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let row = p.row(r);
        let h = entropy_unchecked(row);
        total += h;
        for (j, &pj) in row.iter().enumerate() {
            let lp = if pj > 0.0 { pj.ln() } else { 0.0 };
            g.set(r, j, -pj * (lp + h) / n);
        }
    }
    (total / n, g)
}

/// Entropy of the batch-mean softmax and its gradient w.r.t. the logits.
pub fn diversity_from_logits(logits: &Matrix) -> (f64, Matrix) {
    let p = softmax(logits);
    let n = logits.rows() as f64;
    let w: Vec<f64> = p.col_sums().into_iter().map(|s| s / n).collect();
    let value = entropy_unchecked(&w);
    let dw: Vec<f64> = w
        .iter()
        .map(|&wk| if wk > 0.0 { -(wk.ln() + 1.0) / n } else { 0.0 })
        .collect();
    let mut g = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let row = p.row(r);
        let dot: f64 = row.iter().zip(&dw).map(|(a, b)| a * b).sum();
        for (j, &pj) in row.iter().enumerate() {
            g.set(r, j, pj * (dw[j] - dot));
        }
    }
    (value, g)
}

fn classifier_aux(spec: &ModelSpec, params: &ParamSet, samples: &Matrix, f: fn(&Matrix) -> (f64, Matrix)) -> Result<(f64, Matrix)> {
    let fp = forward_from(params, spec, samples, 0, Mode::Eval)?;
    let (v, g) = f(&fp.logits);
    let (_, dx) = backward_full(params, &fp.cache, &Upstream::output(g))?;
    Ok((v, dx))
}

/// Mean prediction entropy of a frozen classifier on `samples`, with the
/// gradient w.r.t. the samples.
pub fn entropy_loss(spec: &ModelSpec, params: &ParamSet, samples: &Matrix) -> Result<(f64, Matrix)> {
    classifier_aux(spec, params, samples, entropy_from_logits)
}

/// Entropy of the batch-mean predicted class distribution (to be maximized).
pub fn diversity_loss(spec: &ModelSpec, params: &ParamSet, samples: &Matrix) -> Result<(f64, Matrix)> {
    if samples.rows() < 2 {
        return Err(Error::DegenerateBatch(samples.rows()));
    }
    classifier_aux(spec, params, samples, diversity_from_logits)
}

fn l2_with_grad(diff: &[f64]) -> (f64, Vec<f64>) {
    let norm = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
    let g = if norm > 0.0 {
        diff.iter().map(|d| d / norm).collect()
    } else {
        vec![0.0; diff.len()]
    };
    (norm, g)
}

/// `Σ_l ‖μ_l − μ̂_l‖₂ + ‖σ²_l − σ̂²_l‖₂` over the batch-norm layers of the
/// global model (eval mode), with the gradient w.r.t. the samples.
pub fn inversion_loss(spec: &ModelSpec, params: &ParamSet, samples: &Matrix) -> Result<(f64, Matrix)> {
    if !spec.has_batch_norm() {
        return Err(Error::config("inversion loss needs a model with batch norm"));
    }
    if samples.rows() < 2 {
        return Err(Error::DegenerateBatch(samples.rows()));
    }
    let fp = forward_from(params, spec, samples, 0, Mode::Eval)?;
    let mut total = 0.0;
    let mut up = Upstream::default();
    for s in &fp.batch_stats {
        let rm = params.values(&param_name(s.layer, "running_mean"))?;
        let rv = params.values(&param_name(s.layer, "running_var"))?;
        let dm: Vec<f64> = s.mean.iter().zip(rm).map(|(a, b)| a - b).collect();
        let dv: Vec<f64> = s.var.iter().zip(rv).map(|(a, b)| a - b).collect();
        let (nm, gm) = l2_with_grad(&dm);
        let (nv, gv) = l2_with_grad(&dv);
        total += nm + nv;
        up.stats.push((s.layer, gm, gv));
    }
    let (_, dx) = backward_full(params, &fp.cache, &up)?;
    Ok((total, dx))
}

/// Per-epoch means of the logged quantities.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub adv_g: f64,
    pub adv_d: f64,
    pub entropy: f64,
    pub diversity: f64,
    pub inversion: f64,
    pub d_acc_fake: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepLog {
    /// `E[log(1 − D(G(z)))]` (or `−E[log D(G(z))]` when non-saturating).
    pub adv_g: f64,
    /// `E[log D(x)] + E[log(1 − D(G(z)))]`, the quantity D maximizes.
    pub adv_d: f64,
    pub entropy: f64,
    pub diversity: f64,
    pub inversion: f64,
    /// Fraction of fakes the discriminator labels fake, before its update.
    pub d_acc_fake: f64,
}

/// Generator, discriminator (local trunk plus a scalar head) and the frozen
/// classifier for one client.
#[derive(Debug, Clone)]
pub struct GenTrainState {
    pub gen_spec: ModelSpec,
    pub generator: ParamSet,
    pub disc_spec: ModelSpec,
    pub disc: ParamSet,
    pub frozen_spec: ModelSpec,
    pub frozen: ParamSet,
    pub non_saturating: bool,
    opt_g: Optimizer,
    opt_d: Optimizer,
    pub epoch: usize,
    pub history: Vec<EpochLog>,
}

/// Discriminator spec: the classifier with its head narrowed to one output.
pub fn discriminator_spec(classifier: &ModelSpec) -> Result<ModelSpec> {
    let h = classifier
        .head_index()
        .ok_or_else(|| Error::structure("classifier has no output head"))?;
    let mut layers = classifier.layers.clone();
    let dim = layers[h].in_dim();
    layers[h] = Layer::OutputHead { dim, num_classes: 1 };
    ModelSpec::new(layers)
}

impl GenTrainState {
    pub fn new(
        gen_spec: ModelSpec,
        generator: ParamSet,
        classifier_spec: &ModelSpec,
        classifier: &ParamSet,
        cfg: &GenConfig,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        gen_spec.check_params(&generator)?;
        classifier_spec.check_params(classifier)?;
        if gen_spec.output_dim() != classifier_spec.input_dim() {
            return Err(Error::shape("generator output does not match classifier input"));
        }
        let disc_spec = discriminator_spec(classifier_spec)?;
        let mut disc = disc_spec.init_params(rng);
        let h = disc_spec.head_index().unwrap();
        for (name, e) in classifier.iter() {
            if !name.starts_with(&format!("{h}.")) {
                disc.values_mut(name)?.copy_from_slice(&e.tensor.data);
            }
        }
        Ok(Self {
            gen_spec,
            generator,
            disc_spec,
            disc,
            frozen_spec: classifier_spec.clone(),
            frozen: classifier.clone(),
            non_saturating: cfg.non_saturating,
            opt_g: Optimizer::new(cfg.adam(cfg.lr_generator)),
            opt_d: Optimizer::new(cfg.adam(cfg.lr_discriminator)),
            epoch: 0,
            history: Vec::new(),
        })
    }
}

/// Extra generator objectives; a weight of zero removes the term's gradient.
#[derive(Debug, Clone, Copy)]
pub struct AuxLosses<'a> {
    pub lambda_entropy: f64,
    pub lambda_diversity: f64,
    pub lambda_inversion: f64,
    /// Global model for the inversion term; `None` disables it.
    pub global: Option<(&'a ModelSpec, &'a ParamSet)>,
}

/// Discriminator objective `−[mean log D(x) + mean log(1 − D(G(z)))]` on raw
/// scores (D = sigmoid), with gradients w.r.t. the real and fake scores.
pub fn discriminator_loss(real: &[f64], fake: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let nr = real.len() as f64;
    let nf = fake.len() as f64;
    let v = -real.iter().map(|&s| log_sigmoid(s)).sum::<f64>() / nr - fake.iter().map(|&s| log_sigmoid(-s)).sum::<f64>() / nf;
    let gr = real.iter().map(|&s| -sigmoid(-s) / nr).collect();
    let gf = fake.iter().map(|&s| sigmoid(s) / nf).collect();
    (v, gr, gf)
}

/// Generator objective on fake scores: `mean log(1 − D(G(z)))` (saturating)
/// or `−mean log D(G(z))`, with the gradient w.r.t. the scores.
pub fn generator_adv_loss(fake: &[f64], non_saturating: bool) -> (f64, Vec<f64>) {
    let n = fake.len() as f64;
    if non_saturating {
        (
            -fake.iter().map(|&s| log_sigmoid(s)).sum::<f64>() / n,
            fake.iter().map(|&s| -sigmoid(-s) / n).collect(),
        )
    } else {
        (
            fake.iter().map(|&s| log_sigmoid(-s)).sum::<f64>() / n,
            fake.iter().map(|&s| -sigmoid(s) / n).collect(),
        )
    }
}

/// One discriminator step followed by one generator step, adversarial terms only.
pub fn adversarial_step(state: &mut GenTrainState, real: &Matrix, latent: &Matrix) -> Result<StepLog> {
    gan_step(state, real, latent, None)
}

fn gan_step(state: &mut GenTrainState, real: &Matrix, latent: &Matrix, aux: Option<&AuxLosses<'_>>) -> Result<StepLog> {
    if real.rows() != latent.rows() {
        return Err(Error::shape("latent and real batches differ in size"));
    }
    let n = real.rows() as f64;

    let gfp = forward_from(&state.generator, &state.gen_spec, latent, 0, Mode::Train)?;
    let fake = gfp.logits.clone();

    // Discriminator: minimize -[E log D(x) + E log(1 - D(G(z)))].
    let dr = forward_from(&state.disc, &state.disc_spec, real, 0, Mode::Train)?;
    let df = forward_from(&state.disc, &state.disc_spec, &fake, 0, Mode::Train)?;
    let sr = dr.logits.as_slice();
    let sf = df.logits.as_slice();
    let (adv_d, gr, gf) = discriminator_loss(sr, sf);
    let d_acc_fake = sf.iter().filter(|&&s| s < 0.0).count() as f64 / n;
    let gr = Matrix::from_vec(real.rows(), 1, gr)?;
    let gf = Matrix::from_vec(real.rows(), 1, gf)?;
    let mut dgrads = backward(&state.disc, &dr.cache, &gr)?;
    dgrads.add_assign(&backward(&state.disc, &df.cache, &gf)?)?;
    state.opt_d.step(&mut state.disc, &dgrads)?;

    // Generator through the updated discriminator.
    let df2 = forward_from(&state.disc, &state.disc_spec, &fake, 0, Mode::Train)?;
    let s2 = df2.logits.as_slice();
    let (adv_g, gs) = generator_adv_loss(s2, state.non_saturating);
    let (_, mut sample_grad) = backward_full(&state.disc, &df2.cache, &Upstream::output(Matrix::from_vec(real.rows(), 1, gs)?))?;

    let mut log = StepLog {
        adv_g,
        adv_d,
        d_acc_fake,
        ..Default::default()
    };
    if let Some(a) = aux {
        let (e, ge) = entropy_loss(&state.frozen_spec, &state.frozen, &fake)?;
        let (d, gd) = diversity_loss(&state.frozen_spec, &state.frozen, &fake)?;
        log.entropy = e;
        log.diversity = d;
        if a.lambda_entropy != 0.0 {
            sample_grad.add_scaled(&ge, a.lambda_entropy);
        }
        if a.lambda_diversity != 0.0 {
            sample_grad.add_scaled(&gd, -a.lambda_diversity);
        }
        if let Some((gspec, gparams)) = a.global {
            let (v, gi) = inversion_loss(gspec, gparams, &fake)?;
            log.inversion = v;
            if a.lambda_inversion != 0.0 {
                sample_grad.add_scaled(&gi, a.lambda_inversion);
            }
        }
    }

    let ggrads = backward(&state.generator, &gfp.cache, &sample_grad)?;
    state.opt_g.step(&mut state.generator, &ggrads)?;
    commit_running_stats(&mut state.generator, &state.gen_spec, &gfp.batch_stats)?;
    Ok(log)
}

pub fn sample_latent<R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Matrix {
    let data = (0..rows * dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Matrix::from_vec(rows, dim, data).expect("sized")
}

/// Trains the generator on one client's shard for `cfg.epochs` epochs.
///
/// The inversion term is used only when `n_i < τ` and a global model is
/// supplied; otherwise it is never evaluated. With every λ at zero the
/// trajectory is exactly that of [`adversarial_step`].
pub fn train_generator(
    state: &mut GenTrainState,
    shard: &Matrix,
    global: Option<(&ModelSpec, &ParamSet)>,
    cfg: &GenConfig,
    rng: &mut StreamRng,
) -> Result<Vec<EpochLog>> {
    let n_i = shard.rows();
    if n_i == 0 {
        return Err(Error::Size("client shard is empty".into()));
    }
    let use_inversion = n_i < cfg.tau && cfg.lambda_inversion != 0.0;
    let aux = AuxLosses {
        lambda_entropy: cfg.lambda_entropy,
        lambda_diversity: cfg.lambda_diversity,
        lambda_inversion: if use_inversion { cfg.lambda_inversion } else { 0.0 },
        global: if use_inversion { global } else { None },
    };
    let pure_gan = cfg.lambda_entropy == 0.0 && cfg.lambda_diversity == 0.0 && aux.global.is_none();
    let steps = n_i.div_ceil(cfg.batch_size.max(1)).max(cfg.min_steps_per_epoch).max(1);
    let mut out = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut acc = EpochLog {
            epoch: state.epoch,
            ..Default::default()
        };
        for _ in 0..steps {
            let idx = draw_batch(n_i, cfg.batch_size, rng);
            let real = shard.select_rows(&idx);
            let z = sample_latent(real.rows(), state.gen_spec.input_dim(), rng);
            let s = if pure_gan {
                gan_step(state, &real, &z, None)?
            } else {
                gan_step(state, &real, &z, Some(&aux))?
            };
            acc.adv_g += s.adv_g;
            acc.adv_d += s.adv_d;
            acc.entropy += s.entropy;
            acc.diversity += s.diversity;
            acc.inversion += s.inversion;
            acc.d_acc_fake += s.d_acc_fake;
        }
        let k = steps as f64;
        acc.adv_g /= k;
        acc.adv_d /= k;
        acc.entropy /= k;
        acc.diversity /= k;
        acc.inversion /= k;
        acc.d_acc_fake /= k;
        state.epoch += 1;
        state.history.push(acc);
        out.push(acc);
    }
    Ok(out)
}

/// `epoch,L_adv_G,L_adv_D,L_entropy,L_diversity,L_inversion,D_acc_fake` rows.
pub fn history_csv(history: &[EpochLog]) -> String {
    let mut s = String::from("epoch,L_adv_G,L_adv_D,L_entropy,L_diversity,L_inversion,D_acc_fake\n");
    for h in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            h.epoch, h.adv_g, h.adv_d, h.entropy, h.diversity, h.inversion, h.d_acc_fake
        );
    }
    s
}

#[derive(Debug, Clone)]
pub struct SyntheticBatch {
    pub samples: Matrix,
    pub source_generator_ids: Vec<usize>,
    pub latents: Matrix,
}

/// Rows are assigned round-robin over the generators, each row `G_i(z)` with
/// fresh `z ~ N(0, I)`; generators run in eval mode.
pub fn ensemble_sample(spec: &ModelSpec, generators: &[(usize, &ParamSet)], batch_size: usize, rng: &mut StreamRng) -> Result<SyntheticBatch> {
    if generators.is_empty() {
        return Err(Error::config("ensemble needs at least one generator"));
    }
    let g = generators.len();
    let latent_dim = spec.input_dim();
    let latents = sample_latent(batch_size, latent_dim, rng);
    let mut samples = Matrix::zeros(batch_size, spec.output_dim());
    let mut ids = vec![0; batch_size];
    for (k, (id, params)) in generators.iter().enumerate() {
        let rows: Vec<usize> = (k..batch_size).step_by(g).collect();
        if rows.is_empty() {
            continue;
        }
        let out = forward_from(params, spec, &latents.select_rows(&rows), 0, Mode::Eval)?.logits;
        for (j, &r) in rows.iter().enumerate() {
            samples.row_mut(r).copy_from_slice(out.row(j));
            ids[r] = *id;
        }
    }
    Ok(SyntheticBatch {
        samples,
        source_generator_ids: ids,
        latents,
    })
}

/// FedAvg of generator parameters (the unstable baseline).
pub fn aggregate_generators_baseline(generators: &[(usize, &ParamSet)], weights: &[f64]) -> Result<ParamSet> {
    if generators.len() != weights.len() {
        return Err(Error::config("one weight per generator"));
    }
    let c: Vec<Contribution<'_>> = generators
        .iter()
        .zip(weights)
        .map(|(&(id, p), &w)| Contribution { id, weight: w, params: p })
        .collect();
    fedavg_aggregate(&c)
}

/// Shared seeded initialization for every client generator.
pub fn init_generator(spec: &ModelSpec, seed: u64) -> ParamSet {
    spec.init_params(&mut stream(seed, "generator-init", &[]))
}
