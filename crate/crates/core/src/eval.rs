//! Accuracy, sample-diversity metrics and the ensemble-variance harness.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;

use crate::data::{sample_dirichlet, Dataset};
use crate::distill::{distill_student, DistillConfig, SampleSource, Teacher};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::graph::{features, predict};
use crate::nn::{ModelSpec, ParamSet};
use crate::rng::stream;

/// Fraction of rows whose argmax equals the label.
pub fn accuracy_of_logits(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::config("accuracy on an empty set"));
    }
    if logits.rows() != labels.len() {
        return Err(Error::shape("one logit row per label"));
    }
    let hits = logits.argmax_rows().iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn global_accuracy(params: &ParamSet, spec: &ModelSpec, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::config("empty test set"));
    }
    accuracy_of_logits(&predict(params, spec, &test.inputs)?, &test.labels)
}

/// Seeded shuffle cut into `num_clients` contiguous shards whose sizes
/// differ by at most one (the first `n mod N` shards get the extra row).
pub fn test_shards(n: usize, num_clients: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, "test-split", &[]));
    let base = n / num_clients.max(1);
    let extra = n % num_clients.max(1);
    let mut out = Vec::with_capacity(num_clients);
    let mut start = 0;
    for i in 0..num_clients {
        let len = base + usize::from(i < extra);
        out.push(idx[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Mean over clients of each local model's accuracy on its own test shard.
pub fn local_accuracy(models: &[(&ModelSpec, &ParamSet)], test: &Dataset, seed: u64) -> Result<f64> {
    if models.is_empty() {
        return Err(Error::config("no client models"));
    }
    let shards = test_shards(test.len(), models.len(), seed);
    let mut total = 0.0;
    for ((spec, params), shard) in models.iter().zip(&shards) {
        if shard.is_empty() {
            return Err(Error::config("more clients than test samples"));
        }
        let sub = test.subset(shard);
        total += accuracy_of_logits(&predict(params, spec, &sub.inputs)?, &sub.labels)?;
    }
    Ok(total / models.len() as f64)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean Euclidean distance over all unordered row pairs.
pub fn mean_pairwise_distance(feats: &Matrix) -> Result<f64> {
    let n = feats.rows();
    if n < 2 {
        return Err(Error::DegenerateBatch(n));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += dist(feats.row(i), feats.row(j));
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

/// Mean pairwise distance of the batch in the feature space of a model.
pub fn pairwise_diversity(batch: &Matrix, spec: &ModelSpec, params: &ParamSet) -> Result<f64> {
    mean_pairwise_distance(&features(params, spec, batch)?)
}

/// Silhouette coefficient of `points` under `labels`; `None` when fewer
/// than two clusters are present. Singleton clusters score 0.
pub fn silhouette(points: &Matrix, labels: &[usize]) -> Result<Option<f64>> {
    let n = points.rows();
    if n < 2 {
        return Err(Error::DegenerateBatch(n));
    }
    if labels.len() != n {
        return Err(Error::shape("one label per point"));
    }
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    if clusters.len() < 2 {
        return Ok(None);
    }
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; clusters.len()];
        let mut counts = vec![0usize; clusters.len()];
        for j in 0..n {
            if i == j {
                continue;
            }
            let k = clusters.binary_search(&labels[j]).unwrap();
            sums[k] += dist(points.row(i), points.row(j));
            counts[k] += 1;
        }
        let own = clusters.binary_search(&labels[i]).unwrap();
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..clusters.len())
            .filter(|&k| k != own && counts[k] > 0)
            .map(|k| sums[k] / counts[k] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(Some(total / n as f64))
}

/// Silhouette of the batch's model features under argmax pseudo-labels.
pub fn silhouette_score(batch: &Matrix, spec: &ModelSpec, params: &ParamSet) -> Result<Option<f64>> {
    let fp = crate::nn::graph::forward_from(params, spec, batch, 0, crate::nn::Mode::Eval)?;
    let feats = fp.features.ok_or_else(|| Error::structure("model has no output head"))?;
    silhouette(&feats, &fp.logits.argmax_rows())
}

/// Scalar expert predictions `f_c = f* + ε_c + δ_c` with `ε_c ~ N(0, σ_c²)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseModel {
    pub variances: Vec<f64>,
    pub biases: Vec<Vec<f64>>,
    pub f_star: f64,
}

impl NoiseModel {
    pub fn unbiased(variances: Vec<f64>) -> Self {
        let k = variances.len();
        Self {
            variances,
            biases: vec![vec![0.0]; k],
            f_star: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.variances.is_empty() || self.variances.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::config("expert variances must be positive"));
        }
        if self.biases.len() != self.variances.len() {
            return Err(Error::config("one bias vector per expert"));
        }
        Ok(())
    }
}

/// `α_c ∝ 1/σ_c²`.
pub fn inverse_variance_weights(variances: &[f64]) -> Vec<f64> {
    let s: f64 = variances.iter().map(|v| 1.0 / v).sum();
    variances.iter().map(|v| (1.0 / v) / s).collect()
}

/// `α_c ∝ 1/(σ_c² + ‖δ_c‖²)`, the MSE-optimal weighting for independent experts.
pub fn mse_optimal_weights(noise: &NoiseModel) -> Vec<f64> {
    let raw: Vec<f64> = noise
        .variances
        .iter()
        .zip(&noise.biases)
        .map(|(v, d)| 1.0 / (v + d.iter().map(|x| x * x).sum::<f64>()))
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|r| r / s).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct VarianceReport {
    pub k: usize,
    pub samples: usize,
    pub var_ve_closed: f64,
    pub var_me_closed: f64,
    pub var_ve: f64,
    pub var_me: f64,
    pub eps_mc: f64,
    pub pass: bool,
}

/// Monte-Carlo check that inverse-variance weighting of the first `k`
/// experts never has more variance than uniform averaging.
pub fn verify_variance_theorem(noise: &NoiseModel, k: usize, samples: usize, seed: u64) -> Result<VarianceReport> {
    noise.validate()?;
    if k == 0 || k > noise.variances.len() {
        return Err(Error::config(format!("k = {k} outside 1..={}", noise.variances.len())));
    }
    if samples < 2 {
        return Err(Error::config("need at least two samples"));
    }
    let vars = &noise.variances[..k];
    let alpha = inverse_variance_weights(vars);
    let kf = k as f64;
    let var_ve_closed = vars.iter().sum::<f64>() / (kf * kf);
    let var_me_closed = 1.0 / vars.iter().map(|v| 1.0 / v).sum::<f64>();
    let sd: Vec<f64> = vars.iter().map(|v| v.sqrt()).collect();
    let mut rng = stream(seed, "variance-theorem", &[k as u64]);
    let (mut s_ve, mut ss_ve, mut s_me, mut ss_me) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..samples {
        let mut ve = 0.0;
        let mut me = 0.0;
        for c in 0..k {
            let e: f64 = rng.sample::<f64, _>(StandardNormal) * sd[c];
            ve += e / kf;
            me += alpha[c] * e;
        }
        s_ve += ve;
        ss_ve += ve * ve;
        s_me += me;
        ss_me += me * me;
    }
    let n = samples as f64;
    let var = |s: f64, ss: f64| (ss - s * s / n) / (n - 1.0);
    let var_ve = var(s_ve, ss_ve);
    let var_me = var(s_me, ss_me);
    let eps_mc = 3.0 / n.sqrt();
    let close = |mc: f64, closed: f64| ((mc - closed) / closed).abs() <= eps_mc;
    let pass = var_me <= var_ve * (1.0 + 3.0 * eps_mc) && close(var_ve, var_ve_closed) && close(var_me, var_me_closed);
    Ok(VarianceReport {
        k,
        samples,
        var_ve_closed,
        var_me_closed,
        var_ve,
        var_me,
        eps_mc,
        pass,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BiasReport {
    /// `‖Σ α_c δ_c‖²` on the given configuration.
    pub weighted_bias: f64,
    /// `Σ α_c ‖δ_c‖²`.
    pub mean_bias: f64,
    pub max_bias: f64,
    pub random_trials: usize,
    pub violations: usize,
    pub pass: bool,
}

fn bias_chain(biases: &[Vec<f64>], weights: &[f64]) -> (f64, f64, f64) {
    let dim = biases.iter().map(Vec::len).max().unwrap_or(0);
    let mut mix = vec![0.0; dim];
    for (d, &a) in biases.iter().zip(weights) {
        for (m, v) in mix.iter_mut().zip(d) {
            *m += a * v;
        }
    }
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let weighted = sq(&mix);
    let mean = biases.iter().zip(weights).map(|(d, a)| a * sq(d)).sum();
    let max = biases.iter().map(|d| sq(d)).fold(0.0, f64::max);
    (weighted, mean, max)
}

fn chain_holds(w: f64, m: f64, x: f64) -> bool {
    let tol = |v: f64| 1e-12 * v.abs() + 1e-15;
    w <= m + tol(m) && m <= x + tol(x)
}

/// Checks `‖Σαδ‖² ≤ Σα‖δ‖² ≤ max‖δ‖²` on `noise`/`weights` and on
/// `random_trials` seeded random configurations.
pub fn verify_bias_bound(noise: &NoiseModel, weights: &[f64], random_trials: usize, seed: u64) -> Result<BiasReport> {
    noise.validate()?;
    if weights.len() != noise.biases.len() || weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::config("one non-negative weight per expert"));
    }
    if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config("weights must sum to 1"));
    }
    let (weighted_bias, mean_bias, max_bias) = bias_chain(&noise.biases, weights);
    let mut violations = usize::from(!chain_holds(weighted_bias, mean_bias, max_bias));
    let mut rng = stream(seed, "bias-bound", &[]);
    let unit = Normal::new(0.0, 1.0).unwrap();
    for _ in 0..random_trials {
        let k = rng.random_range(1..=8);
        let dim = rng.random_range(1..=5);
        let scale = 10f64.powf(rng.random_range(-2.0..2.0));
        let biases: Vec<Vec<f64>> = (0..k).map(|_| (0..dim).map(|_| scale * unit.sample(&mut rng)).collect()).collect();
        let alpha = sample_dirichlet(1.0, k, &mut rng);
        let (w, m, x) = bias_chain(&biases, &alpha);
        if !chain_holds(w, m, x) {
            violations += 1;
        }
    }
    Ok(BiasReport {
        weighted_bias,
        mean_bias,
        max_bias,
        random_trials,
        violations,
        pass: violations == 0,
    })
}

/// Trains a fresh student purely by distilling `teacher` over `source` and
/// returns its test accuracy.
pub fn kd_transfer_score(
    teacher_spec: &ModelSpec,
    teacher: &ParamSet,
    source: &SampleSource<'_>,
    student_spec: &ModelSpec,
    cfg: &DistillConfig,
    test: &Dataset,
    seed: u64,
) -> Result<f64> {
    let student = student_spec.init_params(&mut stream(seed, "kd-transfer-student", &[]));
    let t = Teacher::Model {
        spec: teacher_spec,
        params: teacher,
    };
    let mut rng = stream(seed, "kd-transfer", &[]);
    let cfg = DistillConfig {
        freeze_student_bn: false,
        ..*cfg
    };
    let out = distill_student(&student, student_spec, &t, source, &cfg, &mut rng)?;
    global_accuracy(&out.student, student_spec, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shard_sizes_differ_by_at_most_one() {
        let s = test_shards(103, 10, 0);
        let sizes: Vec<usize> = s.iter().map(Vec::len).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 103);
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn distance_by_hand() {
        let m = Matrix::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(mean_pairwise_distance(&m).unwrap(), 5.0);
    }

    #[test]
    fn single_cluster_is_undefined() {
        let m = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        assert_eq!(silhouette(&m, &[1, 1, 1]).unwrap(), None);
    }
}
