//! Federated primitives: client state, sampling, local updates and the
//! aggregation rules.
//!
//! Every weighted mean is accumulated in ascending client-id order as
//! `Σ (p_i / Σp)·θ_i` and then clamped into `[min θ_i, max θ_i]`, which makes
//! results independent of input order and exact when all inputs agree.

use std::sync::Mutex;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{histogram, Dataset, Split};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::models::{embed_submodel, Coverage, SubModelMask};
use crate::nn::graph::{backward, commit_running_stats, forward_from, Mode};
use crate::nn::loss::cross_entropy;
use crate::nn::{ModelSpec, Optimizer, OptimizerConfig, ParamSet};
use crate::rng::{stream, StreamRng};

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub shard: Vec<usize>,
    pub label_histogram: Vec<usize>,
    pub ratio: f64,
    /// Spec of the (possibly width-reduced) local model.
    pub spec: ModelSpec,
    pub params: ParamSet,
    /// Mask the current local model was extracted with; `None` at full width.
    pub mask: Option<SubModelMask>,
    pub generator: Option<ParamSet>,
}

impl ClientState {
    pub fn new(id: usize, shard: Vec<usize>, labels: &[usize], num_classes: usize, ratio: f64, spec: ModelSpec, params: ParamSet) -> Self {
        let label_histogram = histogram(&shard.iter().map(|&i| labels[i]).collect::<Vec<_>>(), num_classes);
        Self {
            id,
            shard,
            label_histogram,
            ratio,
            spec,
            params,
            mask: None,
            generator: None,
        }
    }

    pub fn n(&self) -> usize {
        self.shard.len()
    }
}

/// Uniform sample of `s` out of `n` clients without replacement, sorted.
pub fn sample_clients(n: usize, s: usize, round: usize, seed: u64) -> Result<Vec<usize>> {
    if s == 0 || s > n {
        return Err(Error::config(format!("cannot sample {s} of {n} clients")));
    }
    if s == n {
        return Ok((0..n).collect());
    }
    let mut rng = stream(seed, "client-sampling", &[round as u64]);
    let mut v = index::sample(&mut rng, n, s).into_vec();
    v.sort_unstable();
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

#[derive(Debug, Clone)]
pub struct LocalResult {
    pub params: ParamSet,
    /// Training loss of every step, measured before the update.
    pub losses: Vec<f64>,
}

/// Row indices of one mini-batch: without replacement when the shard is large
/// enough, otherwise with replacement (at least two rows for batch norm).
pub fn draw_batch<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<usize> {
    let b = batch_size.max(2);
    if n >= b {
        index::sample(rng, n, b).into_vec()
    } else if n >= 2 {
        (0..n).collect()
    } else {
        (0..b).map(|_| rng.random_range(0..n)).collect()
    }
}

/// `steps` mini-batch cross-entropy steps on `data` starting from `params`.
pub fn local_update(params: &ParamSet, spec: &ModelSpec, data: &Dataset, cfg: &LocalConfig, rng: &mut StreamRng) -> Result<LocalResult> {
    if data.is_empty() {
        return Err(Error::Size("client shard is empty".into()));
    }
    let mut p = params.clone();
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let idx = draw_batch(data.len(), cfg.batch_size, rng);
        let x = data.inputs.select_rows(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let fp = forward_from(&p, spec, &x, 0, Mode::Train)?;
        let (loss, g) = cross_entropy(&fp.logits, &y)?;
        let grads = backward(&p, &fp.cache, &g)?;
        opt.step(&mut p, &grads)?;
        commit_running_stats(&mut p, spec, &fp.batch_stats)?;
        losses.push(loss);
    }
    Ok(LocalResult { params: p, losses })
}

/// Mean cross-entropy of a model on a dataset (eval mode).
pub fn dataset_loss(params: &ParamSet, spec: &ModelSpec, data: &Dataset) -> Result<f64> {
    let fp = forward_from(params, spec, &data.inputs, 0, Mode::Eval)?;
    Ok(cross_entropy(&fp.logits, &data.labels)?.0)
}

/// One client's parameters entering an aggregation.
#[derive(Debug, Clone, Copy)]
pub struct Contribution<'a> {
    pub id: usize,
    pub weight: f64,
    pub params: &'a ParamSet,
}

/// Weighted mean of one coordinate; `items` are `(id, weight, value)`.
pub fn weighted_coordinate(items: &mut [(usize, f64, f64)]) -> f64 {
    items.sort_by_key(|t| t.0);
    let total: f64 = items.iter().map(|t| t.1).sum();
    let mut acc = 0.0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(_, w, v) in items.iter() {
        acc += (w / total) * v;
        lo = lo.min(v);
        hi = hi.max(v);
    }
    acc.clamp(lo, hi)
}

fn sorted<'a>(contribs: &[Contribution<'a>]) -> Result<Vec<Contribution<'a>>> {
    if contribs.is_empty() {
        return Err(Error::config("nothing to aggregate"));
    }
    let mut v = contribs.to_vec();
    v.sort_by_key(|c| c.id);
    if v.windows(2).any(|w| w[0].id == w[1].id) {
        return Err(Error::config("duplicate client id in aggregation"));
    }
    if v.iter().any(|c| !(c.weight >= 0.0)) {
        return Err(Error::config("aggregation weights must be non-negative"));
    }
    if v.iter().map(|c| c.weight).sum::<f64>() <= 0.0 {
        return Err(Error::config("aggregation weights are all zero"));
    }
    Ok(v)
}

/// Coordinatewise weighted mean of identically shaped models, running
/// statistics included.
pub fn fedavg_aggregate(contribs: &[Contribution<'_>]) -> Result<ParamSet> {
    let v = sorted(contribs)?;
    let first = v[0].params;
    if v.iter().any(|c| !c.params.same_structure(first)) {
        return Err(Error::structure("clients do not share one model spec"));
    }
    let total: f64 = v.iter().map(|c| c.weight).sum();
    let mut out = first.clone();
    out.for_each_mut(|name, _, dst| {
        let srcs: Vec<&[f64]> = v.iter().map(|c| c.params.values(name).unwrap()).collect();
        for (k, d) in dst.iter_mut().enumerate() {
            let mut acc = 0.0;
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for (c, s) in v.iter().zip(&srcs) {
                acc += (c.weight / total) * s[k];
                lo = lo.min(s[k]);
                hi = hi.max(s[k]);
            }
            *d = acc.clamp(lo, hi);
        }
    });
    Ok(out)
}

/// A width-reduced client model with the mask it covers.
#[derive(Debug, Clone, Copy)]
pub struct MaskedContribution<'a> {
    pub id: usize,
    pub weight: f64,
    pub params: &'a ParamSet,
    pub mask: &'a SubModelMask,
}

/// Each global coordinate becomes the weighted mean over the clients whose
/// mask covers it; coordinates nobody covers keep their previous value.
pub fn partial_aggregate(prev: &ParamSet, global: &ModelSpec, contribs: &[MaskedContribution<'_>]) -> Result<ParamSet> {
    let plain: Vec<Contribution<'_>> = contribs
        .iter()
        .map(|c| Contribution {
            id: c.id,
            weight: c.weight,
            params: c.params,
        })
        .collect();
    sorted(&plain)?;
    let mut order: Vec<&MaskedContribution<'_>> = contribs.iter().collect();
    order.sort_by_key(|c| c.id);
    let embedded: Vec<(ParamSet, Coverage)> = order
        .iter()
        .map(|c| {
            let mut full = prev.clone();
            let cov = embed_submodel(&mut full, global, c.params, c.mask)?;
            Ok((full, cov))
        })
        .collect::<Result<_>>()?;
    let mut out = prev.clone();
    out.for_each_mut(|name, _, dst| {
        for (k, d) in dst.iter_mut().enumerate() {
            let mut total = 0.0;
            for (c, (_, cov)) in order.iter().zip(&embedded) {
                if cov[name][k] {
                    total += c.weight;
                }
            }
            if total <= 0.0 {
                continue;
            }
            let mut acc = 0.0;
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for (c, (full, cov)) in order.iter().zip(&embedded) {
                if cov[name][k] {
                    let v = full.values(name).unwrap()[k];
                    acc += (c.weight / total) * v;
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            *d = acc.clamp(lo, hi);
        }
    });
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct SpecContribution<'a> {
    pub id: usize,
    pub weight: f64,
    pub params: &'a ParamSet,
    pub spec: &'a ModelSpec,
}

/// FedAvg within each group of clients sharing a spec. Groups appear in
/// order of their lowest member id.
pub fn grouped_aggregate(contribs: &[SpecContribution<'_>]) -> Result<Vec<(ModelSpec, Vec<usize>, ParamSet)>> {
    let mut order: Vec<&SpecContribution<'_>> = contribs.iter().collect();
    order.sort_by_key(|c| c.id);
    let mut groups: Vec<(ModelSpec, Vec<&SpecContribution<'_>>)> = Vec::new();
    for c in order {
        match groups.iter_mut().find(|(s, _)| s.layers == c.spec.layers) {
            Some((_, members)) => members.push(c),
            None => groups.push((c.spec.clone(), vec![c])),
        }
    }
    let mut out = Vec::new();
    for (spec, members) in groups {
        if members.iter().map(|m| m.weight).sum::<f64>() <= 0.0 {
            log::warn!("group with zero total weight skipped");
            continue;
        }
        let plain: Vec<Contribution<'_>> = members
            .iter()
            .map(|m| Contribution {
                id: m.id,
                weight: m.weight,
                params: m.params,
            })
            .collect();
        let ids = members.iter().map(|m| m.id).collect();
        out.push((spec, ids, fedavg_aggregate(&plain)?));
    }
    Ok(out)
}

/// Records which data split each stage reads.
#[derive(Debug, Default)]
pub struct DataAudit {
    log: Mutex<Vec<(String, Split, usize)>>,
}

impl DataAudit {
    pub fn record(&self, stage: &str, split: Split, rows: usize) {
        self.log.lock().unwrap().push((stage.to_string(), split, rows));
    }

    pub fn accessed(&self, stage: &str, split: Split) -> bool {
        self.log.lock().unwrap().iter().any(|(s, sp, _)| s == stage && *sp == split)
    }

    pub fn stages(&self, split: Split) -> Vec<String> {
        let mut v: Vec<String> = self
            .log
            .lock()
            .unwrap()
            .iter()
            .filter(|(_, sp, _)| *sp == split)
            .map(|(s, _, _)| s.clone())
            .collect();
        v.sort();
        v.dedup();
        v
    }
}

/// Train/test data behind an access log.
#[derive(Debug)]
pub struct DataStore {
    train: Dataset,
    test: Dataset,
    pub audit: DataAudit,
}

impl DataStore {
    pub fn new(train: Dataset, test: Dataset) -> Self {
        Self {
            train,
            test,
            audit: DataAudit::default(),
        }
    }

    pub fn train_labels(&self) -> &[usize] {
        &self.train.labels
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes
    }

    pub fn dim(&self) -> usize {
        self.train.dim()
    }

    pub fn train_len(&self) -> usize {
        self.train.len()
    }

    pub fn train_range(&self) -> (f64, f64) {
        self.train.value_range()
    }

    pub fn shard(&self, stage: &str, idx: &[usize]) -> Dataset {
        self.audit.record(stage, Split::Train, idx.len());
        self.train.subset(idx)
    }

    pub fn train(&self, stage: &str) -> &Dataset {
        self.audit.record(stage, Split::Train, self.train.len());
        &self.train
    }

    pub fn test(&self, stage: &str) -> &Dataset {
        self.audit.record(stage, Split::Test, self.test.len());
        &self.test
    }
}

/// Stacks rows of several matrices (helper for tests and samplers).
pub fn stack(parts: &[Matrix]) -> Result<Matrix> {
    Matrix::vstack(&parts.iter().collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Role, Tensor};

    fn scalar(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Role::Weight, Tensor::new(vec![1], vec![v]).unwrap());
        p
    }

    #[test]
    fn weighted_mean_by_hand() {
        let (a, b) = (scalar(0.0), scalar(4.0));
        let out = fedavg_aggregate(&[
            Contribution { id: 0, weight: 1.0, params: &a },
            Contribution { id: 1, weight: 3.0, params: &b },
        ])
        .unwrap();
        assert_eq!(out.values("w").unwrap()[0], 3.0);
    }

    #[test]
    fn single_client_is_identity() {
        let a = scalar(0.123456789);
        let out = fedavg_aggregate(&[Contribution { id: 5, weight: 7.0, params: &a }]).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn zero_weights_rejected() {
        let a = scalar(1.0);
        assert!(fedavg_aggregate(&[Contribution { id: 0, weight: 0.0, params: &a }]).is_err());
    }

    #[test]
    fn sampling_contract() {
        assert_eq!(sample_clients(5, 5, 3, 0).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(sample_clients(10, 3, 7, 1).unwrap(), sample_clients(10, 3, 7, 1).unwrap());
        assert!(sample_clients(3, 4, 0, 0).is_err());
    }

    #[test]
    fn batches_have_at_least_two_rows() {
        let mut rng = stream(0, "b", &[]);
        assert_eq!(draw_batch(1, 32, &mut rng).len(), 32);
        assert_eq!(draw_batch(3, 32, &mut rng), vec![0, 1, 2]);
        assert_eq!(draw_batch(100, 32, &mut rng).len(), 32);
    }
}
