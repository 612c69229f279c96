//! Class-wise experts, top-k gating, prototypes and the meta model.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::models::{meta_averaging_init, SubModelMask};
use crate::nn::graph::{backward, features, forward_from, head_logits, predict, Mode};
use crate::nn::loss::cross_entropy;
use crate::nn::{ModelSpec, Optimizer, OptimizerConfig, ParamSet};
use crate::protocol::{weighted_coordinate, Contribution};
use crate::rng::StreamRng;

/// A full-width client model with its label histogram.
#[derive(Debug, Clone, Copy)]
pub struct ClassContribution<'a> {
    pub id: usize,
    pub params: &'a ParamSet,
    pub histogram: &'a [usize],
}

/// Expert `c` is the `|D_{i,c}|`-weighted mean of the client models; a class
/// nobody holds falls back to `global`.
pub fn classwise_aggregate(global: &ParamSet, contribs: &[ClassContribution<'_>], num_classes: usize) -> Result<Vec<ParamSet>> {
    if contribs.iter().any(|c| !c.params.same_structure(global)) {
        return Err(Error::structure("client models must be embedded to full width first"));
    }
    if contribs.iter().any(|c| c.histogram.len() != num_classes) {
        return Err(Error::shape("histogram length differs from the class count"));
    }
    let mut experts = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let members: Vec<Contribution<'_>> = contribs
            .iter()
            .filter(|k| k.histogram[c] > 0)
            .map(|k| Contribution {
                id: k.id,
                weight: k.histogram[c] as f64,
                params: k.params,
            })
            .collect();
        if members.is_empty() {
            log::info!("class {c} is held by no client; its expert is the global model");
            experts.push(global.clone());
            continue;
        }
        let mut out = global.clone();
        out.for_each_mut(|name, _, dst| {
            let srcs: Vec<&[f64]> = members.iter().map(|m| m.params.values(name).unwrap()).collect();
            let mut items = Vec::with_capacity(members.len());
            for (k, d) in dst.iter_mut().enumerate() {
                items.clear();
                items.extend(members.iter().zip(&srcs).map(|(m, s)| (m.id, m.weight, s[k])));
                *d = weighted_coordinate(&mut items);
            }
        });
        experts.push(out);
    }
    Ok(experts)
}

/// The `k` highest scores, ties to the lower index; returned in index order.
pub fn gate_topk(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k.min(scores.len()));
    idx.sort_unstable();
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaInput {
    /// Raw samples through the full networks.
    RawInput,
    /// Penultimate features through the output heads only.
    Feature,
}

#[derive(Debug, Clone)]
pub struct ExpertSet {
    pub spec: ModelSpec,
    pub experts: Vec<ParamSet>,
    pub gating: ParamSet,
    pub meta_spec: ModelSpec,
    pub meta: ParamSet,
    pub shadow: ParamSet,
    pub top_k: usize,
}

impl ExpertSet {
    pub fn new(spec: ModelSpec, experts: Vec<ParamSet>, gating: ParamSet, top_k: usize, rng: &mut StreamRng) -> Result<Self> {
        let c = spec.output_dim();
        if experts.len() != c {
            return Err(Error::structure(format!("{} experts for {c} classes", experts.len())));
        }
        if top_k == 0 || top_k > c {
            return Err(Error::config(format!("top_k = {top_k} outside 1..={c}")));
        }
        let (meta_spec, meta) = meta_averaging_init(c, rng);
        Ok(Self {
            spec,
            experts,
            gating,
            meta_spec,
            shadow: meta.clone(),
            meta,
            top_k,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.spec.output_dim()
    }

    fn eval(&self, params: &ParamSet, x: &Matrix, mode: MetaInput) -> Result<Matrix> {
        match mode {
            MetaInput::RawInput => predict(params, &self.spec, x),
            MetaInput::Feature => head_logits(params, &self.spec, x),
        }
    }

    /// Gated `C·C` concatenation of expert logits; inactive slots are zero.
    pub fn meta_inputs(&self, x: &Matrix, mode: MetaInput) -> Result<Matrix> {
        let c = self.num_classes();
        let gate = self.eval(&self.gating, x, mode)?;
        let outs: Vec<Matrix> = self.experts.iter().map(|e| self.eval(e, x, mode)).collect::<Result<_>>()?;
        let mut m = Matrix::zeros(x.rows(), c * c);
        for r in 0..x.rows() {
            for slot in gate_topk(gate.row(r), self.top_k) {
                m.row_mut(r)[slot * c..(slot + 1) * c].copy_from_slice(outs[slot].row(r));
            }
        }
        Ok(m)
    }

    /// Teacher logits from the EMA shadow of the meta model.
    pub fn meta_forward(&self, x: &Matrix, mode: MetaInput) -> Result<Matrix> {
        predict(&self.shadow, &self.meta_spec, &self.meta_inputs(x, mode)?)
    }

    /// Mean over the active experts' logits, without the meta model.
    pub fn classwise_uniform(&self, x: &Matrix, mode: MetaInput) -> Result<Matrix> {
        let c = self.num_classes();
        let gate = self.eval(&self.gating, x, mode)?;
        let outs: Vec<Matrix> = self.experts.iter().map(|e| self.eval(e, x, mode)).collect::<Result<_>>()?;
        let mut m = Matrix::zeros(x.rows(), c);
        for r in 0..x.rows() {
            let active = gate_topk(gate.row(r), self.top_k);
            let k = active.len() as f64;
            for slot in active {
                for (v, e) in m.row_mut(r).iter_mut().zip(outs[slot].row(r)) {
                    *v += e / k;
                }
            }
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub client: usize,
    pub class: usize,
    /// Mean penultimate feature, in global feature coordinates.
    pub feature: Vec<f64>,
    pub support: usize,
}

/// Mean penultimate features of the `q` most frequent local classes (ties to
/// the lower class). Features of a width-reduced model are scattered into the
/// global feature coordinates its last hidden mask selects; the rest are zero.
pub fn extract_prototypes(
    client: usize,
    spec: &ModelSpec,
    params: &ParamSet,
    inputs: &Matrix,
    labels: &[usize],
    num_classes: usize,
    q: usize,
    mask: Option<&SubModelMask>,
    global_feature_dim: usize,
) -> Result<Vec<Prototype>> {
    if q == 0 {
        return Err(Error::config("q must be at least 1"));
    }
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        counts[l] += 1;
    }
    let mut classes: Vec<usize> = (0..num_classes).filter(|&c| counts[c] > 0).collect();
    classes.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    if classes.len() < q {
        log::info!("client {client} has {} non-empty classes, fewer than q = {q}", classes.len());
    }
    classes.truncate(q);
    let feats = features(params, spec, inputs)?;
    let local_dim = feats.cols();
    let scatter: Vec<usize> = match mask.and_then(|m| m.units.last()) {
        Some(u) => u.clone(),
        None => (0..local_dim).collect(),
    };
    if scatter.len() != local_dim || scatter.iter().any(|&j| j >= global_feature_dim) {
        return Err(Error::shape("feature mask does not match the model"));
    }
    let mut out = Vec::with_capacity(classes.len());
    for c in classes {
        let mut f = vec![0.0; global_feature_dim];
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        for &r in &rows {
            for (j, &g) in scatter.iter().enumerate() {
                f[g] += feats.get(r, j);
            }
        }
        for v in &mut f {
            *v /= rows.len() as f64;
        }
        out.push(Prototype {
            client,
            class: c,
            feature: f,
            support: rows.len(),
        });
    }
    Ok(out)
}

/// `client,class,support,f0,f1,…` rows.
pub fn prototypes_csv(protos: &[Prototype]) -> String {
    let dim = protos.first().map_or(0, |p| p.feature.len());
    let mut s = String::from("client,class,support");
    for j in 0..dim {
        let _ = write!(s, ",f{j}");
    }
    s.push('\n');
    for p in protos {
        let _ = write!(s, "{},{},{}", p.client, p.class, p.support);
        for v in &p.feature {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    /// L₂.
    pub epochs: usize,
    pub lr: f64,
    pub ema_decay: f64,
    pub batch_size: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 1e-3,
            ema_decay: 0.99,
            batch_size: 32,
        }
    }
}

/// Fits the meta model to prototype labels with cross-entropy; experts and
/// gating stay fixed. The EMA shadow follows `β·shadow + (1 − β)·θ`.
pub fn train_meta(set: &mut ExpertSet, protos: &[Prototype], cfg: &MetaConfig, rng: &mut StreamRng) -> Result<Vec<f64>> {
    if protos.is_empty() {
        return Err(Error::config("meta training needs at least one prototype"));
    }
    let feats = Matrix::from_rows(&protos.iter().map(|p| p.feature.clone()).collect::<Vec<_>>())?;
    let labels: Vec<usize> = protos.iter().map(|p| p.class).collect();
    let inputs = set.meta_inputs(&feats, MetaInput::Feature)?;
    let mut opt = Optimizer::new(OptimizerConfig::adam(cfg.lr));
    let n = protos.len();
    let b = cfg.batch_size.max(1);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let beta = cfg.ema_decay;
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
        let mut total = 0.0;
        for chunk in order.chunks(b) {
            let x = inputs.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let fp = forward_from(&set.meta, &set.meta_spec, &x, 0, Mode::Train)?;
            let (loss, g) = cross_entropy(&fp.logits, &y)?;
            let grads = backward(&set.meta, &fp.cache, &g)?;
            opt.step(&mut set.meta, &grads)?;
            if beta < 1.0 {
                let live = &set.meta;
                set.shadow.for_each_mut(|name, _, dst| {
                    let src = live.values(name).unwrap();
                    for (s, &v) in dst.iter_mut().zip(src) {
                        *s = beta * *s + (1.0 - beta) * v;
                    }
                });
            }
            total += loss * chunk.len() as f64;
        }
        curve.push(total / n as f64);
    }
    Ok(curve)
}

/// Unweighted mean of the models' logits, accumulated in ascending id order.
pub fn vanilla_ensemble(spec: &ModelSpec, models: &[(usize, &ParamSet)], x: &Matrix) -> Result<Matrix> {
    if models.is_empty() {
        return Err(Error::config("ensemble needs at least one model"));
    }
    let mut order = models.to_vec();
    order.sort_by_key(|m| m.0);
    let k = models.len() as f64;
    let mut out = Matrix::zeros(x.rows(), spec.output_dim());
    for (_, m) in order {
        out.add_scaled(&predict(m, spec, x)?, 1.0 / k);
    }
    Ok(out)
}
