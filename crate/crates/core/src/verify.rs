//! Self-checking property suites behind `mosaic verify`.
//!
//! Every suite compares library code against an independent oracle (finite
//! differences, brute-force per-coordinate means, closed forms or Monte-Carlo
//! estimates) and reports JSON-serializable pass flags.

use std::collections::BTreeMap;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::distill::kd_loss;
use crate::error::{Error, Result};
use crate::eval::{inverse_variance_weights, verify_bias_bound, verify_variance_theorem, NoiseModel};
use crate::genopt::{discriminator_loss, discriminator_spec, diversity_from_logits, diversity_loss, entropy_from_logits, entropy_loss, generator_adv_loss, inversion_loss};
use crate::matrix::Matrix;
use crate::models::{build_classifier, build_generator, extract_submodel, submodel_mask, MaskScheme, SubModelMask};
use crate::moe::{classwise_aggregate, ClassContribution};
use crate::nn::gradcheck::{gradcheck, gradcheck_at, gradcheck_fn, GradcheckOptions, GradcheckReport};
use crate::nn::loss::{cross_entropy, kl_divergence, kl_divergence_t};
use crate::nn::spec::{param_name, Layer};
use crate::nn::{Batch, ForwardPass, Mode, ModelSpec, ParamSet, Upstream};
use crate::protocol::{fedavg_aggregate, grouped_aggregate, partial_aggregate, Contribution, MaskedContribution, SpecContribution};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Gradcheck,
    Aggregation,
    Theorem,
    Losses,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Gradcheck, Suite::Aggregation, Suite::Theorem, Suite::Losses];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Gradcheck => "gradcheck",
            Suite::Aggregation => "aggregation",
            Suite::Theorem => "theorem",
            Suite::Losses => "losses",
        }
    }

    /// Parses a suite name; `all` expands to every suite.
    pub fn parse_list(name: &str) -> Result<Vec<Suite>> {
        if name == "all" {
            return Ok(Self::ALL.to_vec());
        }
        Ok(vec![name.parse()?])
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::config(format!("unknown suite {s:?} (gradcheck, aggregation, theorem, losses, all)")))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub pass: bool,
    pub checks: Vec<Check>,
    pub wall_ms: f64,
}

impl SuiteReport {
    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.pass)
    }
}

fn check(name: impl Into<String>, pass: bool, detail: Value) -> Check {
    Check {
        name: name.into(),
        pass,
        detail,
    }
}

fn from_grad(name: &str, r: GradcheckReport) -> Check {
    check(name, r.pass, serde_json::to_value(&r).unwrap_or(Value::Null))
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<SuiteReport> {
    let t = Instant::now();
    let checks = match suite {
        Suite::Gradcheck => gradcheck_suite(seed)?,
        Suite::Aggregation => aggregation_suite(seed, 100)?,
        Suite::Theorem => theorem_suite(seed)?,
        Suite::Losses => losses_suite()?,
    };
    Ok(SuiteReport {
        suite,
        pass: checks.iter().all(|c| c.pass),
        checks,
        wall_ms: t.elapsed().as_secs_f64() * 1e3,
    })
}

// ---------------------------------------------------------------- gradients

fn ce(fp: &ForwardPass, b: &Batch) -> Result<(f64, Upstream)> {
    let (l, g) = cross_entropy(&fp.logits, b.labels.as_deref().unwrap_or(&[]))?;
    Ok((l, Upstream::output(g)))
}

/// Seeded parameters with non-trivial batch-norm running statistics.
fn jittered_params(spec: &ModelSpec, seed: u64, name: &str) -> ParamSet {
    let mut rng = stream(seed, name, &[]);
    let mut p = spec.init_params(&mut rng);
    for l in 0..spec.layers.len() {
        if let Ok(m) = p.values_mut(&param_name(l, "running_mean")) {
            m.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        if let Ok(v) = p.values_mut(&param_name(l, "running_var")) {
            v.iter_mut().for_each(|x| *x = rng.random_range(0.5..2.0));
        }
        if let Ok(g) = p.values_mut(&param_name(l, "gain")) {
            g.iter_mut().for_each(|x| *x = rng.random_range(0.5..1.5));
        }
    }
    p
}

pub fn gradcheck_suite(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let opts = GradcheckOptions::default();
    let clf = build_classifier(5, &[6, 4], 3);

    for (label, mode) in [("train", Mode::Train), ("eval", Mode::Eval)] {
        let o = GradcheckOptions { mode, ..opts };
        let params = jittered_params(&clf, seed, "gc-classifier");
        let mut rng = stream(seed, "gc-batch", &[]);
        let x = Matrix::random_normal(5, 5, &mut rng);
        let batch = Batch::new(x, Some(vec![0, 1, 2, 1, 0]))?;
        out.push(from_grad(
            &format!("dense+batchnorm+relu+head/cross_entropy/{label}"),
            gradcheck_at(&params, &clf, &batch, &ce, o)?,
        ));
    }

    let plain = ModelSpec::mlp(4, &[5], 3, false);
    out.push(from_grad("dense+relu+head/cross_entropy", gradcheck(&plain, &ce, seed, opts)?));

    // Generator layers (Squash output) under a fixed linear readout.
    let gen = build_generator(3, 4, 6, -2.0, 3.0)?;
    let readout: Vec<f64> = (0..4 * 4).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
    let lin = move |fp: &ForwardPass, _: &Batch| -> Result<(f64, Upstream)> {
        let y = &fp.logits;
        let mut g = Matrix::zeros(y.rows(), y.cols());
        let mut v = 0.0;
        for r in 0..y.rows() {
            for c in 0..y.cols() {
                let w = readout[(r * y.cols() + c) % readout.len()];
                v += w * y.get(r, c) + 0.5 * y.get(r, c).powi(2);
                g.set(r, c, w + y.get(r, c));
            }
        }
        Ok((v, Upstream::output(g)))
    };
    out.push(from_grad("generator(dense+batchnorm+relu+squash)/quadratic", gradcheck(&gen, &lin, seed, opts)?));

    // KL against fixed teacher logits at two temperatures, and the kd objective.
    let teacher = Matrix::random_normal(4, 3, &mut stream(seed, "gc-teacher", &[]));
    for t in [1.0, 2.5] {
        let tl = teacher.clone();
        let kl = move |fp: &ForwardPass, _: &Batch| -> Result<(f64, Upstream)> {
            let (l, g) = kl_divergence_t(&fp.logits, &tl, t)?;
            Ok((l, Upstream::output(g)))
        };
        out.push(from_grad(&format!("kl_divergence/T={t}"), gradcheck(&clf, &kl, seed, opts)?));
    }
    let tl = teacher.clone();
    let kd = move |fp: &ForwardPass, _: &Batch| -> Result<(f64, Upstream)> {
        let (l, g) = kd_loss(&fp.logits, &tl, 0.8, 0.2, 1.0)?;
        Ok((l, Upstream::output(g)))
    };
    out.push(from_grad("kd_loss", gradcheck(&clf, &kd, seed, opts)?));

    // Generator objectives as functions of the synthetic samples.
    let frozen = jittered_params(&clf, seed, "gc-frozen");
    let samples = Matrix::random_normal(6, 5, &mut stream(seed, "gc-samples", &[]));
    let (s, p) = (&clf, &frozen);
    out.push(from_grad("entropy_loss", gradcheck_fn(&|x| entropy_loss(s, p, x), &samples, opts)?));
    out.push(from_grad("diversity_loss", gradcheck_fn(&|x| diversity_loss(s, p, x), &samples, opts)?));
    out.push(from_grad("inversion_loss", gradcheck_fn(&|x| inversion_loss(s, p, x), &samples, opts)?));
    let logits = Matrix::random_normal(5, 4, &mut stream(seed, "gc-logits", &[]));
    out.push(from_grad(
        "entropy_from_logits",
        gradcheck_fn(&|x| Ok(entropy_from_logits(x)), &logits, opts)?,
    ));
    out.push(from_grad(
        "diversity_from_logits",
        gradcheck_fn(&|x| Ok(diversity_from_logits(x)), &logits, opts)?,
    ));

    // Adversarial terms on raw scores and through the discriminator.
    let scores = Matrix::random_normal(6, 1, &mut stream(seed, "gc-scores", &[]));
    let dloss = |x: &Matrix| -> Result<(f64, Matrix)> {
        let (real, fake) = x.as_slice().split_at(3);
        let (v, gr, gf) = discriminator_loss(real, fake);
        Matrix::from_vec(6, 1, gr.into_iter().chain(gf).collect()).map(|g| (v, g))
    };
    out.push(from_grad("discriminator_loss", gradcheck_fn(&dloss, &scores, opts)?));
    let disc = discriminator_spec(&clf)?;
    for ns in [false, true] {
        let f = move |fp: &ForwardPass, _: &Batch| -> Result<(f64, Upstream)> {
            let (v, g) = generator_adv_loss(fp.logits.as_slice(), ns);
            Ok((v, Upstream::output(Matrix::from_vec(fp.logits.rows(), 1, g)?)))
        };
        let name = if ns { "generator_adv_loss/non_saturating" } else { "generator_adv_loss/saturating" };
        out.push(from_grad(name, gradcheck(&disc, &f, seed, opts)?));
    }
    Ok(out)
}

// -------------------------------------------------------------- aggregation

/// `Σ (w_i / Σw)·v_i` in ascending id order, clamped to the value range.
fn oracle_mean(items: &[(usize, f64, f64)]) -> f64 {
    let mut v = items.to_vec();
    v.sort_by_key(|t| t.0);
    let total = v.iter().fold(0.0, |a, t| a + t.1);
    let mut acc = 0.0;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (_, w, x) in v {
        acc += (w / total) * x;
        lo = lo.min(x);
        hi = hi.max(x);
    }
    acc.clamp(lo, hi)
}

fn oracle_fedavg(models: &[(usize, f64, &ParamSet)]) -> BTreeMap<String, Vec<f64>> {
    let mut out = BTreeMap::new();
    for (name, e) in models[0].2.iter() {
        let vals = (0..e.tensor.len())
            .map(|k| {
                let items: Vec<_> = models.iter().map(|(id, w, p)| (*id, *w, p.values(name).unwrap()[k])).collect();
                oracle_mean(&items)
            })
            .collect();
        out.insert(name.to_string(), vals);
    }
    out
}

/// For global coordinate `k` of entry `name`, the sub-model coordinate a mask
/// maps it to (or `None` when uncovered), derived from unit membership.
fn sub_coordinate(global: &ModelSpec, mask: &SubModelMask, name: &str, k: usize) -> Option<usize> {
    let (layer, what) = name.split_once('.')?;
    let layer: usize = layer.parse().ok()?;
    let mut iface = 0;
    for l in &global.layers[..layer] {
        if matches!(l, Layer::Dense { .. } | Layer::OutputHead { .. }) {
            iface += 1;
        }
    }
    let hidden = mask.units.len();
    let units = |i: usize, width: usize| -> Vec<usize> {
        if i == 0 || i == hidden + 1 {
            (0..width).collect()
        } else {
            mask.units[i - 1].clone()
        }
    };
    match &global.layers[layer] {
        Layer::Dense { in_dim, out_dim } | Layer::OutputHead { dim: in_dim, num_classes: out_dim } => {
            let rows = units(iface, *in_dim);
            let cols = units(iface + 1, *out_dim);
            if what == "bias" {
                return cols.iter().position(|&c| c == k);
            }
            let (r, c) = (k / out_dim, k % out_dim);
            Some(rows.iter().position(|&x| x == r)? * cols.len() + cols.iter().position(|&x| x == c)?)
        }
        Layer::BatchNorm { dim, .. } => units(iface, *dim).iter().position(|&u| u == k),
        _ => None,
    }
}

fn oracle_partial(prev: &ParamSet, global: &ModelSpec, clients: &[(usize, f64, &ParamSet, &SubModelMask)]) -> BTreeMap<String, Vec<f64>> {
    let mut out = BTreeMap::new();
    for (name, e) in prev.iter() {
        let vals = (0..e.tensor.len())
            .map(|k| {
                let items: Vec<_> = clients
                    .iter()
                    .filter_map(|(id, w, p, m)| sub_coordinate(global, m, name, k).map(|j| (*id, *w, p.values(name).unwrap()[j])))
                    .collect();
                if items.is_empty() {
                    e.tensor.data[k]
                } else {
                    oracle_mean(&items)
                }
            })
            .collect();
        out.insert(name.to_string(), vals);
    }
    out
}

fn same_bits(p: &ParamSet, oracle: &BTreeMap<String, Vec<f64>>) -> bool {
    p.len() == oracle.len()
        && p.iter().all(|(name, e)| {
            oracle
                .get(name)
                .is_some_and(|o| o.len() == e.tensor.data.len() && o.iter().zip(&e.tensor.data).all(|(a, b)| a.to_bits() == b.to_bits()))
        })
}

fn random_params(spec: &ModelSpec, rng: &mut impl Rng) -> ParamSet {
    let mut p = spec.template_params();
    p.for_each_mut(|_, _, v| v.iter_mut().for_each(|x| *x = rng.random_range(-3.0..3.0)));
    p
}

/// One randomized 3-client, width-4 instance of every aggregation rule.
/// Returns failure descriptions (empty on success).
pub fn aggregation_instance(seed: u64) -> Result<Vec<String>> {
    let mut rng = stream(seed, "aggregation-oracle", &[]);
    let global = build_classifier(3, &[4, 4], 3);
    let prev = random_params(&global, &mut rng);
    let ids: Vec<usize> = {
        let mut v: Vec<usize> = (0..10).collect();
        rand::seq::SliceRandom::shuffle(v.as_mut_slice(), &mut rng);
        v.truncate(3);
        v
    };
    let weights: Vec<f64> = (0..3)
        .map(|_| if rng.random_bool(0.5) { rng.random_range(1..500) as f64 } else { rng.random_range(0.01..10.0) })
        .collect();
    let mut failures = Vec::new();

    // FedAvg over full models.
    let full: Vec<ParamSet> = (0..3).map(|_| random_params(&global, &mut rng)).collect();
    let c: Vec<Contribution<'_>> = (0..3)
        .map(|i| Contribution {
            id: ids[i],
            weight: weights[i],
            params: &full[i],
        })
        .collect();
    let orc: Vec<_> = (0..3).map(|i| (ids[i], weights[i], &full[i])).collect();
    if !same_bits(&fedavg_aggregate(&c)?, &oracle_fedavg(&orc)) {
        failures.push(format!("fedavg seed {seed}"));
    }

    // Partial training with random ratios, schemes and rounds.
    let ratios = [0.25, 0.5, 0.75, 1.0];
    let mut masks = Vec::new();
    let mut subs = Vec::new();
    for _ in 0..3 {
        let r = ratios[rng.random_range(0..ratios.len())];
        let scheme = if rng.random_bool(0.5) { MaskScheme::Static } else { MaskScheme::Rolling };
        let m = submodel_mask(&global, r, scheme, rng.random_range(0..9))?;
        let (spec, _) = extract_submodel(&prev, &global, &m)?;
        subs.push((spec.clone(), random_params(&spec, &mut rng)));
        masks.push(m);
    }
    let mc: Vec<MaskedContribution<'_>> = (0..3)
        .map(|i| MaskedContribution {
            id: ids[i],
            weight: weights[i],
            params: &subs[i].1,
            mask: &masks[i],
        })
        .collect();
    let orc: Vec<_> = (0..3).map(|i| (ids[i], weights[i], &subs[i].1, &masks[i])).collect();
    let agg = partial_aggregate(&prev, &global, &mc)?;
    if !same_bits(&agg, &oracle_partial(&prev, &global, &orc)) {
        failures.push(format!("partial seed {seed}"));
    }
    for (name, e) in prev.iter() {
        for k in 0..e.tensor.len() {
            let covered = masks.iter().any(|m| sub_coordinate(&global, m, name, k).is_some());
            if !covered && agg.values(name)?[k].to_bits() != e.tensor.data[k].to_bits() {
                failures.push(format!("partial seed {seed}: uncovered {name}[{k}] changed"));
            }
        }
    }

    // Grouped: clients sharing a sub-model spec are averaged together.
    let gc: Vec<SpecContribution<'_>> = (0..3)
        .map(|i| SpecContribution {
            id: ids[i],
            weight: weights[i],
            params: &subs[i].1,
            spec: &subs[i].0,
        })
        .collect();
    let groups = grouped_aggregate(&gc)?;
    let mut seen = 0;
    for (spec, members, params) in &groups {
        let orc: Vec<_> = (0..3)
            .filter(|&i| subs[i].0.layers == spec.layers)
            .map(|i| (ids[i], weights[i], &subs[i].1))
            .collect();
        let mut expect: Vec<usize> = orc.iter().map(|o| o.0).collect();
        expect.sort_unstable();
        seen += members.len();
        if *members != expect || !same_bits(params, &oracle_fedavg(&orc)) {
            failures.push(format!("grouped seed {seed}"));
        }
    }
    if seen != 3 {
        failures.push(format!("grouped seed {seed}: {seen} members in groups"));
    }

    // Class-wise experts weighted by per-class counts; some counts zero.
    let nc = 3;
    let hists: Vec<Vec<usize>> = (0..3)
        .map(|_| (0..nc).map(|_| if rng.random_bool(0.3) { 0 } else { rng.random_range(1..200) }).collect())
        .collect();
    let cc: Vec<ClassContribution<'_>> = (0..3)
        .map(|i| ClassContribution {
            id: ids[i],
            params: &full[i],
            histogram: &hists[i],
        })
        .collect();
    let experts = classwise_aggregate(&prev, &cc, nc)?;
    for c in 0..nc {
        let orc: Vec<_> = (0..3)
            .filter(|&i| hists[i][c] > 0)
            .map(|i| (ids[i], hists[i][c] as f64, &full[i]))
            .collect();
        let ok = if orc.is_empty() {
            experts[c] == prev
        } else {
            same_bits(&experts[c], &oracle_fedavg(&orc))
        };
        if !ok {
            failures.push(format!("classwise seed {seed} class {c}"));
        }
    }
    Ok(failures)
}

pub fn aggregation_suite(seed: u64, trials: u64) -> Result<Vec<Check>> {
    let mut failures = Vec::new();
    for t in 0..trials {
        failures.extend(aggregation_instance(seed.wrapping_add(t))?);
    }
    Ok(vec![check(
        "fedavg+partial+grouped+classwise vs per-coordinate oracle",
        failures.is_empty(),
        json!({"trials": trials, "failures": failures}),
    )])
}

// ------------------------------------------------------------------ theorem

pub fn theorem_suite(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let r = verify_variance_theorem(&NoiseModel::unbiased(vec![1.0, 4.0]), 2, 1_000_000, seed)?;
    let within = |mc: f64, closed: f64, tol: f64| ((mc - closed) / closed).abs() <= tol;
    let ok = r.pass
        && r.var_ve_closed == 1.25
        && (r.var_me_closed - 0.8).abs() < 1e-15
        && within(r.var_ve, 1.25, 0.05)
        && within(r.var_me, 0.8, 0.05);
    out.push(check("variance sigma2=(1,4) k=2", ok, serde_json::to_value(&r)?));

    let r = verify_variance_theorem(&NoiseModel::unbiased(vec![2.0; 3]), 3, 1_000_000, seed)?;
    let ok = r.pass && within(r.var_me, r.var_ve, 0.01) && (r.var_me_closed - r.var_ve_closed).abs() < 1e-15;
    out.push(check("variance equality case", ok, serde_json::to_value(&r)?));

    let r = verify_variance_theorem(&NoiseModel::unbiased(vec![3.0]), 1, 100_000, seed)?;
    let ok = r.pass && r.var_ve_closed == 3.0 && r.var_me_closed == 3.0;
    out.push(check("variance single expert", ok, serde_json::to_value(&r)?));

    let hand = NoiseModel {
        variances: vec![1.0, 1.0],
        biases: vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
        f_star: 0.0,
    };
    let r = verify_bias_bound(&hand, &[0.5, 0.5], 1000, seed)?;
    let ok = r.pass && r.weighted_bias == 0.0 && r.max_bias == 1.0 && r.violations == 0;
    out.push(check("bias bound", ok, serde_json::to_value(&r)?));

    let mut rng = stream(seed, "harmonic-grid", &[]);
    let mut bad = 0;
    for _ in 0..1000 {
        let k = rng.random_range(1..=6);
        let v: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..50.0)).collect();
        let a = inverse_variance_weights(&v);
        let me: f64 = a.iter().zip(&v).map(|(a, v)| a * a * v).sum();
        let ve = v.iter().sum::<f64>() / (k * k) as f64;
        if me > ve * (1.0 + 1e-12) {
            bad += 1;
        }
    }
    out.push(check("inverse-variance weights never worse", bad == 0, json!({"violations": bad})));
    Ok(out)
}

// ------------------------------------------------------------------- losses

pub fn losses_suite() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let c = 5usize;
    let ln_c = (c as f64).ln();

    let uniform = Matrix::zeros(4, c);
    let confident = Matrix::from_vec(4, c, (0..4 * c).map(|i| if i % c == 0 { 1000.0 } else { 0.0 }).collect())?;
    let spread = Matrix::from_vec(c, c, (0..c * c).map(|i| if i / c == i % c { 1000.0 } else { 0.0 }).collect())?;

    let (e_conf, _) = entropy_from_logits(&confident);
    let (e_unif, _) = entropy_from_logits(&uniform);
    out.push(check(
        "entropy boundary cases",
        e_conf.abs() <= 1e-10 && (e_unif - ln_c).abs() <= 1e-10,
        json!({"confident": e_conf, "uniform": e_unif, "ln_c": ln_c}),
    ));

    let (d_same, _) = diversity_from_logits(&confident);
    let (d_spread, _) = diversity_from_logits(&spread);
    let (d_unif, _) = diversity_from_logits(&uniform);
    out.push(check(
        "diversity boundary cases",
        d_same.abs() <= 1e-10 && (d_spread - ln_c).abs() <= 1e-10 && (d_unif - ln_c).abs() <= 1e-10,
        json!({"one_class": d_same, "all_classes": d_spread, "uniform": d_unif}),
    ));

    let (ce_unif, _) = cross_entropy(&uniform, &[0, 1, 2, 3])?;
    out.push(check("cross entropy of uniform logits", (ce_unif - ln_c).abs() <= 1e-12, json!({"value": ce_unif})));

    let p = Matrix::from_rows(&[vec![0.3, -1.2, 2.0, 0.0, 0.7], vec![5.0, 5.0, -3.0, 1.0, 0.0]])?;
    let (kl_self, g_self) = kl_divergence(&p, &p)?;
    let g_max = g_self.as_slice().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    out.push(check(
        "kl(p||p) = 0",
        kl_self.abs() <= 1e-12 && g_max <= 1e-12,
        json!({"value": kl_self, "max_grad": g_max}),
    ));

    let s = Matrix::from_rows(&[vec![0.1, 0.2, -0.4, 1.0, 0.0], vec![-2.0, 0.5, 0.5, 0.0, 1.5]])?;
    let (kl, gkl) = kl_divergence_t(&s, &p, 1.0)?;
    let hard = p.argmax_rows();
    let (ce, gce) = cross_entropy(&s, &hard)?;
    let (only_soft, g_soft) = kd_loss(&s, &p, 1.0, 0.0, 1.0)?;
    let (only_hard, g_hard) = kd_loss(&s, &p, 0.0, 1.0, 1.0)?;
    let (mixed, g_mixed) = kd_loss(&s, &p, 0.8, 0.2, 1.0)?;
    let mut g_expect = gkl.scale(0.8);
    g_expect.add_scaled(&gce, 0.2);
    let ok = only_soft == kl
        && only_hard == ce
        && mixed == 0.8 * kl + 0.2 * ce
        && g_soft == gkl
        && g_hard == gce
        && g_mixed == g_expect;
    out.push(check(
        "kd_loss decomposition",
        ok,
        json!({"kl": kl, "ce": ce, "kd": mixed}),
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_parse() {
        assert_eq!(Suite::parse_list("all").unwrap().len(), 4);
        assert_eq!(Suite::parse_list("theorem").unwrap(), vec![Suite::Theorem]);
        assert!(Suite::parse_list("nope").is_err());
    }

    #[test]
    fn losses_suite_passes() {
        let r = run_suite(Suite::Losses, 0).unwrap();
        assert!(r.pass, "{:#?}", r.checks);
    }

    #[test]
    fn aggregation_instances_pass() {
        for s in 0..5 {
            assert!(aggregation_instance(s).unwrap().is_empty());
        }
    }
}
