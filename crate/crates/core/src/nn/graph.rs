//! Forward and backward passes over a [`ModelSpec`] layer stack.

use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamSet};
use super::spec::{param_name, Layer, ModelSpec, BN_EPS};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Inputs and optional labels for one mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != inputs.rows() {
                return Err(Error::shape(format!(
                    "{} labels for {} input rows",
                    l.len(),
                    inputs.rows()
                )));
            }
        }
        Ok(Self { inputs, labels })
    }

    pub fn unlabeled(inputs: Matrix) -> Self {
        Self {
            inputs,
            labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }
}

/// Per-feature mean and biased variance of the input to one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
enum LayerCache {
    Affine { input: Matrix },
    Norm { input: Matrix, xhat: Matrix, inv_std: Vec<f64>, mean: Vec<f64> },
    Relu { input: Matrix },
    Squash { tanh: Matrix },
}

/// Activation record of one forward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    spec: ModelSpec,
    start: usize,
    mode: Mode,
    fingerprint: (u64, u64),
    layers: Vec<LayerCache>,
}

impl Cache {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Final layer output (logits for classifiers, samples for generators).
    pub logits: Matrix,
    /// Input to the output head, when the model has one.
    pub features: Option<Matrix>,
    pub batch_stats: Vec<BnStats>,
    pub cache: Cache,
}

/// Gradient of a scalar objective with respect to the forward outputs.
#[derive(Debug, Clone, Default)]
pub struct Upstream {
    pub output: Option<Matrix>,
    pub features: Option<Matrix>,
    /// `(layer index, ∂L/∂mean, ∂L/∂var)` for batch statistics.
    pub stats: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

impl Upstream {
    pub fn output(g: Matrix) -> Self {
        Self {
            output: Some(g),
            ..Self::default()
        }
    }
}

pub fn forward(params: &ParamSet, spec: &ModelSpec, batch: &Batch, mode: Mode) -> Result<ForwardPass> {
    forward_from(params, spec, &batch.inputs, 0, mode)
}

/// Runs layers `start..` on `input`. `start = head_index()` evaluates only the
/// output head on penultimate features.
pub fn forward_from(
    params: &ParamSet,
    spec: &ModelSpec,
    input: &Matrix,
    start: usize,
    mode: Mode,
) -> Result<ForwardPass> {
    let n = input.rows();
    if n == 0 {
        return Err(Error::shape("empty batch"));
    }
    if start >= spec.layers.len() {
        return Err(Error::shape("start layer past the end of the model"));
    }
    if input.cols() != spec.layers[start].in_dim() {
        return Err(Error::shape(format!(
            "input has {} features, layer {start} expects {}",
            input.cols(),
            spec.layers[start].in_dim()
        )));
    }
    if mode == Mode::Train && n < 2 && spec.layers[start..].iter().any(|l| matches!(l, Layer::BatchNorm { .. })) {
        return Err(Error::DegenerateBatch(n));
    }

    let head = spec.head_index();
    let mut x = input.clone();
    let mut features = None;
    let mut stats = Vec::new();
    let mut caches = Vec::with_capacity(spec.layers.len() - start);

    for (i, layer) in spec.layers.iter().enumerate().skip(start) {
        if Some(i) == head {
            features = Some(x.clone());
        }
        match *layer {
            Layer::Dense { in_dim, out_dim }
            | Layer::OutputHead {
                dim: in_dim,
                num_classes: out_dim,
            } => {
                let w = Matrix::from_vec(in_dim, out_dim, params.values(&param_name(i, "weight"))?.to_vec())?;
                let b = params.values(&param_name(i, "bias"))?;
                if b.len() != out_dim {
                    return Err(Error::shape(format!("bias of layer {i} has wrong length")));
                }
                let mut y = x.matmul(&w);
                for r in 0..n {
                    for (v, bj) in y.row_mut(r).iter_mut().zip(b) {
                        *v += bj;
                    }
                }
                caches.push(LayerCache::Affine { input: x });
                x = y;
            }
            Layer::BatchNorm { dim, .. } => {
                let gain = params.values(&param_name(i, "gain"))?;
                let shift = params.values(&param_name(i, "shift"))?;
                let (mean, var) = column_moments(&x);
                let (use_mean, use_var) = match mode {
                    Mode::Train => (mean.clone(), var.clone()),
                    Mode::Eval => (
                        params.values(&param_name(i, "running_mean"))?.to_vec(),
                        params.values(&param_name(i, "running_var"))?.to_vec(),
                    ),
                };
                if gain.len() != dim || use_mean.len() != dim {
                    return Err(Error::shape(format!("batch-norm layer {i} has wrong width")));
                }
                let inv_std: Vec<f64> = use_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let mut xhat = Matrix::zeros(n, dim);
                let mut y = Matrix::zeros(n, dim);
                for r in 0..n {
                    let xr = x.row(r);
                    for j in 0..dim {
                        let h = (xr[j] - use_mean[j]) * inv_std[j];
                        xhat.set(r, j, h);
                        y.set(r, j, gain[j] * h + shift[j]);
                    }
                }
                stats.push(BnStats {
                    layer: i,
                    mean: mean.clone(),
                    var,
                });
                caches.push(LayerCache::Norm {
                    input: x,
                    xhat,
                    inv_std,
                    mean,
                });
                x = y;
            }
            Layer::Relu { .. } => {
                let y = x.map(|v| v.max(0.0));
                caches.push(LayerCache::Relu { input: x });
                x = y;
            }
            Layer::Squash { lo, hi, .. } => {
                let t = x.map(f64::tanh);
                let y = t.map(|v| lo + (hi - lo) * 0.5 * (v + 1.0));
                caches.push(LayerCache::Squash { tanh: t });
                x = y;
            }
        }
    }

    Ok(ForwardPass {
        logits: x,
        features,
        batch_stats: stats,
        cache: Cache {
            spec: spec.clone(),
            start,
            mode,
            fingerprint: params.fingerprint(),
            layers: caches,
        },
    })
}

/// Column means and biased variances.
pub fn column_moments(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows() as f64;
    let mean: Vec<f64> = x.col_sums().into_iter().map(|s| s / n).collect();
    let mut var = vec![0.0; x.cols()];
    for r in x.iter_rows() {
        for ((acc, v), m) in var.iter_mut().zip(r).zip(&mean) {
            let d = v - m;
            *acc += d * d;
        }
    }
    for v in &mut var {
        *v /= n;
    }
    (mean, var)
}

/// Gradients of the parameters for an upstream gradient on the final output.
pub fn backward(params: &ParamSet, cache: &Cache, out_grad: &Matrix) -> Result<Gradients> {
    backward_full(params, cache, &Upstream::output(out_grad.clone())).map(|(g, _)| g)
}

/// Full backward pass: parameter gradients and the gradient w.r.t. the input.
pub fn backward_full(params: &ParamSet, cache: &Cache, upstream: &Upstream) -> Result<(Gradients, Matrix)> {
    if params.fingerprint() != cache.fingerprint {
        return Err(Error::StaleCache);
    }
    let spec = &cache.spec;
    let n = match cache.layers.first() {
        Some(LayerCache::Affine { input })
        | Some(LayerCache::Norm { input, .. })
        | Some(LayerCache::Relu { input }) => input.rows(),
        Some(LayerCache::Squash { tanh }) => tanh.rows(),
        None => return Err(Error::shape("empty cache")),
    };
    let out_dim = spec.output_dim();
    let mut grad = match &upstream.output {
        Some(g) => {
            if g.shape() != (n, out_dim) {
                return Err(Error::shape(format!(
                    "output gradient is {:?}, expected {:?}",
                    g.shape(),
                    (n, out_dim)
                )));
            }
            g.clone()
        }
        None => Matrix::zeros(n, out_dim),
    };
    let head = spec.head_index();
    let mut grads = Gradients::zeros_like(params);

    for (offset, lc) in cache.layers.iter().enumerate().rev() {
        let i = cache.start + offset;
        let layer = &spec.layers[i];
        match (layer, lc) {
            (Layer::Dense { in_dim, out_dim } | Layer::OutputHead { dim: in_dim, num_classes: out_dim }, LayerCache::Affine { input }) => {
                let w = Matrix::from_vec(*in_dim, *out_dim, params.values(&param_name(i, "weight"))?.to_vec())?;
                let dw = input.t_matmul(&grad);
                let db = grad.col_sums();
                grads
                    .get_mut(&param_name(i, "weight"))
                    .ok_or_else(|| Error::structure("missing weight gradient slot"))?
                    .data
                    .copy_from_slice(dw.as_slice());
                grads
                    .get_mut(&param_name(i, "bias"))
                    .ok_or_else(|| Error::structure("missing bias gradient slot"))?
                    .data
                    .copy_from_slice(&db);
                grad = grad.matmul_t(&w);
            }
            (Layer::BatchNorm { dim, .. }, LayerCache::Norm { input, xhat, inv_std, mean }) => {
                let dim = *dim;
                let gain = params.values(&param_name(i, "gain"))?;
                let mut dgain = vec![0.0; dim];
                let mut dshift = vec![0.0; dim];
                for r in 0..n {
                    for j in 0..dim {
                        let dy = grad.get(r, j);
                        dgain[j] += dy * xhat.get(r, j);
                        dshift[j] += dy;
                    }
                }
                let nf = n as f64;
                let mut dx = Matrix::zeros(n, dim);
                match cache.mode {
                    Mode::Train => {
                        // dxhat = dy * gain; dx = inv_std/n * (n dxhat - Σdxhat - xhat Σ(dxhat xhat))
                        let mut sum_dxhat = vec![0.0; dim];
                        let mut sum_dxhat_xhat = vec![0.0; dim];
                        for r in 0..n {
                            for j in 0..dim {
                                let d = grad.get(r, j) * gain[j];
                                sum_dxhat[j] += d;
                                sum_dxhat_xhat[j] += d * xhat.get(r, j);
                            }
                        }
                        for r in 0..n {
                            for j in 0..dim {
                                let d = grad.get(r, j) * gain[j];
                                let v = inv_std[j] / nf
                                    * (nf * d - sum_dxhat[j] - xhat.get(r, j) * sum_dxhat_xhat[j]);
                                dx.set(r, j, v);
                            }
                        }
                    }
                    Mode::Eval => {
                        for r in 0..n {
                            for j in 0..dim {
                                dx.set(r, j, grad.get(r, j) * gain[j] * inv_std[j]);
                            }
                        }
                    }
                }
                for (layer_idx, gmean, gvar) in &upstream.stats {
                    if *layer_idx != i {
                        continue;
                    }
                    if gmean.len() != dim || gvar.len() != dim {
                        return Err(Error::shape("batch-statistic gradient width"));
                    }
                    for r in 0..n {
                        let xr = input.row(r);
                        for j in 0..dim {
                            let extra = gmean[j] / nf + gvar[j] * 2.0 * (xr[j] - mean[j]) / nf;
                            dx.set(r, j, dx.get(r, j) + extra);
                        }
                    }
                }
                grads
                    .get_mut(&param_name(i, "gain"))
                    .ok_or_else(|| Error::structure("missing gain gradient slot"))?
                    .data
                    .copy_from_slice(&dgain);
                grads
                    .get_mut(&param_name(i, "shift"))
                    .ok_or_else(|| Error::structure("missing shift gradient slot"))?
                    .data
                    .copy_from_slice(&dshift);
                grad = dx;
            }
            (Layer::Relu { .. }, LayerCache::Relu { input }) => {
                for (g, x) in grad.as_mut_slice().iter_mut().zip(input.as_slice()) {
                    if *x <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            (Layer::Squash { lo, hi, .. }, LayerCache::Squash { tanh }) => {
                let half = 0.5 * (hi - lo);
                for (g, t) in grad.as_mut_slice().iter_mut().zip(tanh.as_slice()) {
                    *g *= half * (1.0 - t * t);
                }
            }
            _ => return Err(Error::structure(format!("cache does not match layer {i}"))),
        }
        // Gradient on the penultimate features enters right before the head.
        if Some(i) == head {
            if let Some(fg) = &upstream.features {
                if fg.shape() != grad.shape() {
                    return Err(Error::shape("feature gradient shape"));
                }
                grad.add_assign(fg);
            }
        }
    }
    Ok((grads, grad))
}

/// Folds train-mode batch statistics into the running estimates:
/// `running' = (1 - m)·running + m·batch`.
pub fn commit_running_stats(params: &mut ParamSet, spec: &ModelSpec, stats: &[BnStats]) -> Result<()> {
    for s in stats {
        let momentum = match spec.layers.get(s.layer) {
            Some(Layer::BatchNorm { momentum, .. }) => *momentum,
            _ => return Err(Error::structure(format!("layer {} is not batch norm", s.layer))),
        };
        let rm = params.values_mut(&param_name(s.layer, "running_mean"))?;
        for (r, b) in rm.iter_mut().zip(&s.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        let rv = params.values_mut(&param_name(s.layer, "running_var"))?;
        for (r, b) in rv.iter_mut().zip(&s.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
    Ok(())
}

/// Eval-mode logits for a whole input matrix.
pub fn predict(params: &ParamSet, spec: &ModelSpec, inputs: &Matrix) -> Result<Matrix> {
    forward_from(params, spec, inputs, 0, Mode::Eval).map(|f| f.logits)
}

/// Eval-mode penultimate features.
pub fn features(params: &ParamSet, spec: &ModelSpec, inputs: &Matrix) -> Result<Matrix> {
    forward_from(params, spec, inputs, 0, Mode::Eval)?
        .features
        .ok_or_else(|| Error::structure("model has no output head"))
}

/// Applies only the output head to penultimate features.
pub fn head_logits(params: &ParamSet, spec: &ModelSpec, features: &Matrix) -> Result<Matrix> {
    let h = spec
        .head_index()
        .ok_or_else(|| Error::structure("model has no output head"))?;
    forward_from(params, spec, features, h, Mode::Eval).map(|f| f.logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{Role, Tensor};
    use crate::rng::stream;

    fn identity_dense(d: usize) -> (ModelSpec, ParamSet) {
        let spec = ModelSpec::new(vec![Layer::OutputHead { dim: d, num_classes: d }]).unwrap();
        let mut p = ParamSet::new();
        p.insert("0.weight", Role::Weight, Tensor::new(vec![d, d], Matrix::identity(d).into_vec()).unwrap());
        p.insert("0.bias", Role::Bias, Tensor::zeros(vec![d]));
        (spec, p)
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let (spec, p) = identity_dense(3);
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 0.5], vec![3.0, 0.0, 4.0]]).unwrap();
        let out = forward(&p, &spec, &Batch::unlabeled(x.clone()), Mode::Eval).unwrap();
        assert_eq!(out.logits, x);
    }

    #[test]
    fn eval_bn_with_matching_running_stats_standardizes() {
        let spec = ModelSpec::new(vec![Layer::BatchNorm { dim: 2, momentum: 0.1 }]).unwrap();
        let mut rng = stream(0, "bn", &[]);
        let mut p = spec.init_params(&mut rng);
        let x = Matrix::random_normal(50, 2, &mut rng).map(|v| 3.0 * v + 1.0);
        let (m, v) = column_moments(&x);
        p.values_mut("0.running_mean").unwrap().copy_from_slice(&m);
        p.values_mut("0.running_var").unwrap().copy_from_slice(&v);
        let y = forward(&p, &spec, &Batch::unlabeled(x), Mode::Eval).unwrap().logits;
        let (ym, yv) = column_moments(&y);
        for j in 0..2 {
            assert!(ym[j].abs() < 1e-12);
            assert!((yv[j] - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn train_mode_rejects_single_row_batches() {
        let spec = ModelSpec::mlp(3, &[4], 2, true);
        let p = spec.init_params(&mut stream(0, "x", &[]));
        let x = Matrix::zeros(1, 3);
        let err = forward(&p, &spec, &Batch::unlabeled(x.clone()), Mode::Train).unwrap_err();
        assert!(matches!(err, Error::DegenerateBatch(1)));
        assert!(forward(&p, &spec, &Batch::unlabeled(x), Mode::Eval).is_ok());
    }

    #[test]
    fn dimension_mismatch_is_a_shape_error() {
        let spec = ModelSpec::mlp(3, &[4], 2, false);
        let p = spec.init_params(&mut stream(0, "x", &[]));
        let err = forward(&p, &spec, &Batch::unlabeled(Matrix::zeros(2, 5)), Mode::Eval).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn running_stats_follow_momentum_rule_exactly() {
        let spec = ModelSpec::mlp(3, &[4], 2, true);
        let mut rng = stream(1, "bn", &[]);
        let mut p = spec.init_params(&mut rng);
        p.values_mut("1.running_mean").unwrap().copy_from_slice(&[0.3, -0.2, 0.1, 0.7]);
        let before = p.values("1.running_mean").unwrap().to_vec();
        let x = Matrix::random_normal(6, 3, &mut rng);
        let out = forward(&p, &spec, &Batch::unlabeled(x), Mode::Train).unwrap();
        commit_running_stats(&mut p, &spec, &out.batch_stats).unwrap();
        let after = p.values("1.running_mean").unwrap();
        for j in 0..4 {
            assert_eq!(after[j], (1.0 - 0.1) * before[j] + 0.1 * out.batch_stats[0].mean[j]);
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let spec = ModelSpec::mlp(3, &[4], 2, true);
        let mut rng = stream(2, "x", &[]);
        let mut p = spec.init_params(&mut rng);
        let x = Matrix::random_normal(4, 3, &mut rng);
        let out = forward(&p, &spec, &Batch::unlabeled(x), Mode::Train).unwrap();
        p.values_mut("0.weight").unwrap()[0] += 1.0;
        let err = backward(&p, &out.cache, &Matrix::zeros(4, 2)).unwrap_err();
        assert!(matches!(err, Error::StaleCache));
    }

    #[test]
    fn backward_is_linear_in_the_output_gradient() {
        let spec = ModelSpec::mlp(3, &[5], 4, true);
        let mut rng = stream(3, "x", &[]);
        let p = spec.init_params(&mut rng);
        let x = Matrix::random_normal(6, 3, &mut rng);
        let out = forward(&p, &spec, &Batch::unlabeled(x), Mode::Train).unwrap();
        let g = Matrix::random_normal(6, 4, &mut rng);
        let g1 = backward(&p, &out.cache, &g).unwrap();
        let g2 = backward(&p, &out.cache, &g.scale(2.0)).unwrap();
        for (a, b) in g1.flat().iter().zip(g2.flat()) {
            assert_eq!(2.0 * a, b);
        }
    }

    #[test]
    fn parameters_outside_the_loss_get_zero_gradient() {
        // Loss reads only logit 0, so head column 1 weights and bias get nothing.
        let spec = ModelSpec::mlp(3, &[4], 2, false);
        let mut rng = stream(4, "x", &[]);
        let p = spec.init_params(&mut rng);
        let x = Matrix::random_normal(5, 3, &mut rng);
        let out = forward(&p, &spec, &Batch::unlabeled(x), Mode::Train).unwrap();
        let mut g = Matrix::zeros(5, 2);
        for r in 0..5 {
            g.set(r, 0, 1.0);
        }
        let grads = backward(&p, &out.cache, &g).unwrap();
        let w = grads.get("2.weight").unwrap();
        for k in 0..4 {
            assert_eq!(w.data[k * 2 + 1], 0.0);
        }
        assert_eq!(grads.get("2.bias").unwrap().data[1], 0.0);
    }
}
