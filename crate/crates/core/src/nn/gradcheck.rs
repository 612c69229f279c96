//! Central finite-difference checks of [`backward_full`] against [`forward_from`].

use serde::Serialize;

use super::graph::{backward_full, forward_from, Batch, ForwardPass, Mode, Upstream};
use super::params::ParamSet;
use super::spec::ModelSpec;
use crate::error::Result;
use crate::matrix::Matrix;
use crate::rng::stream;

/// Scalar objective over a forward pass; returns the loss and its gradient
/// with respect to the pass outputs.
pub type LossFn<'a> = dyn Fn(&ForwardPass, &Batch) -> Result<(f64, Upstream)> + 'a;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub batch_size: usize,
    pub mode: Mode,
    pub check_inputs: bool,
    /// Multiplier applied to the analytic gradient (sensitivity testing).
    pub analytic_scale: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            batch_size: 4,
            mode: Mode::Train,
            check_inputs: true,
            analytic_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
    pub tolerance: f64,
    pub pass: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Seeded parameters and a seeded standard-normal batch; labels cycle over classes.
pub fn gradcheck(spec: &ModelSpec, loss: &LossFn<'_>, seed: u64, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = stream(seed, "gradcheck", &[]);
    let params = spec.init_params(&mut rng);
    let inputs = Matrix::random_normal(opts.batch_size, spec.input_dim(), &mut rng);
    let classes = spec.output_dim();
    let labels = (0..opts.batch_size).map(|i| (i * 3 + 1) % classes).collect();
    let batch = Batch::new(inputs, Some(labels))?;
    gradcheck_at(&params, spec, &batch, loss, opts)
}

pub fn gradcheck_at(
    params: &ParamSet,
    spec: &ModelSpec,
    batch: &Batch,
    loss: &LossFn<'_>,
    opts: GradcheckOptions,
) -> Result<GradcheckReport> {
    let eval = |p: &ParamSet, b: &Batch| -> Result<f64> {
        let fp = forward_from(p, spec, &b.inputs, 0, opts.mode)?;
        Ok(loss(&fp, b)?.0)
    };

    let fp = forward_from(params, spec, &batch.inputs, 0, opts.mode)?;
    let (_, upstream) = loss(&fp, batch)?;
    let (grads, input_grad) = backward_full(params, &fp.cache, &upstream)?;

    let h = opts.step;
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    let mut work = params.clone();
    for (name, g) in grads.iter() {
        for k in 0..g.data.len() {
            let orig = work.values(name)?[k];
            work.values_mut(name)?[k] = orig + h;
            let up = eval(&work, batch)?;
            work.values_mut(name)?[k] = orig - h;
            let down = eval(&work, batch)?;
            work.values_mut(name)?[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let e = relative_error(g.data[k] * opts.analytic_scale, numeric, opts.floor);
            checked += 1;
            if e > worst.0 || worst.1.is_empty() {
                worst = (e, format!("{name}[{k}]"));
            }
        }
    }
    if opts.check_inputs {
        let mut b = batch.clone();
        for r in 0..b.inputs.rows() {
            for c in 0..b.inputs.cols() {
                let orig = b.inputs.get(r, c);
                b.inputs.set(r, c, orig + h);
                let up = eval(params, &b)?;
                b.inputs.set(r, c, orig - h);
                let down = eval(params, &b)?;
                b.inputs.set(r, c, orig);
                let numeric = (up - down) / (2.0 * h);
                let e = relative_error(input_grad.get(r, c) * opts.analytic_scale, numeric, opts.floor);
                checked += 1;
                if e > worst.0 {
                    worst = (e, format!("input[{r},{c}]"));
                }
            }
        }
    }
    Ok(GradcheckReport {
        max_rel_error: worst.0,
        worst: worst.1,
        checked,
        tolerance: opts.tolerance,
        pass: worst.0 <= opts.tolerance,
    })
}

/// Finite-difference check of a scalar function of a matrix whose analytic
/// gradient is returned alongside its value.
pub fn gradcheck_fn(f: &dyn Fn(&Matrix) -> Result<(f64, Matrix)>, x: &Matrix, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let (_, g) = f(x)?;
    let h = opts.step;
    let mut work = x.clone();
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            let orig = work.get(r, c);
            work.set(r, c, orig + h);
            let up = f(&work)?.0;
            work.set(r, c, orig - h);
            let down = f(&work)?.0;
            work.set(r, c, orig);
            let e = relative_error(g.get(r, c) * opts.analytic_scale, (up - down) / (2.0 * h), opts.floor);
            checked += 1;
            if e > worst.0 || worst.1.is_empty() {
                worst = (e, format!("x[{r},{c}]"));
            }
        }
    }
    Ok(GradcheckReport {
        max_rel_error: worst.0,
        worst: worst.1,
        checked,
        tolerance: opts.tolerance,
        pass: worst.0 <= opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::loss::cross_entropy;
    use crate::nn::spec::Layer;

    fn ce(fp: &ForwardPass, b: &Batch) -> Result<(f64, Upstream)> {
        let (l, g) = cross_entropy(&fp.logits, b.labels.as_deref().unwrap())?;
        Ok((l, Upstream::output(g)))
    }

    fn half_sum_squares(fp: &ForwardPass, _b: &Batch) -> Result<(f64, Upstream)> {
        let l = 0.5 * fp.logits.as_slice().iter().map(|v| v * v).sum::<f64>();
        Ok((l, Upstream::output(fp.logits.clone())))
    }

    #[test]
    fn linear_model_quadratic_loss_is_exact() {
        let spec = ModelSpec::new(vec![Layer::OutputHead { dim: 3, num_classes: 2 }]).unwrap();
        let r = gradcheck(&spec, &half_sum_squares, 0, GradcheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn mlp_with_batch_norm_and_cross_entropy_passes() {
        let spec = ModelSpec::mlp(4, &[5, 3], 3, true);
        let r = gradcheck(&spec, &ce, 0, GradcheckOptions::default()).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn corrupted_gradient_fails() {
        let spec = ModelSpec::mlp(4, &[5], 3, true);
        let opts = GradcheckOptions {
            analytic_scale: 1.01,
            ..Default::default()
        };
        let r = gradcheck(&spec, &ce, 0, opts).unwrap();
        assert!(!r.pass, "{r:?}");
    }
}
