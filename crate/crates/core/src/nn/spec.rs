use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamSet, Role, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Dense { in_dim: usize, out_dim: usize },
    BatchNorm { dim: usize, momentum: f64 },
    Relu { dim: usize },
    /// `lo + (hi - lo) * (tanh(x) + 1) / 2`, no parameters.
    Squash { dim: usize, lo: f64, hi: f64 },
    OutputHead { dim: usize, num_classes: usize },
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        match *self {
            Layer::Dense { in_dim, .. } => in_dim,
            Layer::BatchNorm { dim, .. }
            | Layer::Relu { dim }
            | Layer::Squash { dim, .. }
            | Layer::OutputHead { dim, .. } => dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        match *self {
            Layer::Dense { out_dim, .. } => out_dim,
            Layer::OutputHead { num_classes, .. } => num_classes,
            Layer::BatchNorm { dim, .. } | Layer::Relu { dim } | Layer::Squash { dim, .. } => dim,
        }
    }

    fn changes_dim(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::OutputHead { .. })
    }
}

/// Layer stack of one model plus the width ratio it was scaled by.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<Layer>,
    pub width_ratio: f64,
}

/// `⌈ratio·width⌉`, never below 1.
pub fn scaled_width(width: usize, ratio: f64) -> usize {
    ((ratio * width as f64).ceil() as usize).clamp(1, width.max(1))
}

impl ModelSpec {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let spec = Self {
            layers,
            width_ratio: 1.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `d → hidden… → C` with optional batch norm after every hidden dense layer.
    pub fn mlp(input_dim: usize, hidden: &[usize], num_classes: usize, batch_norm: bool) -> Self {
        let mut layers = Vec::new();
        let mut prev = input_dim;
        for &h in hidden {
            layers.push(Layer::Dense {
                in_dim: prev,
                out_dim: h,
            });
            if batch_norm {
                layers.push(Layer::BatchNorm {
                    dim: h,
                    momentum: DEFAULT_BN_MOMENTUM,
                });
            }
            layers.push(Layer::Relu { dim: h });
            prev = h;
        }
        layers.push(Layer::OutputHead {
            dim: prev,
            num_classes,
        });
        Self {
            layers,
            width_ratio: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::shape("model has no layers"));
        }
        if !(self.width_ratio > 0.0 && self.width_ratio <= 1.0) {
            return Err(Error::shape(format!(
                "width ratio {} outside (0, 1]",
                self.width_ratio
            )));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        for l in &self.layers {
            if l.in_dim() == 0 || l.out_dim() == 0 {
                return Err(Error::shape("zero-width layer"));
            }
            if let Layer::BatchNorm { momentum, .. } = l {
                if !(0.0..=1.0).contains(momentum) {
                    return Err(Error::shape("batch-norm momentum outside [0, 1]"));
                }
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Widths between dimension-changing layers: `[input, hidden…, output]`.
    pub fn interface_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        for l in &self.layers {
            if l.changes_dim() {
                dims.push(l.out_dim());
            }
        }
        dims
    }

    /// Number of hidden interfaces (those subject to width scaling and masking).
    pub fn hidden_count(&self) -> usize {
        self.interface_dims().len().saturating_sub(2)
    }

    /// Interface index read by each layer (input side).
    pub(crate) fn layer_interfaces(&self) -> Vec<usize> {
        let mut idx = 0;
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            out.push(idx);
            if l.changes_dim() {
                idx += 1;
            }
        }
        out
    }

    /// Same architecture with every hidden width set to `⌈ratio·w⌉`.
    pub fn with_width(&self, ratio: f64) -> Result<Self> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::shape(format!("width ratio {ratio} outside (0, 1]")));
        }
        let dims = self.interface_dims();
        let last = dims.len() - 1;
        let new_dims: Vec<usize> = dims
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                if i == 0 || i == last {
                    w
                } else {
                    scaled_width(w, ratio)
                }
            })
            .collect();
        self.with_interface_dims(&new_dims, ratio)
    }

    pub(crate) fn with_interface_dims(&self, dims: &[usize], ratio: f64) -> Result<Self> {
        let ifaces = self.layer_interfaces();
        let layers = self
            .layers
            .iter()
            .zip(&ifaces)
            .map(|(l, &i)| match *l {
                Layer::Dense { .. } => Layer::Dense {
                    in_dim: dims[i],
                    out_dim: dims[i + 1],
                },
                Layer::BatchNorm { momentum, .. } => Layer::BatchNorm {
                    dim: dims[i],
                    momentum,
                },
                Layer::Relu { .. } => Layer::Relu { dim: dims[i] },
                Layer::Squash { lo, hi, .. } => Layer::Squash {
                    dim: dims[i],
                    lo,
                    hi,
                },
                Layer::OutputHead { .. } => Layer::OutputHead {
                    dim: dims[i],
                    num_classes: dims[i + 1],
                },
            })
            .collect();
        let spec = Self {
            layers,
            width_ratio: ratio,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Index of the output head, if any.
    pub fn head_index(&self) -> Option<usize> {
        self.layers
            .iter()
            .rposition(|l| matches!(l, Layer::OutputHead { .. }))
    }

    /// Width of the penultimate feature vector (the head's input).
    pub fn feature_dim(&self) -> Option<usize> {
        self.head_index().map(|i| self.layers[i].in_dim())
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, Layer::BatchNorm { .. }))
    }

    /// Fresh parameters: He-uniform dense weights, zero biases, unit BN gain,
    /// zero running mean and unit running variance.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let mut p = ParamSet::new();
        for (i, l) in self.layers.iter().enumerate() {
            match *l {
                Layer::Dense { in_dim, out_dim }
                | Layer::OutputHead {
                    dim: in_dim,
                    num_classes: out_dim,
                } => {
                    let limit = (6.0 / in_dim as f64).sqrt();
                    let w = (0..in_dim * out_dim)
                        .map(|_| rng.random_range(-limit..limit))
                        .collect();
                    p.insert(
                        param_name(i, "weight"),
                        Role::Weight,
                        Tensor {
                            shape: vec![in_dim, out_dim],
                            data: w,
                        },
                    );
                    p.insert(param_name(i, "bias"), Role::Bias, Tensor::zeros(vec![out_dim]));
                }
                Layer::BatchNorm { dim, .. } => {
                    p.insert(
                        param_name(i, "gain"),
                        Role::BnGain,
                        Tensor {
                            shape: vec![dim],
                            data: vec![1.0; dim],
                        },
                    );
                    p.insert(param_name(i, "shift"), Role::BnShift, Tensor::zeros(vec![dim]));
                    p.insert(
                        param_name(i, "running_mean"),
                        Role::BnRunningMean,
                        Tensor::zeros(vec![dim]),
                    );
                    p.insert(
                        param_name(i, "running_var"),
                        Role::BnRunningVar,
                        Tensor {
                            shape: vec![dim],
                            data: vec![1.0; dim],
                        },
                    );
                }
                Layer::Relu { .. } | Layer::Squash { .. } => {}
            }
        }
        p
    }

    /// Parameters with the right names and shapes but arbitrary values.
    pub fn template_params(&self) -> ParamSet {
        self.init_params(&mut NullRng)
    }

    /// Checks that `params` has exactly the entries this spec needs.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        let template = self.template_params();
        if !template.same_structure(params) {
            return Err(Error::structure(
                "parameter names, roles or shapes do not match the model spec",
            ));
        }
        Ok(())
    }
}

pub fn param_name(layer: usize, what: &str) -> String {
    format!("{layer}.{what}")
}

/// Deterministic zero source used only to materialize parameter shapes.
struct NullRng;

impl rand::RngCore for NullRng {
    fn next_u32(&mut self) -> u32 {
        0
    }
    fn next_u64(&mut self) -> u64 {
        0
    }
    fn fill_bytes(&mut self, dst: &mut [u8]) {
        dst.fill(0);
    }
}
