//! Model builders and width-heterogeneity masks.

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::spec::{param_name, scaled_width, DEFAULT_BN_MOMENTUM};
use crate::nn::{Layer, ModelSpec, ParamSet, Role};

/// `R_i = (1/2)^min(σ, ⌊ρ·i/N⌋)` for `i = 1..=N`.
pub fn width_budget(num_clients: usize, sigma: u32, rho: u32) -> Vec<f64> {
    (1..=num_clients)
        .map(|i| {
            let step = (rho as usize * i) / num_clients;
            0.5f64.powi(step.min(sigma as usize) as i32)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskScheme {
    Static,
    Rolling,
}

/// Selected unit indices of every hidden interface of a global model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubModelMask {
    pub units: Vec<Vec<usize>>,
    pub scheme: MaskScheme,
    pub round: usize,
    pub ratio: f64,
}

impl SubModelMask {
    pub fn is_full(&self, global: &ModelSpec) -> bool {
        let dims = global.interface_dims();
        self.units.iter().zip(&dims[1..]).all(|(u, &w)| u.len() == w)
    }
}

pub fn window(width: usize, ratio: f64, scheme: MaskScheme, round: usize) -> Vec<usize> {
    let k = scaled_width(width, ratio);
    if (ratio * width as f64).ceil() < 1.0 {
        log::warn!("width {width} at ratio {ratio} rounds to zero units; keeping one");
    }
    match scheme {
        MaskScheme::Static => (0..k).collect(),
        MaskScheme::Rolling => {
            let start = round % width;
            let mut v: Vec<usize> = (0..k).map(|j| (start + j) % width).collect();
            v.sort_unstable();
            v
        }
    }
}

pub fn submodel_mask(global: &ModelSpec, ratio: f64, scheme: MaskScheme, round: usize) -> Result<SubModelMask> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::config(format!("width ratio {ratio} outside (0, 1]")));
    }
    let dims = global.interface_dims();
    let units = dims[1..dims.len() - 1]
        .iter()
        .map(|&w| window(w, ratio, scheme, round))
        .collect();
    Ok(SubModelMask {
        units,
        scheme,
        round,
        ratio,
    })
}

/// Spec of the sub-model a mask selects.
pub fn submodel_spec(global: &ModelSpec, mask: &SubModelMask) -> Result<ModelSpec> {
    let dims = global.interface_dims();
    if mask.units.len() + 2 != dims.len() {
        return Err(Error::structure(format!(
            "mask has {} hidden layers, model has {}",
            mask.units.len(),
            dims.len() - 2
        )));
    }
    for (u, &w) in mask.units.iter().zip(&dims[1..]) {
        if u.is_empty() || u.windows(2).any(|p| p[0] >= p[1]) || u.last().is_some_and(|&m| m >= w) {
            return Err(Error::structure("mask indices must be sorted, unique and within the layer width"));
        }
    }
    let mut sub = dims.clone();
    for (i, u) in mask.units.iter().enumerate() {
        sub[i + 1] = u.len();
    }
    global.with_interface_dims(&sub, mask.ratio)
}

/// For every parameter entry of the sub-model, the flat global index of each
/// of its coordinates.
pub fn coordinate_map(global: &ModelSpec, mask: &SubModelMask) -> Result<IndexMap<String, Vec<usize>>> {
    submodel_spec(global, mask)?;
    let dims = global.interface_dims();
    let last = dims.len() - 1;
    let sel = |i: usize| -> Vec<usize> {
        if i == 0 || i == last {
            (0..dims[i]).collect()
        } else {
            mask.units[i - 1].clone()
        }
    };
    let ifaces = global.layer_interfaces();
    let mut map = IndexMap::new();
    for (l, layer) in global.layers.iter().enumerate() {
        let i = ifaces[l];
        match layer {
            Layer::Dense { .. } | Layer::OutputHead { .. } => {
                let (rows, cols) = (sel(i), sel(i + 1));
                let full_cols = dims[i + 1];
                let w = rows
                    .iter()
                    .flat_map(|&r| cols.iter().map(move |&c| r * full_cols + c))
                    .collect();
                map.insert(param_name(l, "weight"), w);
                map.insert(param_name(l, "bias"), cols);
            }
            Layer::BatchNorm { .. } => {
                let s = sel(i);
                for what in ["gain", "shift", "running_mean", "running_var"] {
                    map.insert(param_name(l, what), s.clone());
                }
            }
            Layer::Relu { .. } | Layer::Squash { .. } => {}
        }
    }
    Ok(map)
}

/// Per-entry flags marking the global coordinates a sub-model touches.
pub type Coverage = IndexMap<String, Vec<bool>>;

pub fn extract_submodel(global_params: &ParamSet, global: &ModelSpec, mask: &SubModelMask) -> Result<(ModelSpec, ParamSet)> {
    global.check_params(global_params)?;
    let spec = submodel_spec(global, mask)?;
    let map = coordinate_map(global, mask)?;
    let mut sub = spec.template_params();
    for (name, idx) in &map {
        let src = global_params.values(name)?;
        let dst = sub.values_mut(name)?;
        for (d, &g) in dst.iter_mut().zip(idx) {
            *d = src[g];
        }
    }
    Ok((spec, sub))
}

/// Writes the masked coordinates of `sub` into `global_params`.
pub fn embed_submodel(global_params: &mut ParamSet, global: &ModelSpec, sub: &ParamSet, mask: &SubModelMask) -> Result<Coverage> {
    global.check_params(global_params)?;
    submodel_spec(global, mask)?.check_params(sub)?;
    let map = coordinate_map(global, mask)?;
    let mut cov = Coverage::new();
    for (name, e) in global_params.iter() {
        cov.insert(name.to_string(), vec![false; e.tensor.len()]);
    }
    for (name, idx) in &map {
        let src = sub.values(name)?;
        let dst = global_params.values_mut(name)?;
        let c = cov.get_mut(name).unwrap();
        for (&v, &g) in src.iter().zip(idx) {
            dst[g] = v;
            c[g] = true;
        }
    }
    Ok(cov)
}

/// Full-width classifier: `d → hidden… → C`, batch norm after every hidden dense layer.
pub fn build_classifier(input_dim: usize, hidden: &[usize], num_classes: usize) -> ModelSpec {
    ModelSpec::mlp(input_dim, hidden, num_classes, true)
}

/// `z → hidden → BN → ReLU → d → squash into [lo, hi]`.
pub fn build_generator(latent_dim: usize, output_dim: usize, hidden: usize, lo: f64, hi: f64) -> Result<ModelSpec> {
    if latent_dim == 0 || hidden == 0 {
        return Err(Error::config("generator dimensions must be positive"));
    }
    ModelSpec::new(vec![
        Layer::Dense {
            in_dim: latent_dim,
            out_dim: hidden,
        },
        Layer::BatchNorm {
            dim: hidden,
            momentum: DEFAULT_BN_MOMENTUM,
        },
        Layer::Relu { dim: hidden },
        Layer::Dense {
            in_dim: hidden,
            out_dim: output_dim,
        },
        Layer::Squash { dim: output_dim, lo, hi },
    ])
}

/// Meta model `C·C → 4C → C`.
pub fn meta_spec(num_classes: usize) -> ModelSpec {
    let c = num_classes;
    ModelSpec::new(vec![
        Layer::Dense {
            in_dim: c * c,
            out_dim: 4 * c,
        },
        Layer::Relu { dim: 4 * c },
        Layer::OutputHead {
            dim: 4 * c,
            num_classes: c,
        },
    ])
    .expect("meta spec is well formed")
}

/// Meta parameters that output the mean of the `C` expert logit slots.
///
/// Hidden unit `j` reads `+1/C` of logit `j` from every slot and unit `C+j`
/// reads `-1/C`; output `j` is `h_j - h_{C+j}`. The remaining `2C` hidden
/// units start random with zero outgoing weights.
pub fn meta_averaging_init<R: Rng + ?Sized>(num_classes: usize, rng: &mut R) -> (ModelSpec, ParamSet) {
    let c = num_classes;
    let spec = meta_spec(c);
    let mut p = spec.init_params(rng);
    let h = 4 * c;
    {
        let w = p.values_mut("0.weight").unwrap();
        for slot in 0..c {
            for j in 0..c {
                let row = slot * c + j;
                for k in 0..2 * c {
                    w[row * h + k] = 0.0;
                }
                w[row * h + j] = 1.0 / c as f64;
                w[row * h + c + j] = -1.0 / c as f64;
            }
        }
    }
    {
        let w = p.values_mut("2.weight").unwrap();
        w.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..c {
            w[j * c + j] = 1.0;
            w[(c + j) * c + j] = -1.0;
        }
    }
    (spec, p)
}

/// Number of trainable scalars.
pub fn param_count(params: &ParamSet) -> usize {
    params
        .iter()
        .filter(|(_, e)| e.role.is_trainable())
        .map(|(_, e)| e.tensor.len())
        .sum()
}

/// Entries whose role is a batch-norm running statistic.
pub fn is_running_stat(role: Role) -> bool {
    matches!(role, Role::BnRunningMean | Role::BnRunningVar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::nn::graph::predict;
    use crate::rng::stream;

    #[test]
    fn rolling_window_arithmetic() {
        assert_eq!(window(8, 0.5, MaskScheme::Rolling, 0), vec![0, 1, 2, 3]);
        assert_eq!(window(8, 0.5, MaskScheme::Rolling, 6), vec![0, 1, 6, 7]);
        assert_eq!(window(8, 0.25, MaskScheme::Static, 5), vec![0, 1]);
        assert_eq!(window(8, 1e-6, MaskScheme::Static, 0), vec![0]);
    }

    #[test]
    fn full_ratio_is_identity() {
        let g = build_classifier(3, &[8, 6], 2);
        let p = g.init_params(&mut stream(0, "t", &[]));
        for scheme in [MaskScheme::Static, MaskScheme::Rolling] {
            let m = submodel_mask(&g, 1.0, scheme, 3).unwrap();
            assert!(m.is_full(&g));
            let (s, sub) = extract_submodel(&p, &g, &m).unwrap();
            assert_eq!(s.layers, g.layers);
            assert_eq!(sub, p);
        }
    }

    #[test]
    fn mask_spec_mismatch_is_structure_error() {
        let g = build_classifier(3, &[8], 2);
        let mut m = submodel_mask(&g, 0.5, MaskScheme::Static, 0).unwrap();
        m.units[0] = vec![9];
        assert!(matches!(submodel_spec(&g, &m), Err(Error::Structure(_))));
    }

    #[test]
    fn averaging_meta_outputs_slot_mean() {
        let c = 3;
        let (spec, p) = meta_averaging_init(c, &mut stream(0, "meta", &[]));
        let x = Matrix::random_normal(4, c * c, &mut stream(1, "x", &[]));
        let y = predict(&p, &spec, &x).unwrap();
        for r in 0..4 {
            for j in 0..c {
                let mean: f64 = (0..c).map(|s| x.get(r, s * c + j)).sum::<f64>() / c as f64;
                assert!((y.get(r, j) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generator_is_smaller_than_classifier() {
        let clf = build_classifier(16, &[64, 64], 8);
        let gen = build_generator(8, 16, 32, -1.0, 1.0).unwrap();
        let mut rng = stream(0, "g", &[]);
        assert!(param_count(&gen.init_params(&mut rng)) < param_count(&clf.init_params(&mut rng)));
    }
}
