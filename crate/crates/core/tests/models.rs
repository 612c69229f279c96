use mosaic_core::models::{
    build_classifier, build_generator, embed_submodel, extract_submodel, param_count, submodel_mask, width_budget, window, MaskScheme,
};
use mosaic_core::nn::spec::param_name;
use mosaic_core::nn::{Layer, ModelSpec, ParamSet};
use mosaic_core::rng::stream;
use proptest::prelude::*;

const H: f64 = 0.5;
const Q: f64 = 0.25;
const E: f64 = 0.125;
const S: f64 = 0.0625;

#[test]
fn budget_lists_for_ten_clients() {
    assert_eq!(width_budget(10, 4, 5), vec![1.0, H, H, Q, Q, E, E, S, S, S]);
    assert_eq!(width_budget(10, 4, 10), vec![H, Q, E, S, S, S, S, S, S, S]);
    assert_eq!(width_budget(10, 4, 40), vec![S; 10]);
}

#[test]
fn large_rho_floors_everyone() {
    for n in [1, 3, 10, 17] {
        // ⌊4N·i/N⌋ = 4i ≥ 4, so the floor binds whenever σ ≤ 4.
        for sigma in 0..=4u32 {
            let min = 0.5f64.powi(sigma as i32);
            assert!(width_budget(n, sigma, 4 * n as u32).iter().all(|&r| r == min));
        }
    }
}

#[test]
fn zero_rho_is_homogeneous() {
    assert_eq!(width_budget(7, 4, 0), vec![1.0; 7]);
}

#[test]
fn rolling_window_examples() {
    assert_eq!(window(8, 0.5, MaskScheme::Rolling, 0), vec![0, 1, 2, 3]);
    assert_eq!(window(8, 0.5, MaskScheme::Rolling, 6), vec![0, 1, 6, 7]);
    assert_eq!(window(8, 0.5, MaskScheme::Static, 6), vec![0, 1, 2, 3]);
}

#[test]
fn dense_parameter_count() {
    let spec = ModelSpec::new(vec![Layer::Dense { in_dim: 4, out_dim: 3 }]).unwrap();
    assert_eq!(param_count(&spec.template_params()), 15);
    assert_eq!(param_count(&ParamSet::new()), 0);
}

#[test]
fn generator_is_lighter_than_classifier() {
    let cls = build_classifier(16, &[64, 64], 8).template_params();
    let gen = build_generator(8, 16, 32, -1.0, 1.0).unwrap().template_params();
    assert!(param_count(&gen) < param_count(&cls));
    let half = build_classifier(16, &[64, 64], 8).with_width(0.5).unwrap().template_params();
    assert!(param_count(&half) < param_count(&cls));
}

fn global() -> (ModelSpec, ParamSet) {
    let spec = build_classifier(3, &[4], 2);
    let mut p = spec.init_params(&mut stream(0, "coord-oracle", &[]));
    // Distinct values everywhere so any misplaced coordinate shows.
    let mut k = 0.0;
    p.for_each_mut(|_, _, v| {
        for x in v {
            k += 1.0;
            *x = k;
        }
    });
    (spec, p)
}

#[test]
fn extraction_matches_hand_slicing() {
    let (spec, p) = global();
    let mask = submodel_mask(&spec, 0.5, MaskScheme::Rolling, 3).unwrap();
    assert_eq!(mask.units, vec![vec![0, 3]]);
    let (sub_spec, sub) = extract_submodel(&p, &spec, &mask).unwrap();
    assert_eq!(sub_spec.interface_dims(), vec![3, 2, 2]);
    let g = |l: usize, w: &str| p.values(&param_name(l, w)).unwrap().to_vec();
    let s = |l: usize, w: &str| sub.values(&param_name(l, w)).unwrap().to_vec();
    let units = [0usize, 3];
    let mut w0 = Vec::new();
    for i in 0..3 {
        for &u in &units {
            w0.push(g(0, "weight")[i * 4 + u]);
        }
    }
    assert_eq!(s(0, "weight"), w0);
    assert_eq!(s(0, "bias"), units.iter().map(|&u| g(0, "bias")[u]).collect::<Vec<_>>());
    for what in ["gain", "shift", "running_mean", "running_var"] {
        assert_eq!(s(1, what), units.iter().map(|&u| g(1, what)[u]).collect::<Vec<_>>(), "{what}");
    }
    let mut w3 = Vec::new();
    for &u in &units {
        for c in 0..2 {
            w3.push(g(3, "weight")[u * 2 + c]);
        }
    }
    assert_eq!(s(3, "weight"), w3);
    assert_eq!(s(3, "bias"), g(3, "bias"));
}

#[test]
fn embedding_writes_only_the_masked_coordinates() {
    let (spec, p) = global();
    let mask = submodel_mask(&spec, 0.5, MaskScheme::Rolling, 3).unwrap();
    let (_, mut sub) = extract_submodel(&p, &spec, &mask).unwrap();
    sub.for_each_mut(|_, _, v| v.iter_mut().for_each(|x| *x = -*x));
    let mut out = p.clone();
    let cov = embed_submodel(&mut out, &spec, &sub, &mask).unwrap();
    for (name, e) in p.iter() {
        let after = out.values(name).unwrap();
        for (k, &before) in e.tensor.data.iter().enumerate() {
            if cov[name][k] {
                assert_eq!(after[k], -before);
            } else {
                assert_eq!(after[k], before);
            }
        }
    }
    // Hidden units 1 and 2 are outside the mask, so their layer-0 columns stay uncovered.
    for i in 0..3 {
        assert!(!cov["0.weight"][i * 4 + 1] && !cov["0.weight"][i * 4 + 2]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn window_arithmetic(width in 1usize..40, k in 0u32..6, round in 0usize..200) {
        let ratio = 0.5f64.powi(k as i32);
        let want_len = ((ratio * width as f64).ceil() as usize).max(1);
        let w = window(width, ratio, MaskScheme::Rolling, round);
        prop_assert_eq!(w.len(), want_len);
        let mut expect: Vec<usize> = (0..want_len).map(|j| (round + j) % width).collect();
        expect.sort_unstable();
        prop_assert_eq!(&w, &expect);
        prop_assert_eq!(w, window(width, ratio, MaskScheme::Rolling, round));
        prop_assert_eq!(window(width, ratio, MaskScheme::Static, round), (0..want_len).collect::<Vec<_>>());
    }

    #[test]
    fn extract_then_embed_is_identity(
        seed in 0u64..1000,
        k in 0u32..4,
        round in 0usize..50,
        rolling in any::<bool>(),
        h1 in 1usize..9,
        h2 in 1usize..9,
    ) {
        let spec = build_classifier(3, &[h1, h2], 4);
        let p = spec.init_params(&mut stream(seed, "adjoint", &[]));
        let scheme = if rolling { MaskScheme::Rolling } else { MaskScheme::Static };
        let mask = submodel_mask(&spec, 0.5f64.powi(k as i32), scheme, round).unwrap();
        let (_, sub) = extract_submodel(&p, &spec, &mask).unwrap();
        let mut out = p.clone();
        embed_submodel(&mut out, &spec, &sub, &mask).unwrap();
        prop_assert_eq!(out, p);
    }
}
