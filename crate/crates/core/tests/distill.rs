use mosaic_core::data::make_synthetic;
use mosaic_core::distill::{distill_student, kd_loss, DistillConfig, SampleSource, Teacher};
use mosaic_core::models::{build_classifier, build_generator};
use mosaic_core::moe::{ExpertSet, MetaInput};
use mosaic_core::nn::graph::predict;
use mosaic_core::nn::io;
use mosaic_core::nn::loss::{cross_entropy, kl_divergence};
use mosaic_core::nn::{OptimizerConfig, ParamSet};
use mosaic_core::protocol::{local_update, LocalConfig};
use mosaic_core::rng::stream;
use mosaic_core::Matrix;
use proptest::prelude::*;

#[test]
fn kd_loss_by_hand() {
    // Teacher probabilities (3/4, 1/4), student (1/2, 1/2), hard label 0.
    let s = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
    let t = Matrix::from_rows(&[vec![3f64.ln(), 0.0]]).unwrap();
    let kl = 0.75 * (0.75f64 / 0.5).ln() + 0.25 * (0.25f64 / 0.5).ln();
    let want = 0.8 * kl + 0.2 * 2f64.ln();
    let (got, g) = kd_loss(&s, &t, 0.8, 0.2, 1.0).unwrap();
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    // d/ds of both terms is (p_S − target): 0.8·(½ − ¾) + 0.2·(½ − 1).
    assert!((g.get(0, 0) - (0.8 * -0.25 + 0.2 * -0.5)).abs() < 1e-12);
    assert!((g.get(0, 0) + g.get(0, 1)).abs() < 1e-12);
}

fn rand_pair(seed: u64, rows: usize, c: usize) -> (Matrix, Matrix) {
    let s = Matrix::random_normal(rows, c, &mut stream(seed, "s", &[])).scale(3.0);
    let t = Matrix::random_normal(rows, c, &mut stream(seed, "t", &[])).scale(3.0);
    (s, t)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kd_loss_decomposes(seed in 0u64..10_000, rows in 1usize..20, c in 2usize..8, a in 0.0f64..3.0, b in 0.0f64..3.0) {
        let (s, t) = rand_pair(seed, rows, c);
        let (kl, _) = kl_divergence(&s, &t).unwrap();
        let (ce, _) = cross_entropy(&s, &t.argmax_rows()).unwrap();
        prop_assert_eq!(kd_loss(&s, &t, a, 0.0, 1.0).unwrap().0, a * kl);
        prop_assert_eq!(kd_loss(&s, &t, 0.0, b, 1.0).unwrap().0, b * ce);
        let (both, _) = kd_loss(&s, &t, a, b, 1.0).unwrap();
        prop_assert!((both - (a * kl + b * ce)).abs() <= 1e-12 * (1.0 + both.abs()));
    }
}

fn trained_teacher() -> (mosaic_core::nn::ModelSpec, ParamSet, mosaic_core::data::Dataset) {
    let data = make_synthetic(4, 60, 6, 1.0, 3).unwrap();
    let spec = build_classifier(6, &[16], 4);
    let init = spec.init_params(&mut stream(3, "t", &[]));
    let cfg = LocalConfig { steps: 200, batch_size: 32, optimizer: OptimizerConfig::sgd(0.1) };
    let p = local_update(&init, &spec, &data, &cfg, &mut stream(3, "fit", &[])).unwrap().params;
    (spec, p, data)
}

fn agreement(a: &Matrix, b: &Matrix) -> f64 {
    let (x, y) = (a.argmax_rows(), b.argmax_rows());
    x.iter().zip(&y).filter(|(p, q)| p == q).count() as f64 / x.len() as f64
}

#[test]
fn student_learns_the_teacher_on_fixed_inputs() {
    let (spec, teacher, data) = trained_teacher();
    let student = spec.init_params(&mut stream(4, "s", &[]));
    let t = Teacher::Model { spec: &spec, params: &teacher };
    let cfg = DistillConfig { epochs: 10, steps_per_epoch: 30, optimizer: OptimizerConfig::adam(1e-2), freeze_student_bn: false, ..DistillConfig::default() };
    let out = distill_student(&student, &spec, &t, &SampleSource::Fixed(&data.inputs), &cfg, &mut stream(4, "d", &[])).unwrap();
    let tl = predict(&teacher, &spec, &data.inputs).unwrap();
    let before = agreement(&predict(&student, &spec, &data.inputs).unwrap(), &tl);
    let after = agreement(&predict(&out.student, &spec, &data.inputs).unwrap(), &tl);
    assert!(after >= 0.9 && after > before, "{before} → {after}");
    assert!(out.curve.last().unwrap() < out.curve.first().unwrap(), "{:?}", out.curve);
}

#[test]
fn teacher_is_never_modified() {
    let spec = build_classifier(6, &[8], 4);
    let experts: Vec<ParamSet> = (0..4).map(|c| spec.init_params(&mut stream(5, "e", &[c]))).collect();
    let gate = spec.init_params(&mut stream(5, "g", &[]));
    let set = ExpertSet::new(spec.clone(), experts, gate, 4, &mut stream(5, "m", &[])).unwrap();
    let snap = |s: &ExpertSet| {
        let mut v: Vec<Vec<u8>> = s.experts.iter().map(|e| io::encode(None, e).unwrap()).collect();
        v.push(io::encode(None, &s.gating).unwrap());
        v.push(io::encode(None, &s.meta).unwrap());
        v.push(io::encode(None, &s.shadow).unwrap());
        v
    };
    let before = snap(&set);
    let x = Matrix::random_normal(8, 6, &mut stream(5, "x", &[]));
    let logits_before = set.meta_forward(&x, MetaInput::RawInput).unwrap();

    let gen_spec = build_generator(4, 6, 12, -8.0, 8.0).unwrap();
    let gens: Vec<ParamSet> = (0..3).map(|i| gen_spec.init_params(&mut stream(5, "gen", &[i]))).collect();
    let source = SampleSource::Ensemble { spec: &gen_spec, generators: gens.iter().enumerate().collect() };
    let student = spec.init_params(&mut stream(5, "st", &[]));
    let cfg = DistillConfig { epochs: 2, steps_per_epoch: 5, batch_size: 16, ..DistillConfig::default() };
    for t in [Teacher::MetaMoe(&set), Teacher::ClasswiseUniform(&set)] {
        distill_student(&student, &spec, &t, &source, &cfg, &mut stream(5, "d", &[])).unwrap();
    }
    assert_eq!(snap(&set), before);
    assert_eq!(set.meta_forward(&x, MetaInput::RawInput).unwrap(), logits_before);
}

#[test]
fn frozen_student_bn_keeps_running_stats() {
    let (spec, teacher, data) = trained_teacher();
    let student = spec.init_params(&mut stream(6, "s", &[]));
    let t = Teacher::Model { spec: &spec, params: &teacher };
    let cfg = DistillConfig { epochs: 1, steps_per_epoch: 5, ..DistillConfig::default() };
    let out = distill_student(&student, &spec, &t, &SampleSource::Fixed(&data.inputs), &cfg, &mut stream(6, "d", &[])).unwrap();
    for what in ["1.running_mean", "1.running_var"] {
        assert_eq!(out.student.values(what).unwrap(), student.values(what).unwrap(), "{what}");
    }
    assert_ne!(out.student.values("0.weight").unwrap(), student.values("0.weight").unwrap());
}

#[test]
fn bad_weights_are_rejected() {
    let spec = build_classifier(2, &[3], 2);
    let p = spec.template_params();
    let t = Teacher::Model { spec: &spec, params: &p };
    let x = Matrix::zeros(4, 2);
    let cfg = DistillConfig { lambda_soft: 0.0, lambda_hard: 0.0, ..DistillConfig::default() };
    assert!(distill_student(&p, &spec, &t, &SampleSource::Fixed(&x), &cfg, &mut stream(0, "d", &[])).is_err());
}
