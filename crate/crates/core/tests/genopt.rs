use std::f64::consts::LN_2;

use mosaic_core::data::make_synthetic;
use mosaic_core::genopt::{
    adversarial_step, diversity_from_logits, discriminator_loss, ensemble_sample, generator_adv_loss, init_generator, inversion_loss,
    sample_latent, train_generator, GenConfig, GenTrainState,
};
use mosaic_core::models::{build_classifier, build_generator};
use mosaic_core::nn::io;
use mosaic_core::nn::spec::param_name;
use mosaic_core::nn::{Layer, ModelSpec, OptimizerConfig, ParamSet};
use mosaic_core::protocol::{draw_batch, local_update, LocalConfig};
use mosaic_core::rng::stream;
use mosaic_core::Matrix;

#[test]
fn diversity_of_half_quarter_quarter() {
    let logits = Matrix::from_rows(&[vec![800.0, 0.0, 0.0], vec![-800.0, 0.0, 0.0]]).unwrap();
    let (d, _) = diversity_from_logits(&logits);
    assert!((d - 1.5 * LN_2).abs() < 1e-12);
}

#[test]
fn inversion_single_unit_mean_offset() {
    let spec = ModelSpec::new(vec![
        Layer::Dense { in_dim: 1, out_dim: 1 },
        Layer::BatchNorm { dim: 1, momentum: 0.1 },
        Layer::Relu { dim: 1 },
        Layer::OutputHead { dim: 1, num_classes: 2 },
    ])
    .unwrap();
    let mut p = spec.template_params();
    p.values_mut("0.weight").unwrap()[0] = 1.0;
    p.values_mut("0.bias").unwrap()[0] = 0.0;
    p.values_mut("1.running_mean").unwrap()[0] = 0.0;
    p.values_mut("1.running_var").unwrap()[0] = 1.0;
    // Batch {0, 2}: mean 1, biased variance 1.
    let x = Matrix::from_rows(&[vec![0.0], vec![2.0]]).unwrap();
    let (v, _) = inversion_loss(&spec, &p, &x).unwrap();
    assert_eq!(v, 1.0);
    p.values_mut("1.running_mean").unwrap()[0] = 1.0;
    assert_eq!(inversion_loss(&spec, &p, &x).unwrap().0, 0.0);
}

#[test]
fn inversion_needs_batch_norm() {
    let spec = ModelSpec::mlp(2, &[3], 2, false);
    let p = spec.template_params();
    assert!(inversion_loss(&spec, &p, &Matrix::zeros(4, 2)).is_err());
}

#[test]
fn adversarial_boundary_values() {
    let (g, _) = generator_adv_loss(&[0.0, 0.0], false);
    assert!((g - 0.5f64.ln()).abs() < 1e-15);
    let (d, _, _) = discriminator_loss(&[0.0], &[0.0]);
    assert!((d + 2.0 * 0.5f64.ln()).abs() < 1e-15);
    // A perfect discriminator: D(x) → 1, D(G(z)) → 0.
    let (g, _) = generator_adv_loss(&[-60.0], false);
    assert!(g <= 0.0 && g > -1e-20);
    let (d, _, _) = discriminator_loss(&[60.0], &[-60.0]);
    assert!(d.abs() < 1e-20);
}

#[test]
fn round_robin_rows_per_generator() {
    let spec = build_generator(2, 3, 4, -1.0, 1.0).unwrap();
    let gens: Vec<ParamSet> = (0..10).map(|i| spec.init_params(&mut stream(i, "g", &[]))).collect();
    let refs: Vec<(usize, &ParamSet)> = gens.iter().enumerate().collect();
    let b = ensemble_sample(&spec, &refs, 100, &mut stream(0, "s", &[])).unwrap();
    for i in 0..10 {
        assert_eq!(b.source_generator_ids.iter().filter(|&&g| g == i).count(), 10);
    }
    let c = ensemble_sample(&spec, &refs[..3], 10, &mut stream(0, "s", &[])).unwrap();
    let counts: Vec<usize> = (0..3).map(|i| c.source_generator_ids.iter().filter(|&&g| g == i).count()).collect();
    assert_eq!(counts, vec![4, 3, 3]);
    let again = ensemble_sample(&spec, &refs[..3], 10, &mut stream(0, "s", &[])).unwrap();
    assert_eq!(c.samples, again.samples);
    assert!(ensemble_sample(&spec, &[], 4, &mut stream(0, "s", &[])).is_err());
}

struct Client {
    shard: Matrix,
    cls_spec: ModelSpec,
    cls: ParamSet,
    gen_spec: ModelSpec,
}

fn client(n_per_class: usize) -> Client {
    let data = make_synthetic(4, n_per_class, 6, 1.0, 0).unwrap();
    let cls_spec = build_classifier(6, &[16], 4);
    let init = cls_spec.init_params(&mut stream(0, "cls", &[]));
    let cfg = LocalConfig { steps: 40, batch_size: 32, optimizer: OptimizerConfig::sgd(0.1) };
    let cls = local_update(&init, &cls_spec, &data, &cfg, &mut stream(0, "pre", &[])).unwrap().params;
    Client { shard: data.inputs, cls_spec, cls, gen_spec: build_generator(4, 6, 12, -8.0, 8.0).unwrap() }
}

fn small_cfg() -> GenConfig {
    GenConfig { latent_dim: 4, hidden: 12, batch_size: 16, epochs: 3, min_steps_per_epoch: 2, ..GenConfig::default() }
}

fn train(c: &Client, cfg: &GenConfig) -> (ParamSet, Vec<mosaic_core::genopt::EpochLog>, ParamSet) {
    let g0 = init_generator(&c.gen_spec, 9);
    let mut st = GenTrainState::new(c.gen_spec.clone(), g0, &c.cls_spec, &c.cls, cfg, &mut stream(1, "disc", &[])).unwrap();
    let hist = train_generator(&mut st, &c.shard, Some((&c.cls_spec, &c.cls)), cfg, &mut stream(1, "train", &[])).unwrap();
    (st.generator, hist, st.frozen)
}

fn bytes(p: &ParamSet) -> Vec<u8> {
    io::encode(None, p).unwrap()
}

#[test]
fn inversion_below_tau_changes_the_generator() {
    let c = client(20);
    assert!(c.shard.rows() < 1000);
    let on = GenConfig { lambda_inversion: 10.0, ..small_cfg() };
    let off = GenConfig { lambda_inversion: 0.0, ..small_cfg() };
    assert_ne!(bytes(&train(&c, &on).0), bytes(&train(&c, &off).0));
}

#[test]
fn inversion_at_or_above_tau_is_inert() {
    let c = client(20);
    let n = c.shard.rows();
    for tau in [n, n / 2, 1] {
        let on = GenConfig { lambda_inversion: 10.0, tau, ..small_cfg() };
        let off = GenConfig { lambda_inversion: 0.0, tau, ..small_cfg() };
        let (a, ha, _) = train(&c, &on);
        let (b, hb, _) = train(&c, &off);
        assert_eq!(bytes(&a), bytes(&b), "tau = {tau}");
        assert!(ha.iter().chain(&hb).all(|h| h.inversion == 0.0));
    }
}

#[test]
fn zero_weights_reduce_to_plain_adversarial_steps() {
    let c = client(10);
    let cfg = GenConfig { lambda_entropy: 0.0, lambda_diversity: 0.0, lambda_inversion: 0.0, ..small_cfg() };
    let (trained, hist, _) = train(&c, &cfg);

    let mut st = GenTrainState::new(c.gen_spec.clone(), init_generator(&c.gen_spec, 9), &c.cls_spec, &c.cls, &cfg, &mut stream(1, "disc", &[])).unwrap();
    let mut rng = stream(1, "train", &[]);
    let n = c.shard.rows();
    let steps = n.div_ceil(cfg.batch_size).max(cfg.min_steps_per_epoch);
    let mut adv_g = Vec::new();
    for _ in 0..cfg.epochs {
        let mut sum = 0.0;
        for _ in 0..steps {
            let idx = draw_batch(n, cfg.batch_size, &mut rng);
            let real = c.shard.select_rows(&idx);
            let z = sample_latent(real.rows(), cfg.latent_dim, &mut rng);
            sum += adversarial_step(&mut st, &real, &z).unwrap().adv_g;
        }
        adv_g.push(sum / steps as f64);
    }
    assert_eq!(bytes(&st.generator), bytes(&trained));
    assert_eq!(adv_g, hist.iter().map(|h| h.adv_g).collect::<Vec<_>>());
}

#[test]
fn diversity_weight_raises_final_diversity() {
    let c = client(20);
    let cfg = GenConfig { epochs: 6, ..small_cfg() };
    let with = train(&c, &cfg).1;
    let without = train(&c, &GenConfig { lambda_diversity: 0.0, ..cfg }).1;
    assert!(with.last().unwrap().diversity > without.last().unwrap().diversity);
}

#[test]
fn frozen_classifier_and_logged_losses_are_sane() {
    let c = client(20);
    let before = bytes(&c.cls);
    let (_, hist, frozen) = train(&c, &small_cfg());
    assert_eq!(bytes(&frozen), before);
    assert_eq!(bytes(&c.cls), before);
    let ln_c = 4f64.ln();
    for h in &hist {
        assert!((0.0..=ln_c + 1e-12).contains(&h.entropy), "{h:?}");
        assert!((0.0..=ln_c + 1e-12).contains(&h.diversity), "{h:?}");
        assert!(h.inversion >= 0.0);
        assert!(h.adv_g <= 0.0 && h.adv_d >= 0.0);
        assert!((0.0..=1.0).contains(&h.d_acc_fake));
    }
}

#[test]
fn discriminator_shares_the_local_trunk() {
    let c = client(10);
    let st = GenTrainState::new(c.gen_spec.clone(), init_generator(&c.gen_spec, 0), &c.cls_spec, &c.cls, &small_cfg(), &mut stream(0, "d", &[])).unwrap();
    let head = c.cls_spec.head_index().unwrap();
    for (name, e) in c.cls.iter() {
        if !name.starts_with(&format!("{head}.")) {
            assert_eq!(st.disc.values(name).unwrap(), e.tensor.data.as_slice(), "{name}");
        }
    }
    assert_eq!(st.disc.values(&param_name(head, "bias")).unwrap().len(), 1);
}
