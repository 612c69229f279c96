//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::time::Instant;

use mosaic_core::config::ExperimentConfig;
use mosaic_core::data::make_synthetic;
use mosaic_core::genopt::{init_generator, train_generator, GenConfig, GenTrainState};
use mosaic_core::models::{build_classifier, build_generator, width_budget};
use mosaic_core::nn::{io, OptimizerConfig, ParamSet};
use mosaic_core::protocol::{local_update, LocalConfig};
use mosaic_core::rng::stream;
use mosaic_core::runner::{generator_comparison, run_experiment, Experiment};
use mosaic_core::verify::{run_suite, Suite};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn suite(s: Suite, limit_s: f64) -> Outcome {
    let t = Instant::now();
    match run_suite(s, 0) {
        Ok(r) => {
            let secs = t.elapsed().as_secs_f64();
            let failed: Vec<&str> = r.failures().map(|c| c.name.as_str()).collect();
            Outcome {
                pass: r.pass && secs < limit_s,
                detail: format!("{} checks, failed {:?}, {:.1} s (limit {limit_s} s)", r.checks.len(), failed, secs),
            }
        }
        Err(e) => Outcome { pass: false, detail: format!("error: {e}") },
    }
}

fn c3() -> Outcome {
    let (h, q, e, s) = (0.5, 0.25, 0.125, 0.0625);
    let cases = [
        (5, vec![1.0, h, h, q, q, e, e, s, s, s]),
        (10, vec![h, q, e, s, s, s, s, s, s, s]),
        (40, vec![s; 10]),
    ];
    let bad: Vec<u32> = cases.iter().filter(|(rho, want)| width_budget(10, 4, *rho) != *want).map(|c| c.0).collect();
    Outcome { pass: bad.is_empty(), detail: format!("mismatching rho: {bad:?}") }
}

fn skewed(clients: usize, omega: f64, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig { seed, ..ExperimentConfig::default() };
    cfg.federation.clients = clients;
    cfg.federation.sampled = clients;
    cfg.federation.omega = omega;
    cfg
}

/// Warm-up plus the one-shot stage.
fn to_switch(cfg: ExperimentConfig) -> mosaic_core::Result<Experiment> {
    let mut e = Experiment::new(cfg, 1)?;
    e.run_warmup()?;
    e.mosaic_stage()?;
    Ok(e)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn c6_c8() -> (Outcome, Outcome) {
    let t = Instant::now();
    let mut teach = Vec::new();
    let mut runs = Vec::new();
    for seed in SEEDS {
        match to_switch(skewed(10, 0.01, seed)) {
            Ok(e) => {
                teach.push(e.mosaic.as_ref().unwrap().teacher);
                runs.push(e);
            }
            Err(e) => {
                let o = || Outcome { pass: false, detail: format!("seed {seed}: {e}") };
                return (o(), o());
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let meta = mean(&teach.iter().map(|t| t.meta).collect::<Vec<_>>());
    let cw = mean(&teach.iter().map(|t| t.classwise).collect::<Vec<_>>());
    let van = mean(&teach.iter().map(|t| t.vanilla).collect::<Vec<_>>());
    let c6 = Outcome {
        pass: meta >= cw && cw >= van && secs < 300.0,
        detail: format!("meta {meta:.4} ≥ classwise {cw:.4} ≥ vanilla {van:.4}, {secs:.1} s (limit 300 s)"),
    };

    let mut comps = Vec::new();
    for e in &runs {
        match generator_comparison(e, 256) {
            Ok(c) => comps.push(c),
            Err(err) => return (c6, Outcome { pass: false, detail: format!("seed {}: {err}", e.cfg.seed) }),
        }
    }
    let pd_e = mean(&comps.iter().map(|c| c.pd_ensemble).collect::<Vec<_>>());
    let pd_a = mean(&comps.iter().map(|c| c.pd_aggregated).collect::<Vec<_>>());
    let kd_e = mean(&comps.iter().map(|c| c.kd_ensemble).collect::<Vec<_>>());
    let kd_a = mean(&comps.iter().map(|c| c.kd_aggregated).collect::<Vec<_>>());
    let c8 = Outcome {
        pass: pd_e > pd_a && kd_e > kd_a,
        detail: format!("PD ensemble {pd_e:.3} vs aggregated {pd_a:.3}; KD ensemble {kd_e:.4} vs aggregated {kd_a:.4}"),
    };
    (c6, c8)
}

fn mean_gain(omega: f64) -> mosaic_core::Result<f64> {
    let mut gains = Vec::new();
    for seed in SEEDS {
        let e = to_switch(skewed(5, omega, seed))?;
        let m = e.mosaic.as_ref().unwrap();
        gains.push(m.g_acc_after - m.g_acc_before);
    }
    Ok(mean(&gains))
}

fn c7() -> Outcome {
    let t = Instant::now();
    match (mean_gain(0.01), mean_gain(1.0)) {
        (Ok(skew), Ok(flat)) => {
            let secs = t.elapsed().as_secs_f64();
            Outcome {
                pass: skew >= 0.02 && flat >= -0.01 && secs < 600.0,
                detail: format!("gain ω=0.01 {:+.2} pts (need ≥ +2), ω=1 {:+.2} pts (need ≥ −1), {secs:.1} s (limit 600 s)", skew * 100.0, flat * 100.0),
            }
        }
        (Err(e), _) | (_, Err(e)) => Outcome { pass: false, detail: format!("error: {e}") },
    }
}

fn c9() -> Outcome {
    let data = make_synthetic(4, 30, 6, 1.0, 0).unwrap();
    let cls_spec = build_classifier(6, &[16], 4);
    let init = cls_spec.init_params(&mut stream(0, "c9", &[]));
    let lc = LocalConfig { steps: 30, batch_size: 32, optimizer: OptimizerConfig::sgd(0.1) };
    let cls = local_update(&init, &cls_spec, &data, &lc, &mut stream(0, "c9-fit", &[])).unwrap().params;
    let gen_spec = build_generator(4, 6, 12, -8.0, 8.0).unwrap();
    let n = data.len();
    let train = |lambda: f64, tau: usize| -> Vec<u8> {
        let cfg = GenConfig { latent_dim: 4, hidden: 12, batch_size: 16, epochs: 3, lambda_inversion: lambda, tau, ..GenConfig::default() };
        let mut st = GenTrainState::new(gen_spec.clone(), init_generator(&gen_spec, 1), &cls_spec, &cls, &cfg, &mut stream(1, "d", &[])).unwrap();
        train_generator(&mut st, &data.inputs, Some((&cls_spec, &cls)), &cfg, &mut stream(1, "t", &[])).unwrap();
        let p: &ParamSet = &st.generator;
        io::encode(None, p).unwrap()
    };
    let below = train(10.0, 1000) != train(0.0, 1000);
    let at = train(10.0, n) == train(0.0, n);
    let above = train(10.0, n / 2) == train(0.0, n / 2);
    Outcome {
        pass: below && at && above,
        detail: format!("n = {n}: τ=1000 changes params {below}; τ=n identical {at}; τ=n/2 identical {above}"),
    }
}

fn c10() -> Outcome {
    let mut cfg = skewed(10, 0.01, 0);
    cfg.federation.scheme = mosaic_core::config::Scheme::RollingPt;
    cfg.schedule.warmup_rounds = 5;
    cfg.schedule.finetune_rounds = 3;
    cfg.generator.epochs = 3;
    cfg.moe.meta.epochs = 10;
    cfg.distill.epochs = 2;
    let dir = tempfile::tempdir().unwrap();
    let mut csvs = Vec::new();
    for (i, workers) in [1, 3, 1, 3].into_iter().enumerate() {
        let out = dir.path().join(format!("r{i}"));
        if let Err(e) = run_experiment(&cfg, &out, workers, None) {
            return Outcome { pass: false, detail: format!("error: {e}") };
        }
        csvs.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    let same = csvs.windows(2).all(|w| w[0] == w[1]);
    Outcome { pass: same, detail: format!("4 runs (workers 1, 3, 1, 3), {} bytes each, identical {same}", csvs[0].len()) }
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    results.push(("C1 gradient checks", suite(Suite::Gradcheck, 60.0)));
    results.push(("C2 aggregation oracles", suite(Suite::Aggregation, f64::INFINITY)));
    results.push(("C3 width budgets", c3()));
    results.push(("C4 variance and bias harness", suite(Suite::Theorem, 30.0)));
    results.push(("C5 loss closed forms", suite(Suite::Losses, f64::INFINITY)));
    let (c6, c8) = c6_c8();
    results.push(("C6 teacher ordering", c6));
    results.push(("C7 distillation gain", c7()));
    results.push(("C8 generator ensemble vs aggregate", c8));
    results.push(("C9 inversion gating", c9()));
    results.push(("C10 reproducibility", c10()));
    let mut failed = 0;
    for (name, o) in &results {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria pass", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
