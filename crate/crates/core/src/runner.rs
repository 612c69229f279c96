//! The round schedule: warm-up rounds, the one-shot generator / teacher /
//! distillation stage, then fine-tune rounds. Also the on-disk run layout.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{DatasetConfig, ExperimentConfig, Scheme};
use crate::data::{dirichlet_partition, load_idx, make_synthetic_split, Partition, Split};
use crate::distill::{distill_student, SampleSource, Teacher, TeacherKind};
use crate::error::{Error, Result};
use crate::eval::{accuracy_of_logits, global_accuracy, local_accuracy};
use crate::genopt::{ensemble_sample, init_generator, train_generator, EpochLog, GenTrainState};
use crate::models::{build_classifier, build_generator, embed_submodel, extract_submodel, submodel_mask, width_budget, SubModelMask};
use crate::moe::{classwise_aggregate, extract_prototypes, train_meta, vanilla_ensemble, ClassContribution, ExpertSet, MetaInput, Prototype};
use crate::nn::{io, ModelSpec, OptimizerConfig, ParamSet};
use crate::protocol::{fedavg_aggregate, local_update, partial_aggregate, sample_clients, ClientState, Contribution, DataStore, LocalConfig, MaskedContribution};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Finetune,
}

impl Phase {
    fn as_str(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub phase: Phase,
    pub g_acc: f64,
    pub l_acc: f64,
    /// Mean over sampled clients of their per-step training loss.
    pub task_loss: f64,
    pub client_losses: Vec<(usize, f64)>,
    #[serde(skip)]
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Event {
    pub stage: String,
    pub round: usize,
    pub kind: String,
    pub detail: Value,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TeacherAccuracy {
    pub meta: f64,
    pub classwise: f64,
    pub vanilla: f64,
}

/// Everything the one-shot stage produced.
#[derive(Debug, Clone)]
pub struct MosaicOutcome {
    pub round: usize,
    pub generators: Vec<ParamSet>,
    pub generator_history: Vec<Vec<EpochLog>>,
    pub prototypes: Vec<Prototype>,
    pub experts: ExpertSet,
    pub teacher: TeacherAccuracy,
    pub distill_curve: Vec<f64>,
    pub g_acc_before: f64,
    pub g_acc_after: f64,
}

pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub store: DataStore,
    pub partition: Partition,
    pub ratios: Vec<f64>,
    pub global_spec: ModelSpec,
    pub global: ParamSet,
    pub clients: Vec<ClientState>,
    pub gen_spec: ModelSpec,
    pub metrics: Vec<RoundMetrics>,
    pub events: Vec<Event>,
    pub mosaic: Option<MosaicOutcome>,
    pub next_round: usize,
    pool: rayon::ThreadPool,
}

/// Builds or loads the train and test splits a config names.
pub fn load_data(cfg: &ExperimentConfig) -> Result<DataStore> {
    match &cfg.dataset {
        DatasetConfig::Synthetic { .. } => {
            let s = cfg.dataset.synthetic().unwrap();
            Ok(DataStore::new(
                make_synthetic_split(&s, Split::Train, cfg.seed)?,
                make_synthetic_split(&s, Split::Test, cfg.seed)?,
            ))
        }
        DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let train = load_idx(train_images, train_labels)?;
            let mut test = load_idx(test_images, test_labels)?;
            test.split = Split::Test;
            test.num_classes = train.num_classes.max(test.num_classes);
            Ok(DataStore::new(train, test))
        }
    }
}

/// Output range of the generators, taken from the dataset definition.
fn sample_range(cfg: &ExperimentConfig) -> (f64, f64) {
    match cfg.dataset.synthetic() {
        Some(s) => {
            let r = s.radius + 4.0 * s.spread;
            (-r, r)
        }
        None => (0.0, 1.0),
    }
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig, workers: usize) -> Result<Self> {
        cfg.validate()?;
        let store = load_data(&cfg)?;
        let c = store.num_classes();
        if let Some(k) = cfg.moe.top_k {
            if k > c {
                return Err(Error::Config(format!("moe.top_k: {k} exceeds the {c} classes")));
            }
        }
        let f = &cfg.federation;
        let partition = dirichlet_partition(store.train_labels(), f.clients, f.omega, cfg.seed)?;
        let ratios = match f.scheme {
            Scheme::Fedavg => vec![1.0; f.clients],
            _ => width_budget(f.clients, f.sigma, f.rho),
        };
        let global_spec = build_classifier(store.dim(), &cfg.model.hidden, c);
        let global = global_spec.init_params(&mut stream(cfg.seed, "global-init", &[]));
        let (lo, hi) = sample_range(&cfg);
        let gen_spec = build_generator(cfg.generator.latent_dim, store.dim(), cfg.generator.hidden, lo, hi)?;
        let mut clients = Vec::with_capacity(f.clients);
        for (id, shard) in partition.client_shards.iter().enumerate() {
            let mask = Self::mask_for(&cfg, &global_spec, ratios[id], 0)?;
            let (spec, params) = extract_submodel(&global, &global_spec, &mask)?;
            let mut cs = ClientState::new(id, shard.clone(), store.train_labels(), c, ratios[id], spec, params);
            cs.mask = Some(mask);
            clients.push(cs);
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(Self {
            cfg,
            store,
            partition,
            ratios,
            global_spec,
            global,
            clients,
            gen_spec,
            metrics: Vec::new(),
            events: Vec::new(),
            mosaic: None,
            next_round: 0,
            pool,
        })
    }

    fn mask_for(cfg: &ExperimentConfig, spec: &ModelSpec, ratio: f64, round: usize) -> Result<SubModelMask> {
        use crate::models::MaskScheme;
        match cfg.federation.scheme {
            Scheme::Fedavg => submodel_mask(spec, 1.0, MaskScheme::Static, round),
            Scheme::StaticPt => submodel_mask(spec, ratio, MaskScheme::Static, round),
            Scheme::RollingPt => submodel_mask(spec, ratio, MaskScheme::Rolling, round),
        }
    }

    fn event(&mut self, stage: &str, round: usize, kind: &str, detail: Value, started: Instant) {
        self.events.push(Event {
            stage: stage.into(),
            round,
            kind: kind.into(),
            detail,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }

    pub fn global_accuracy(&self) -> Result<f64> {
        global_accuracy(&self.global, &self.global_spec, self.store.test("eval"))
    }

    pub fn local_accuracy(&self) -> Result<f64> {
        let models: Vec<(&ModelSpec, &ParamSet)> = self.clients.iter().map(|c| (&c.spec, &c.params)).collect();
        local_accuracy(&models, self.store.test("eval"), self.cfg.seed)
    }

    /// One federated round: sample, train locally (in parallel), aggregate, evaluate.
    pub fn run_round(&mut self, phase: Phase, lr_factor: f64) -> Result<RoundMetrics> {
        let round = self.next_round;
        let started = Instant::now();
        let f = self.cfg.federation.clone();
        let sampled = sample_clients(f.clients, f.sampled, round, self.cfg.seed)?;
        let local_cfg = LocalConfig {
            steps: f.local_steps,
            batch_size: f.batch_size,
            optimizer: f.optimizer.with_lr(f.optimizer.lr() * lr_factor),
        };
        let mut jobs = Vec::with_capacity(sampled.len());
        for &id in &sampled {
            let mask = Self::mask_for(&self.cfg, &self.global_spec, self.ratios[id], round)?;
            let (spec, params) = extract_submodel(&self.global, &self.global_spec, &mask)?;
            let shard = self.store.shard("local", &self.clients[id].shard);
            jobs.push((id, mask, spec, params, shard));
        }
        let seed = self.cfg.seed;
        let results: Vec<Result<_>> = self.pool.install(|| {
            jobs.par_iter()
                .map(|(id, _, spec, params, shard)| {
                    let mut rng = stream(seed, "local", &[*id as u64, round as u64]);
                    local_update(params, spec, shard, &local_cfg, &mut rng)
                })
                .collect()
        });
        let mut updates = Vec::with_capacity(jobs.len());
        for ((id, mask, spec, _, _), r) in jobs.into_iter().zip(results) {
            updates.push((id, mask, spec, r?));
        }
        let weights: Vec<f64> = updates.iter().map(|u| self.clients[u.0].n() as f64).collect();
        self.global = match f.scheme {
            Scheme::Fedavg => {
                let c: Vec<Contribution<'_>> = updates
                    .iter()
                    .zip(&weights)
                    .map(|(u, &w)| Contribution {
                        id: u.0,
                        weight: w,
                        params: &u.3.params,
                    })
                    .collect();
                fedavg_aggregate(&c)?
            }
            Scheme::StaticPt | Scheme::RollingPt => {
                let c: Vec<MaskedContribution<'_>> = updates
                    .iter()
                    .zip(&weights)
                    .map(|(u, &w)| MaskedContribution {
                        id: u.0,
                        weight: w,
                        params: &u.3.params,
                        mask: &u.1,
                    })
                    .collect();
                partial_aggregate(&self.global, &self.global_spec, &c)?
            }
        };
        let mut client_losses = Vec::with_capacity(updates.len());
        for (id, mask, spec, res) in updates {
            let mean = if res.losses.is_empty() {
                0.0
            } else {
                res.losses.iter().sum::<f64>() / res.losses.len() as f64
            };
            client_losses.push((id, mean));
            let c = &mut self.clients[id];
            c.spec = spec;
            c.params = res.params;
            c.mask = Some(mask);
        }
        let task_loss = client_losses.iter().map(|c| c.1).sum::<f64>() / client_losses.len() as f64;
        let m = RoundMetrics {
            round,
            phase,
            g_acc: self.global_accuracy()?,
            l_acc: self.local_accuracy()?,
            task_loss,
            client_losses,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        self.event(
            "round",
            round,
            phase.as_str(),
            json!({"sampled": sampled, "g_acc": m.g_acc, "l_acc": m.l_acc}),
            started,
        );
        self.metrics.push(m.clone());
        self.next_round += 1;
        Ok(m)
    }

    /// Full-width copies of every client's local model (uncovered
    /// coordinates from the current global model).
    pub fn embedded_clients(&self) -> Result<Vec<ParamSet>> {
        self.clients
            .iter()
            .map(|c| {
                let mut full = self.global.clone();
                match &c.mask {
                    Some(m) => {
                        embed_submodel(&mut full, &self.global_spec, &c.params, m)?;
                    }
                    None => full = c.params.clone(),
                }
                Ok(full)
            })
            .collect()
    }

    /// Trains one generator per client (each uploaded exactly once).
    pub fn train_generators(&mut self) -> Result<(Vec<ParamSet>, Vec<Vec<EpochLog>>)> {
        let round = self.next_round;
        let started = Instant::now();
        let g = self.cfg.generator;
        let seed = self.cfg.seed;
        let init = init_generator(&self.gen_spec, seed);
        let shards: Vec<_> = self.clients.iter().map(|c| self.store.shard("genopt", &c.shard).inputs).collect();
        let (gen_spec, global_spec, global) = (&self.gen_spec, &self.global_spec, &self.global);
        let clients = &self.clients;
        let results: Vec<Result<(ParamSet, Vec<EpochLog>)>> = self.pool.install(|| {
            clients
                .par_iter()
                .zip(shards.par_iter())
                .map(|(c, shard)| {
                    let mut rng = stream(seed, "discriminator-init", &[c.id as u64]);
                    let mut st = GenTrainState::new(gen_spec.clone(), init.clone(), &c.spec, &c.params, &g, &mut rng)?;
                    let mut rng = stream(seed, "generator-train", &[c.id as u64]);
                    let hist = train_generator(&mut st, shard, Some((global_spec, global)), &g, &mut rng)?;
                    Ok((st.generator, hist))
                })
                .collect()
        });
        let mut gens = Vec::with_capacity(results.len());
        let mut hists = Vec::with_capacity(results.len());
        for (i, r) in results.into_iter().enumerate() {
            let (p, h) = r?;
            let last = h.last().copied().unwrap_or_default();
            self.event(
                "genopt",
                round,
                "generator_upload",
                json!({"client": i, "n": self.clients[i].n(), "inversion": self.clients[i].n() < g.tau, "final": last}),
                started,
            );
            self.clients[i].generator = Some(p.clone());
            gens.push(p);
            hists.push(h);
        }
        Ok((gens, hists))
    }

    pub fn build_teacher(&mut self) -> Result<(ExpertSet, Vec<Prototype>)> {
        let round = self.next_round;
        let started = Instant::now();
        let c = self.store.num_classes();
        let fdim = self.global_spec.feature_dim().unwrap();
        let mut protos = Vec::new();
        for cl in &self.clients {
            let shard = self.store.shard("prototypes", &cl.shard);
            protos.extend(extract_prototypes(
                cl.id,
                &cl.spec,
                &cl.params,
                &shard.inputs,
                &shard.labels,
                c,
                self.cfg.moe.q,
                cl.mask.as_ref(),
                fdim,
            )?);
        }
        let full = self.embedded_clients()?;
        let contribs: Vec<ClassContribution<'_>> = self
            .clients
            .iter()
            .zip(&full)
            .map(|(cl, p)| ClassContribution {
                id: cl.id,
                params: p,
                histogram: &cl.label_histogram,
            })
            .collect();
        let experts = classwise_aggregate(&self.global, &contribs, c)?;
        let top_k = self.cfg.moe.top_k.unwrap_or(c);
        let mut set = ExpertSet::new(
            self.global_spec.clone(),
            experts,
            self.global.clone(),
            top_k,
            &mut stream(self.cfg.seed, "meta-init", &[]),
        )?;
        let curve = train_meta(&mut set, &protos, &self.cfg.moe.meta, &mut stream(self.cfg.seed, "meta-train", &[]))?;
        self.event(
            "moe",
            round,
            "meta_trained",
            json!({"prototypes": protos.len(), "final_ce": curve.last()}),
            started,
        );
        Ok((set, protos))
    }

    pub fn teacher_accuracy(&self, set: &ExpertSet) -> Result<TeacherAccuracy> {
        let test = self.store.test("eval");
        let full = self.embedded_clients()?;
        let models: Vec<(usize, &ParamSet)> = full.iter().enumerate().collect();
        Ok(TeacherAccuracy {
            meta: accuracy_of_logits(&set.meta_forward(&test.inputs, MetaInput::RawInput)?, &test.labels)?,
            classwise: accuracy_of_logits(&set.classwise_uniform(&test.inputs, MetaInput::RawInput)?, &test.labels)?,
            vanilla: accuracy_of_logits(&vanilla_ensemble(&self.global_spec, &models, &test.inputs)?, &test.labels)?,
        })
    }

    /// Generators, teacher and distillation, run once after warm-up.
    pub fn mosaic_stage(&mut self) -> Result<&MosaicOutcome> {
        let round = self.next_round;
        let (generators, generator_history) = self.train_generators().map_err(|e| e.at_stage("genopt", round))?;
        let (experts, prototypes) = self.build_teacher().map_err(|e| e.at_stage("moe", round))?;
        let teacher = self.teacher_accuracy(&experts)?;
        let g_acc_before = self.global_accuracy()?;
        let started = Instant::now();
        let full = self.embedded_clients()?;
        let t = match self.cfg.distill.teacher {
            TeacherKind::MetaMoe => Teacher::MetaMoe(&experts),
            TeacherKind::ClasswiseUniform => Teacher::ClasswiseUniform(&experts),
            TeacherKind::Vanilla => Teacher::Vanilla {
                spec: &self.global_spec,
                models: full.iter().enumerate().collect(),
            },
        };
        let source = SampleSource::Ensemble {
            spec: &self.gen_spec,
            generators: generators.iter().enumerate().collect(),
        };
        let out = distill_student(
            &self.global,
            &self.global_spec,
            &t,
            &source,
            &self.cfg.distill,
            &mut stream(self.cfg.seed, "distill", &[]),
        )
        .map_err(|e| e.at_stage("distill", round))?;
        self.global = out.student;
        let g_acc_after = self.global_accuracy()?;
        self.event(
            "distill",
            round,
            "distilled",
            json!({"teacher": teacher, "g_acc_before": g_acc_before, "g_acc_after": g_acc_after}),
            started,
        );
        self.mosaic = Some(MosaicOutcome {
            round,
            generators,
            generator_history,
            prototypes,
            experts,
            teacher,
            distill_curve: out.curve,
            g_acc_before,
            g_acc_after,
        });
        Ok(self.mosaic.as_ref().unwrap())
    }

    pub fn run_warmup(&mut self) -> Result<()> {
        while self.next_round < self.cfg.schedule.warmup_rounds {
            let r = self.next_round;
            self.run_round(Phase::Warmup, 1.0).map_err(|e| e.at_stage("warmup", r))?;
        }
        Ok(())
    }

    /// Runs the remaining schedule from `next_round`.
    pub fn run(&mut self, checkpoints: Option<&Path>) -> Result<()> {
        let s = self.cfg.schedule.clone();
        while self.next_round < s.warmup_rounds {
            let r = self.next_round;
            self.run_round(Phase::Warmup, 1.0).map_err(|e| e.at_stage("warmup", r))?;
            if let Some(dir) = checkpoints {
                if self.next_round == s.warmup_rounds || (s.checkpoint_every > 0 && self.next_round % s.checkpoint_every == 0) {
                    self.save_checkpoint(dir)?;
                }
            }
        }
        let factor = if s.distill {
            if self.mosaic.is_none() {
                self.mosaic_stage()?;
            }
            s.finetune_lr_factor
        } else {
            1.0
        };
        let end = s.warmup_rounds + s.finetune_rounds;
        while self.next_round < end {
            let r = self.next_round;
            self.run_round(Phase::Finetune, factor).map_err(|e| e.at_stage("finetune", r))?;
            if let Some(dir) = checkpoints {
                if s.checkpoint_every > 0 && self.next_round % s.checkpoint_every == 0 {
                    self.save_checkpoint(dir)?;
                }
            }
        }
        Ok(())
    }

    /// Global model, client models and masks after `next_round` rounds.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let r = self.next_round;
        let mut written = Vec::new();
        let g = dir.join(format!("global_r{r}.params"));
        io::save(&g, Some(&self.global_spec), &self.global)?;
        written.push(g);
        for c in &self.clients {
            let p = dir.join(format!("client{}_r{r}.params", c.id));
            io::save(&p, Some(&c.spec), &c.params)?;
            written.push(p);
        }
        let masks: Vec<Option<&SubModelMask>> = self.clients.iter().map(|c| c.mask.as_ref()).collect();
        let m = dir.join(format!("masks_r{r}.json"));
        std::fs::write(&m, serde_json::to_vec_pretty(&masks)?)?;
        written.push(m);
        Ok(written)
    }

    /// Restores global and client models written by [`save_checkpoint`](Self::save_checkpoint).
    pub fn resume(cfg: ExperimentConfig, workers: usize, dir: &Path, round: usize) -> Result<Self> {
        let mut exp = Self::new(cfg, workers)?;
        let g = io::load(&dir.join(format!("global_r{round}.params")))?;
        exp.global_spec.check_params(&g.params)?;
        exp.global = g.params;
        let masks: Vec<Option<SubModelMask>> = serde_json::from_slice(&std::fs::read(dir.join(format!("masks_r{round}.json")))?)?;
        if masks.len() != exp.clients.len() {
            return Err(Error::structure("checkpoint client count differs from the config"));
        }
        for (c, mask) in exp.clients.iter_mut().zip(masks) {
            let ck = io::load(&dir.join(format!("client{}_r{round}.params", c.id)))?;
            let spec = ck.spec.ok_or_else(|| Error::structure("client checkpoint without spec"))?;
            spec.check_params(&ck.params)?;
            c.spec = spec;
            c.params = ck.params;
            c.mask = mask;
        }
        exp.next_round = round;
        Ok(exp)
    }

    /// `round,phase,epoch,g_acc,l_acc,task_loss,kd_loss`; distillation epochs
    /// appear as `distill` rows at the round they ran in.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("round,phase,epoch,g_acc,l_acc,task_loss,kd_loss\n");
        let mosaic_round = self.mosaic.as_ref().map(|m| m.round);
        let mut distill_written = false;
        let write_distill = |s: &mut String| {
            if let Some(m) = &self.mosaic {
                for (e, l) in m.distill_curve.iter().enumerate() {
                    let _ = writeln!(s, "{},distill,{e},,,,{l}", m.round);
                }
                let _ = writeln!(s, "{},distilled,,{},,,", m.round, m.g_acc_after);
            }
        };
        for m in &self.metrics {
            if Some(m.round) == mosaic_round && !distill_written {
                write_distill(&mut s);
                distill_written = true;
            }
            let _ = writeln!(s, "{},{},,{},{},{},", m.round, m.phase.as_str(), m.g_acc, m.l_acc, m.task_loss);
        }
        if !distill_written {
            write_distill(&mut s);
        }
        s
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub rounds: usize,
    pub final_g_acc: Option<f64>,
    pub final_l_acc: Option<f64>,
    pub warmup_g_acc: Option<f64>,
    pub distill_g_acc: Option<f64>,
    pub teacher: Option<TeacherAccuracy>,
    pub test_split_readers: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub version: String,
    pub workers: usize,
    pub status: String,
    pub stage_wall_ms: Vec<(String, f64)>,
    pub artifacts: Vec<String>,
}

fn write_manifest(path: &Path, m: &Manifest) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(m)?)?;
    Ok(())
}

fn stage_times(exp: &Experiment) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = Vec::new();
    for e in &exp.events {
        match out.iter_mut().find(|(s, _)| *s == e.stage) {
            Some((_, t)) => *t += e.wall_ms,
            None => out.push((e.stage.clone(), e.wall_ms)),
        }
    }
    out
}

/// Runs an experiment (optionally resuming from a checkpoint round) and
/// writes `metrics.csv`, `events.jsonl`, `checkpoints/`, `manifest.json`
/// and `report.json` under `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, workers: usize, resume_from: Option<(PathBuf, usize)>) -> Result<RunReport> {
    std::fs::create_dir_all(out)?;
    let ck_dir = out.join("checkpoints");
    let mut manifest = Manifest {
        config: cfg.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        workers,
        status: "running".into(),
        stage_wall_ms: Vec::new(),
        artifacts: Vec::new(),
    };
    write_manifest(&out.join("manifest.json"), &manifest)?;
    let mut exp = match &resume_from {
        Some((dir, round)) => Experiment::resume(cfg.clone(), workers, dir, *round)?,
        None => Experiment::new(cfg.clone(), workers)?,
    };
    let result = exp.run(Some(&ck_dir));
    std::fs::write(out.join("metrics.csv"), exp.metrics_csv())?;
    let mut events = String::new();
    for e in &exp.events {
        events.push_str(&serde_json::to_string(e)?);
        events.push('\n');
    }
    std::fs::write(out.join("events.jsonl"), events)?;
    let mut artifacts = vec!["metrics.csv".to_string(), "events.jsonl".to_string(), "report.json".to_string()];
    if result.is_ok() {
        for p in exp.save_checkpoint(&ck_dir)? {
            artifacts.push(p.strip_prefix(out).unwrap_or(&p).to_string_lossy().into_owned());
        }
    }
    for entry in std::fs::read_dir(&ck_dir).into_iter().flatten().flatten() {
        let rel = Path::new("checkpoints").join(entry.file_name()).to_string_lossy().into_owned();
        if !artifacts.contains(&rel) {
            artifacts.push(rel);
        }
    }
    artifacts.sort();
    let warmup_g_acc = exp
        .metrics
        .iter()
        .rfind(|m| m.phase == Phase::Warmup)
        .map(|m| m.g_acc);
    let report = RunReport {
        rounds: exp.metrics.len(),
        final_g_acc: exp.metrics.last().map(|m| m.g_acc),
        final_l_acc: exp.metrics.last().map(|m| m.l_acc),
        warmup_g_acc,
        distill_g_acc: exp.mosaic.as_ref().map(|m| m.g_acc_after),
        teacher: exp.mosaic.as_ref().map(|m| m.teacher),
        test_split_readers: exp.store.audit.stages(Split::Test),
    };
    std::fs::write(out.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    manifest.status = match &result {
        Ok(()) => "completed".into(),
        Err(e) => format!("failed: {e}"),
    };
    manifest.stage_wall_ms = stage_times(&exp);
    manifest.artifacts = artifacts;
    write_manifest(&out.join("manifest.json"), &manifest)?;
    result.map(|()| report)
}

/// Draws a batch from the generator ensemble of a finished stage (helper
/// for diagnostics).
pub fn ensemble_batch(exp: &Experiment, batch: usize, seed: u64) -> Result<crate::matrix::Matrix> {
    let m = exp
        .mosaic
        .as_ref()
        .ok_or_else(|| Error::config("no generators trained yet"))?;
    let gens: Vec<(usize, &ParamSet)> = m.generators.iter().enumerate().collect();
    Ok(ensemble_sample(&exp.gen_spec, &gens, batch, &mut stream(seed, "ensemble-batch", &[]))?.samples)
}

/// Optimizer used when a caller needs a reference central model.
pub fn central_optimizer(cfg: &ExperimentConfig) -> OptimizerConfig {
    cfg.federation.optimizer
}

/// Ensemble of client generators versus their data-size-weighted parameter
/// average, scored on the same budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeneratorComparison {
    pub pd_ensemble: f64,
    pub pd_aggregated: f64,
    pub silhouette_ensemble: Option<f64>,
    pub silhouette_aggregated: Option<f64>,
    pub kd_ensemble: f64,
    pub kd_aggregated: f64,
    /// Same distillation fed with real training inputs (upper reference).
    pub kd_real: f64,
    pub reference_accuracy: f64,
}

/// A classifier trained centrally on the whole training split; used only as
/// the real-data teacher of [`generator_comparison`].
pub fn train_reference(exp: &Experiment, steps: usize) -> Result<ParamSet> {
    let spec = &exp.global_spec;
    let init = spec.init_params(&mut stream(exp.cfg.seed, "reference-init", &[]));
    let cfg = LocalConfig {
        steps,
        batch_size: 64,
        optimizer: exp.cfg.federation.optimizer,
    };
    let train = exp.store.train("reference");
    Ok(local_update(&init, spec, train, &cfg, &mut stream(exp.cfg.seed, "reference-train", &[]))?.params)
}

pub fn generator_comparison(exp: &Experiment, batch: usize) -> Result<GeneratorComparison> {
    use crate::eval::{kd_transfer_score, pairwise_diversity, silhouette_score};
    use crate::genopt::aggregate_generators_baseline;
    let m = exp
        .mosaic
        .as_ref()
        .ok_or_else(|| Error::config("generators have not been trained"))?;
    let seed = exp.cfg.seed;
    let gens: Vec<(usize, &ParamSet)> = m.generators.iter().enumerate().collect();
    let weights: Vec<f64> = exp.clients.iter().map(|c| c.n() as f64).collect();
    let merged = aggregate_generators_baseline(&gens, &weights)?;
    let ensemble = SampleSource::Ensemble {
        spec: &exp.gen_spec,
        generators: gens.clone(),
    };
    let aggregated = SampleSource::Ensemble {
        spec: &exp.gen_spec,
        generators: vec![(0, &merged)],
    };
    let xe = ensemble.draw(batch, &mut stream(seed, "comparison-batch", &[0]))?;
    let xa = aggregated.draw(batch, &mut stream(seed, "comparison-batch", &[1]))?;
    let (spec, global) = (&exp.global_spec, &exp.global);
    let reference = train_reference(exp, 2000)?;
    let test = exp.store.test("eval");
    let train = exp.store.train("reference");
    let real = SampleSource::Fixed(&train.inputs);
    let cfg = &exp.cfg.distill;
    Ok(GeneratorComparison {
        pd_ensemble: pairwise_diversity(&xe, spec, global)?,
        pd_aggregated: pairwise_diversity(&xa, spec, global)?,
        silhouette_ensemble: silhouette_score(&xe, spec, global)?,
        silhouette_aggregated: silhouette_score(&xa, spec, global)?,
        kd_ensemble: kd_transfer_score(spec, &reference, &ensemble, spec, cfg, test, seed)?,
        kd_aggregated: kd_transfer_score(spec, &reference, &aggregated, spec, cfg, test, seed)?,
        kd_real: kd_transfer_score(spec, &reference, &real, spec, cfg, test, seed)?,
        reference_accuracy: global_accuracy(&reference, spec, test)?,
    })
}
