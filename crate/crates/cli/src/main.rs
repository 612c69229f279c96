use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use mosaic_core::config::ExperimentConfig;
use mosaic_core::data::partition_stats;
use mosaic_core::runner::{load_data, run_experiment};
use mosaic_core::verify::{run_suite, Suite};

#[derive(Parser, Debug)]
#[command(name = "mosaic", version, about = "Federated distillation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct RunArgs {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `<MOSAIC_OUT>/<config name>-s<seed>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Parallel client updates (results do not depend on it).
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Root for default output directories.
    #[arg(long, env = "MOSAIC_OUT", default_value = "runs")]
    out_root: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum SuiteArg {
    Gradcheck,
    Aggregation,
    Theorem,
    Losses,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the full schedule and write metrics, events, checkpoints and reports.
    Run(RunArgs),
    /// Run verification suites; exits nonzero when any check fails.
    Verify {
        #[arg(value_enum)]
        suite: SuiteArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Partition the training set and print per-client label statistics.
    PartitionStats(RunArgs),
    /// Resume from the warm-up checkpoint of an earlier run and redo the
    /// generator, teacher, distillation and fine-tune stages.
    DistillOnly {
        #[command(flatten)]
        run: RunArgs,
        /// Directory holding `global_r<T>.params` and the client checkpoints.
        #[arg(long)]
        from: PathBuf,
        /// Checkpoint round; defaults to the config's warm-up length.
        #[arg(long)]
        round: Option<usize>,
    },
}

fn load_config(args: &RunArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(args: &RunArgs, cfg: &ExperimentConfig, tag: &str) -> PathBuf {
    if let Some(o) = &args.out {
        return o.clone();
    }
    let stem = args
        .config
        .as_deref()
        .and_then(Path::file_stem)
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "default".into());
    args.out_root.join(format!("{stem}{tag}-s{}", cfg.seed))
}

fn run(args: &RunArgs, resume: Option<(PathBuf, usize)>) -> anyhow::Result<()> {
    let cfg = load_config(args)?;
    let tag = if resume.is_some() { "-distill" } else { "" };
    let out = out_dir(args, &cfg, tag);
    let report = run_experiment(&cfg, &out, args.workers, resume)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    eprintln!("artifacts in {}", out.display());
    Ok(())
}

fn verify(suite: SuiteArg, seed: u64, out: Option<&Path>) -> anyhow::Result<bool> {
    let name = match suite {
        SuiteArg::Gradcheck => "gradcheck",
        SuiteArg::Aggregation => "aggregation",
        SuiteArg::Theorem => "theorem",
        SuiteArg::Losses => "losses",
        SuiteArg::All => "all",
    };
    let mut reports = Vec::new();
    for s in Suite::parse_list(name)? {
        let r = run_suite(s, seed)?;
        eprintln!("{:<12} {}  ({:.0} ms)", s.name(), if r.pass { "PASS" } else { "FAIL" }, r.wall_ms);
        for c in r.failures() {
            eprintln!("  failed: {}", c.name);
        }
        reports.push(r);
    }
    let pass = reports.iter().all(|r| r.pass);
    let json = serde_json::to_string_pretty(&serde_json::json!({"pass": pass, "suites": reports}))?;
    if let Some(p) = out {
        std::fs::write(p, &json).with_context(|| format!("writing {}", p.display()))?;
    }
    println!("{json}");
    Ok(pass)
}

fn partition(args: &RunArgs) -> anyhow::Result<()> {
    let cfg = load_config(args)?;
    let store = load_data(&cfg)?;
    let f = &cfg.federation;
    let p = mosaic_core::data::dirichlet_partition(store.train_labels(), f.clients, f.omega, cfg.seed)?;
    let stats = partition_stats(&p, store.train_labels(), store.num_classes());
    if let Some(o) = &args.out {
        std::fs::create_dir_all(o)?;
        std::fs::write(o.join("partition.csv"), stats.to_csv())?;
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "clients": f.clients,
            "omega": f.omega,
            "sizes": stats.sizes,
            "min_size": stats.min_size,
            "max_size": stats.max_size,
            "label_entropy": stats.label_entropy,
            "mean_label_entropy": stats.mean_label_entropy,
            "top2_mass": stats.top2_mass,
        }))?
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(&a, None),
        Command::Verify { suite, seed, out } => match verify(suite, seed, out.as_deref()) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
        Command::PartitionStats(a) => partition(&a),
        Command::DistillOnly { run: a, from, round } => (|| {
            let cfg = load_config(&a)?;
            let r = round.unwrap_or(cfg.schedule.warmup_rounds);
            if !cfg.schedule.distill {
                bail!("distill-only needs schedule.distill = true");
            }
            run(&a, Some((from, r)))
        })(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
