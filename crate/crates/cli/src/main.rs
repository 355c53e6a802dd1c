use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use faircon::evaluation::{self, EvalSplit};
use faircon::experiment::{self, ExperimentConfig, SweepConfig};
use faircon::network::Checkpoint;
use faircon::trainers::{Method, TrainedModel};

/// Fair supervised contrastive learning experiments.
#[derive(Debug, Parser)]
#[command(name = "faircon", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic train/dev/test embedding files.
    Generate(Overrides),
    /// Train and evaluate the configured method over several seeds.
    Train(Overrides),
    /// Evaluate a saved checkpoint.
    Evaluate(EvaluateArgs),
    /// Train one model per value of a hyperparameter.
    Sweep(SweepArgs),
    /// Compile experiment directories into comparison.csv.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct Overrides {
    /// TOML experiment file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// ce, inlp, adv, con, con_ft, ce+scl or ce-fcl.
    #[arg(long)]
    method: Option<String>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Overrides,
    #[arg(long)]
    checkpoint: PathBuf,
    /// dev or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Also write reps_<split>.csv for every split.
    #[arg(long)]
    export_reps: bool,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Overrides,
    /// axis=v1,v2,... with axis one of beta, tau, lambda, iterations.
    #[arg(long)]
    sweep: Option<String>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Experiment output directories, one per method.
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
    #[arg(long, default_value = "comparison.csv")]
    out: PathBuf,
}

/// Resolved config plus the directory relative data paths are read from.
struct Loaded {
    cfg: ExperimentConfig,
    base: PathBuf,
}

impl Overrides {
    fn load(&self) -> Result<Loaded> {
        let (mut cfg, base) = match &self.config {
            Some(path) => {
                let cfg = ExperimentConfig::load(path)?;
                let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
                (cfg, base)
            }
            None => (ExperimentConfig::default(), PathBuf::new()),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(runs) = self.runs {
            cfg.runs = runs;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(workers) = self.workers {
            cfg.workers = workers;
        }
        if let Some(tag) = &self.method {
            let method = Method::from_tag(tag).with_context(|| format!("unknown method {tag:?}"))?;
            cfg.train.set_method(method);
        }
        cfg.validate()?;
        Ok(Loaded { cfg, base })
    }
}

fn generate(args: &Overrides) -> Result<()> {
    let Loaded { cfg, base } = args.load()?;
    if cfg.data.files.is_some() {
        bail!("data.files is set; generate only writes synthetic data");
    }
    let data = cfg.data.load(cfg.seed, &base)?;
    experiment::write_dataset(&data, &cfg.out)?;
    eprintln!(
        "wrote {} train, {} dev, {} test instances to {}",
        data.train.len(),
        data.dev.len(),
        data.test.len(),
        cfg.out.display()
    );
    Ok(())
}

fn train(args: &Overrides) -> Result<()> {
    let Loaded { cfg, base } = args.load()?;
    let data = cfg.data.load(cfg.seed, &base)?;
    eprintln!("training {} over {} runs", cfg.train.method, cfg.runs);
    let summary = experiment::run_experiment(&cfg, &data)?;
    eprintln!(
        "accuracy {:.4}±{:.4}  gap {:.4}  leakage@h {:.4}  leakage@y {:.4}  -> {}",
        summary.accuracy.mean,
        summary.accuracy.std,
        summary.gap.mean,
        summary.leakage_h.mean,
        summary.leakage_yhat.mean,
        cfg.out.display()
    );
    Ok(())
}

fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let Loaded { cfg, base } = args.common.load()?;
    let split = match args.split.as_str() {
        "dev" => EvalSplit::Dev,
        "test" => EvalSplit::Test,
        other => bail!("--split must be dev or test, not {other:?}"),
    };
    let data = cfg.data.load(cfg.seed, &base)?;
    let model = TrainedModel::from_checkpoint(cfg.train.method, Checkpoint::load(&args.checkpoint)?);
    let report = evaluation::evaluate(&model, &data, split, None, &cfg.eval.probe, cfg.seed)?;
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let path = cfg.out.join(format!("eval_{}.json", args.split));
    std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    if args.export_reps {
        evaluation::export_representations(&model, &data, &cfg.out)?;
    }
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn sweep(args: &SweepArgs) -> Result<()> {
    let Loaded { cfg, base } = args.common.load()?;
    let sweep = match (&args.sweep, &cfg.sweep) {
        (Some(spec), _) => SweepConfig::parse(spec)?,
        (None, Some(s)) => s.clone(),
        (None, None) => bail!("no sweep given; pass --sweep axis=v1,v2,... or add a [sweep] table"),
    };
    let data = cfg.data.load(cfg.seed, &base)?;
    let result = experiment::run_sweep(&cfg, &data, &sweep)?;
    let chosen = &result.points[result.selected];
    eprintln!(
        "{} points, {} on the frontier; selected {:?}={} (dev accuracy {:.4}, dev gap {:.4}) -> {}",
        result.points.len(),
        result.frontier.len(),
        result.axis,
        chosen.value,
        chosen.dev.accuracy,
        chosen.dev.gap,
        cfg.out.display()
    );
    Ok(())
}

fn report(args: &ReportArgs) -> Result<()> {
    let rows = experiment::write_report(&args.dirs, &args.out)?;
    print!("{}", experiment::comparison_csv(&rows));
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => report(a),
    }
}
