use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use tmim_core::metrics::EvalReport;
use tmim_core::model::TaskId;
use tmim_core::pipeline::{self, RunConfig, Start};
use tmim_core::trainer::Stage;
use tmim_core::Error;

/// Text-aware masked image modeling for scene text removal.
#[derive(Parser, Debug)]
#[command(name = "tmim", version)]
struct Cli {
    /// Flat TOML config; unset keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (for `infer`, the output image).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue an interrupted run from its checkpoint.
    #[arg(long, conflicts_with = "init")]
    resume: Option<PathBuf>,
    /// Stop after this many optimizer steps in total.
    #[arg(long)]
    max_steps: Option<u64>,
    /// Start from this checkpoint's weights with a fresh optimizer.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic train/test corpus with clean targets.
    Synth,
    /// Two-stream pretraining from detection annotations only.
    Pretrain(TrainArgs),
    /// Supervised text-erasing training; fresh init unless --init is given.
    Finetune(TrainArgs),
    /// Score a checkpoint against clean targets.
    Eval {
        checkpoint: PathBuf,
        /// Defaults to the configured test manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "TE")]
        task: TaskId,
        /// Score only the (dilated) annotated text regions.
        #[arg(long)]
        region_only: bool,
    },
    /// Remove text from one image.
    Infer { checkpoint: PathBuf, image: PathBuf },
}

fn resolve_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn train(cli: &Cli, mut cfg: RunConfig, args: &TrainArgs, stage: Stage) -> anyhow::Result<()> {
    if let Some(e) = args.epochs {
        match stage {
            Stage::Pretrain => cfg.pretrain_epochs = e,
            Stage::Finetune => cfg.finetune_epochs = e,
        }
    }
    let start = match (&args.resume, &args.init) {
        (Some(p), _) => Start::Resume(p.clone()),
        (None, Some(p)) => Start::Init(p.clone()),
        (None, None) => {
            if stage == Stage::Finetune {
                eprintln!("no --init checkpoint: starting from a fresh init (seed {})", cfg.seed);
            }
            Start::Fresh
        }
    };
    let default = match stage {
        Stage::Pretrain => "runs/pretrain",
        Stage::Finetune => "runs/finetune",
    };
    let out = out_dir(cli, default);
    let outcome = pipeline::train(&cfg, stage, &start, &out, args.max_steps)?;
    println!(
        "{} steps; checkpoint {}; losses {}",
        outcome.steps,
        outcome.checkpoint.display(),
        outcome.loss_csv.display()
    );
    Ok(())
}

fn print_reports(model: &EvalReport, identity: &EvalReport) {
    print!("{}", EvalReport::table(&[("model", *model), ("identity", *identity)]));
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let mut cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Synth => {
            let out = out_dir(cli, "corpus");
            cfg.data_dir = out.clone();
            let corpus = pipeline::synth(&cfg, &out)?;
            println!("train {}\ntest {}", corpus.train.display(), corpus.test.display());
        }
        Command::Pretrain(args) => train(cli, cfg, args, Stage::Pretrain)?,
        Command::Finetune(args) => train(cli, cfg, args, Stage::Finetune)?,
        Command::Eval {
            checkpoint,
            manifest,
            task,
            region_only,
        } => {
            let out = out_dir(cli, "runs/eval");
            let r = pipeline::eval(&cfg, checkpoint, manifest.as_deref(), *task, *region_only, &out)?;
            print_reports(&r.model, &r.identity);
            println!("report {}", r.report_csv.display());
        }
        Command::Infer { checkpoint, image } => {
            let out = cli.out.clone().unwrap_or_else(|| default_infer_path(image));
            pipeline::infer(checkpoint, image, &out).with_context(|| format!("inferring {}", image.display()))?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn default_infer_path(image: &Path) -> PathBuf {
    let stem = image.file_stem().unwrap_or_default().to_string_lossy();
    image.with_file_name(format!("{stem}_erased.png"))
}

/// 1 usage, 2 data, 3 numeric failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::NonFinite(_)) => 3,
        Some(Error::Config(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
