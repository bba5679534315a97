//! `dmiforge`: run the weak-supervision experiment pipeline or any single
//! stage of it. Configuration is one JSON file; flags override the fields
//! that vary between invocations. Exit codes: 0 success, 1 usage error,
//! 2 data error, 3 training divergence.

use std::io::Write as IoWrite;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use dmiforge_core::corpus::load_e2e_csv;
use dmiforge_core::eval::evaluate_model;
use dmiforge_core::models::{DecodeMode, ModelSet};
use dmiforge_core::parallel::configure_threads;
use dmiforge_core::pipeline::{
    pipeline, run_stage, PipelineConfig, PipelineError, Stage, StageError,
};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;

#[derive(Parser)]
#[command(
    name = "dmiforge",
    version,
    about = "Weakly supervised joint data-to-text generation and understanding"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every stage and requested baseline for every configured seed.
    Pipeline(PipelineArgs),
    /// Write value-swapped MR variants for one seed.
    Augment(StageArgs),
    /// Produce weakly annotated pairs for the unlabeled MR pool.
    Annotate(StageArgs),
    /// Train the teacher on the clean pairs.
    TrainTeacher(StageArgs),
    /// Keep weak pairs whose round-trip slot score clears the threshold.
    Filter(StageArgs),
    /// Pretrain the student on the kept weak pairs (step 1).
    PretrainStudent(StageArgs),
    /// Score clean and kept pairs with the teacher's dual mutual information.
    Score(StageArgs),
    /// Fine-tune the student with DMI quality weights (step 2).
    Finetune(StageArgs),
    /// Evaluate the trained models, or one checkpoint via --ckpt/--test.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct StageArgs {
    /// Pipeline configuration JSON.
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Seed to run; defaults to the first seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    common: StageArgs,
    /// Comma-separated baseline override; an empty value disables them all.
    #[arg(long, value_name = "LIST")]
    baselines: Option<String>,
    /// Consistency filter threshold override.
    #[arg(long, value_name = "T")]
    filter_threshold: Option<f64>,
    /// Optimization step cap override.
    #[arg(long, value_name = "N")]
    max_steps: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Pipeline configuration JSON (omit when scoring a checkpoint).
    #[arg(long, value_name = "FILE", required_unless_present = "ckpt")]
    config: Option<PathBuf>,
    /// Seed to evaluate; defaults to the first seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory override (config mode) or metrics JSON destination
    /// (checkpoint mode; stdout when omitted).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Saved checkpoint to score directly against --test.
    #[arg(long, value_name = "FILE", conflicts_with = "config", requires = "test")]
    ckpt: Option<PathBuf>,
    /// Test CSV with mr,ref columns for checkpoint scoring.
    #[arg(long, value_name = "FILE", requires = "ckpt")]
    test: Option<PathBuf>,
    /// Beam width for checkpoint scoring; 1 decodes greedily.
    #[arg(long, value_name = "W", default_value_t = 1)]
    beam: usize,
}

fn main() -> ExitCode {
    init_logging();
    init_threads();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}

fn init_logging() {
    let env = env_logger::Env::default().default_filter_or("info");
    env_logger::Builder::from_env(env)
        .format(|buf, record| {
            writeln!(
                buf,
                "{} {} {} {}",
                buf.timestamp_seconds(),
                record.level(),
                record.target(),
                record.args()
            )
        })
        .init();
}

fn init_threads() {
    let Ok(value) = std::env::var("DMIFORGE_THREADS") else {
        return;
    };
    match value.parse::<usize>() {
        Ok(n) if n >= 1 => {
            if !configure_threads(n) {
                log::warn!(target: "cli", "thread cap {} not applied", n);
            }
        }
        _ => log::warn!(
            target: "cli",
            "DMIFORGE_THREADS={:?} is not a positive integer; ignored",
            value
        ),
    }
}

fn exit_code(err: &PipelineError) -> u8 {
    if err.is_divergence() {
        EXIT_DIVERGENCE
    } else if matches!(err, PipelineError::BadConfig(_)) {
        EXIT_USAGE
    } else {
        EXIT_DATA
    }
}

fn stage_err<E: Into<StageError>>(stage: &'static str) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        source: e.into(),
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.cmd {
        Cmd::Pipeline(args) => cmd_pipeline(args),
        Cmd::Augment(args) => cmd_stage(args, Stage::Augment),
        Cmd::Annotate(args) => cmd_stage(args, Stage::Annotate),
        Cmd::TrainTeacher(args) => cmd_stage(args, Stage::Teacher),
        Cmd::Filter(args) => cmd_stage(args, Stage::Filter),
        Cmd::PretrainStudent(args) => cmd_stage(args, Stage::Student),
        Cmd::Score(args) => cmd_stage(args, Stage::Score),
        Cmd::Finetune(args) => cmd_stage(args, Stage::Finetune),
        Cmd::Evaluate(args) => cmd_evaluate(args),
    }
}

fn stage_config(args: &StageArgs) -> Result<(PipelineConfig, u64), PipelineError> {
    let mut cfg = PipelineConfig::from_json_file(&args.config)?;
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    let seed = args.seed.unwrap_or(cfg.seeds[0]);
    Ok((cfg, seed))
}

fn cmd_stage(args: StageArgs, stage: Stage) -> Result<(), PipelineError> {
    let (cfg, seed) = stage_config(&args)?;
    for file in run_stage(&cfg, seed, stage)? {
        println!("{}", file.display());
    }
    Ok(())
}

fn cmd_pipeline(args: PipelineArgs) -> Result<(), PipelineError> {
    let mut cfg = PipelineConfig::from_json_file(&args.common.config)?;
    if let Some(out) = &args.common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = args.common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(list) = &args.baselines {
        cfg.baselines = list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_owned)
            .collect();
    }
    if let Some(t) = args.filter_threshold {
        cfg.filter_threshold = t;
    }
    if let Some(n) = args.max_steps {
        cfg.train.max_steps = n;
    }
    cfg.validate()?;
    let outcome = pipeline(&cfg)?;
    for (id, stats) in &outcome.aggregate.runs {
        println!(
            "{}: bleu {:.4} +/- {:.4}, joint {:.4} +/- {:.4}, f1 {:.4} (n={})",
            id,
            stats.mean_bleu,
            stats.stddev_bleu,
            stats.mean_joint_accuracy,
            stats.stddev_joint_accuracy,
            stats.mean_f1,
            stats.n
        );
    }
    println!("{}", cfg.out_dir.join("aggregate.json").display());
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), PipelineError> {
    if let Some(ckpt) = &args.ckpt {
        let test_path = args.test.as_ref().expect("clap enforces --test with --ckpt");
        let model = ModelSet::load(ckpt).map_err(stage_err("evaluate"))?;
        let load = load_e2e_csv(test_path).map_err(stage_err("evaluate"))?;
        if !load.skipped.is_empty() {
            log::warn!(target: "evaluate", "skipped {} unparseable rows", load.skipped.len());
        }
        let mode = if args.beam <= 1 {
            DecodeMode::Greedy
        } else {
            DecodeMode::Beam(args.beam)
        };
        let report =
            evaluate_model(&model, &load.dataset.pairs, mode).map_err(stage_err("evaluate"))?;
        let json = serde_json::to_string_pretty(&report).map_err(stage_err("evaluate"))? + "\n";
        match &args.out {
            Some(path) => std::fs::write(path, json).map_err(stage_err("evaluate"))?,
            None => print!("{}", json),
        }
        return Ok(());
    }
    let config = args.config.clone().expect("clap enforces --config");
    cmd_stage(
        StageArgs {
            config,
            seed: args.seed,
            out: args.out.clone(),
        },
        Stage::Evaluate,
    )
}
