//! Command-line front end: train a detector, evaluate arms against the
//! classical baselines, or reproduce a bundled experiment panel end to end.
//!
//! Exit codes: 0 success, 1 runtime failure (training abort, I/O), 2 usage
//! or config error (bad flags, invalid config, incompatible checkpoint).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use defined::checkpoint;
use defined::config::{ConfigError, ExperimentConfig};
use defined::eval::{evaluate, ArmKind};
use defined::model::Model;
use defined::report::{emit_report, sha256_file, sha256_hex, EvalReport};
use defined::train::{train, StepInfo};

/// Bundled reproduction panels (compiled in, so `repro` works from any
/// working directory; the same files ship under `configs/`).
const PANELS: &[(&str, &str)] = &[
    ("fig4a", include_str!("../../configs/fig4a.json")),
    ("fig4b", include_str!("../../configs/fig4b.json")),
    ("fig4c", include_str!("../../configs/fig4c.json")),
    ("fig4d", include_str!("../../configs/fig4d.json")),
    ("fig4e", include_str!("../../configs/fig4e.json")),
    ("fig4f", include_str!("../../configs/fig4f.json")),
];

#[derive(Parser)]
#[command(
    name = "defined",
    version,
    about = "Decision-feedback in-context symbol detection workbench"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a detector from an experiment config.
    Train(TrainArgs),
    /// Evaluate detector arms and write the CSV + JSON report.
    Eval(EvalArgs),
    /// Reproduce a bundled panel end to end (train, then evaluate all arms).
    Repro(ReproArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Shrink to the CI-scale smoke profile.
    #[arg(long)]
    smoke: bool,
    /// Replace the training seed (parameter init and stochastic feedback).
    #[arg(long)]
    seed_override: Option<u64>,
    /// Output directory; overrides DEFINED_OUT_DIR and the config's value.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Trained checkpoint; needed by the icl and df arms.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated arms: icl,df,mmse,mmse_df,csi.
    #[arg(long, default_value = "icl,df,mmse,mmse_df,csi")]
    arms: String,
    /// Shrink to the CI-scale smoke profile.
    #[arg(long)]
    smoke: bool,
    /// Replace the evaluation stream seed.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Worker threads (0 = all cores); never changes results.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory; overrides DEFINED_OUT_DIR and the config's value.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ReproArgs {
    /// Panel name: fig4a..fig4f.
    panel: String,
    /// Run the CI-scale smoke profile instead of the full experiment.
    #[arg(long)]
    smoke: bool,
    /// Worker threads for the evaluation stage.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory; overrides DEFINED_OUT_DIR and the config's value.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

enum CliError {
    /// Bad invocation or config: exit 2.
    Usage(String),
    /// The run itself failed: exit 1.
    Runtime(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Repro(args) => cmd_repro(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

/// Flag > DEFINED_OUT_DIR > config > "out", with the experiment id as a
/// per-run subdirectory.
fn resolve_out_dir(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    flag.or_else(|| std::env::var_os("DEFINED_OUT_DIR").map(PathBuf::from))
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
        .join(&cfg.experiment_id)
}

fn load_config(path: &PathBuf, smoke: bool) -> Result<(ExperimentConfig, String), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if smoke {
        cfg.apply_smoke();
    }
    Ok((cfg, sha256_hex(text.as_bytes())))
}

fn print_step(info: &StepInfo) {
    if info.phase_step == 1 || info.phase_step % 100 == 0 || info.phase_step == info.phase_len {
        println!(
            "{} step {}/{} loss {:.4} lr {:.3e}",
            info.phase, info.phase_step, info.phase_len, info.loss, info.lr
        );
    }
}

fn run_training(cfg: &ExperimentConfig, dir: &PathBuf) -> Result<defined::train::TrainOutcome, CliError> {
    println!(
        "training {} ({:?} {}x{}, {} + {} steps, batch {})",
        cfg.experiment_id,
        cfg.sim.scheme,
        cfg.sim.n_r,
        cfg.sim.n_t,
        cfg.train.pretrain_steps,
        cfg.train.finetune_steps,
        cfg.train.batch
    );
    let outcome = train(&cfg.sim, cfg.model.clone(), &cfg.train, dir, print_step)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    if let Some(loss) = outcome.final_loss {
        println!("final loss {loss:.4}");
    }
    println!("checkpoint: {}", outcome.final_checkpoint.display());
    Ok(outcome)
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let (mut cfg, _hash) = load_config(&args.config, args.smoke)?;
    if let Some(seed) = args.seed_override {
        cfg.train.seed = seed;
    }
    let dir = resolve_out_dir(args.out_dir, &cfg);
    run_training(&cfg, &dir)?;
    Ok(())
}

struct LoadedModel {
    model: Option<Model>,
    checkpoint_hash: Option<String>,
}

fn load_model_for(
    cfg: &ExperimentConfig,
    arms: &[ArmKind],
    checkpoint: Option<&PathBuf>,
) -> Result<LoadedModel, CliError> {
    let Some(path) = checkpoint else {
        if let Some(arm) = arms.iter().find(|a| a.needs_model()) {
            return Err(CliError::Usage(format!(
                "arm {} needs --checkpoint",
                arm.label()
            )));
        }
        return Ok(LoadedModel {
            model: None,
            checkpoint_hash: None,
        });
    };
    let (header, store) = checkpoint::load(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    if header.model != cfg.model {
        return Err(CliError::Usage(format!(
            "checkpoint/config mismatch: {} holds {:?} but the config wants {:?}",
            path.display(),
            header.model,
            cfg.model
        )));
    }
    let model = Model::from_store(cfg.model.clone(), store)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let hash = sha256_file(path).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(LoadedModel {
        model: Some(model),
        checkpoint_hash: Some(hash),
    })
}

fn run_eval(
    cfg: &ExperimentConfig,
    arms: &[ArmKind],
    model: Option<&Model>,
    checkpoint_hash: Option<String>,
    config_hash: Option<String>,
    dir: &PathBuf,
) -> Result<(), CliError> {
    println!(
        "evaluating {} over {} prompts: {}",
        cfg.experiment_id,
        cfg.eval.n_prompts,
        arms.iter().map(|a| a.label()).collect::<Vec<_>>().join(",")
    );
    let total_frames = cfg.eval.n_prompts;
    let stride = (total_frames / 10).max(1);
    let outcome = evaluate(&cfg.sim, &cfg.eval, arms, model, |done, total| {
        if done == total || done % stride < defined::eval::EVAL_CHUNK {
            println!("  {done}/{total} frames");
        }
    })
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    let report = EvalReport::from_outcome(
        cfg.experiment_id.clone(),
        cfg.sim.clone(),
        outcome,
        cfg.eval.seed,
        cfg.eval.n_prompts,
        cfg.eval.pilots,
        cfg.eval.workers,
        checkpoint_hash,
        config_hash,
    );
    for curve in &report.arms {
        if let Some(last) = curve.points.last() {
            println!(
                "  {} SER {:.4} at context {} ({} points)",
                curve.arm,
                last.ser(),
                last.context_len,
                curve.points.len()
            );
        }
    }
    for (arm, g) in &report.gains {
        println!("  gain {arm}: {g:.3}");
    }
    let paths = emit_report(&report, dir).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("report: {}", paths.csv.display());
    println!("report: {}", paths.json.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let (mut cfg, config_hash) = load_config(&args.config, args.smoke)?;
    if let Some(seed) = args.seed_override {
        cfg.eval.seed = seed;
    }
    if let Some(workers) = args.workers {
        cfg.eval.workers = workers;
    }
    let arms = ArmKind::parse_list(&args.arms).map_err(CliError::Usage)?;
    let loaded = load_model_for(&cfg, &arms, args.checkpoint.as_ref())?;
    let dir = resolve_out_dir(args.out_dir, &cfg);
    run_eval(
        &cfg,
        &arms,
        loaded.model.as_ref(),
        loaded.checkpoint_hash,
        Some(config_hash),
        &dir,
    )
}

fn cmd_repro(args: ReproArgs) -> Result<(), CliError> {
    let Some((_, text)) = PANELS.iter().find(|(name, _)| *name == args.panel) else {
        let known: Vec<&str> = PANELS.iter().map(|(n, _)| *n).collect();
        return Err(CliError::Usage(format!(
            "unknown panel {:?}; expected one of {}",
            args.panel,
            known.join(", ")
        )));
    };
    let mut cfg = ExperimentConfig::from_json(text)?;
    if args.smoke {
        cfg.apply_smoke();
    }
    if let Some(workers) = args.workers {
        cfg.eval.workers = workers;
    }
    let dir = resolve_out_dir(args.out_dir, &cfg);
    let outcome = run_training(&cfg, &dir)?;
    let hash =
        sha256_file(&outcome.final_checkpoint).map_err(|e| CliError::Runtime(e.to_string()))?;
    let arms = [
        ArmKind::Icl,
        ArmKind::Df,
        ArmKind::Mmse,
        ArmKind::MmseDf,
        ArmKind::Csi,
    ];
    run_eval(
        &cfg,
        &arms,
        Some(&outcome.model),
        Some(hash),
        Some(sha256_hex(text.as_bytes())),
        &dir,
    )
}
