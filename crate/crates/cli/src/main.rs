use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::{Args, Parser, Subcommand};

use nmtlab_cli::config::{ExperimentConfig, Stage};
use nmtlab_cli::{run_experiment, run_stage, sweep};

#[derive(Parser)]
#[command(name = "nmtlab", version, about = "Noise-robust translation training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or import the clean train and test corpora.
    Synth(Common),
    /// Inject noise into the training corpus.
    Noise(Common),
    /// Measure filter detection accuracy and score the training corpus.
    FilterEval(Common),
    /// Train one model per configured objective.
    Train(Common),
    /// Evaluate trained models.
    Eval(Common),
    /// Export loss and el2n histograms.
    Stats(Common),
    /// Run every configured stage.
    Run(Common),
    /// Run the experiment once per value of a parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Parameter to vary, e.g. beta, tau or rate.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, num_args = 1..)]
        values: Vec<f64>,
    },
}

fn load(common: &Common) -> Result<Option<ExperimentConfig>> {
    let Some(path) = &common.config else {
        return Ok(None);
    };
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(Some(cfg))
}

fn out_dir(common: &Common, cfg: Option<&ExperimentConfig>) -> Result<PathBuf> {
    common
        .out
        .clone()
        .or_else(|| cfg.and_then(|c| c.out_dir.clone()))
        .ok_or_else(|| anyhow!("no output directory: pass --out or set out_dir"))
}

fn required(cfg: Option<ExperimentConfig>) -> Result<ExperimentConfig> {
    cfg.ok_or_else(|| anyhow!("--config is required"))
}

fn stage(stage: Stage, common: &Common) -> Result<()> {
    let cfg = load(common)?;
    let out = out_dir(common, cfg.as_ref())?;
    if cfg.is_none() && common.seed.is_some() {
        return Err(anyhow!("--seed needs --config"));
    }
    run_stage(stage, cfg.as_ref(), &out, common.force)?;
    println!("{} done: {}", stage.as_str(), out.display());
    Ok(())
}

fn main_inner(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(c) => stage(Stage::Synth, &c),
        Command::Noise(c) => stage(Stage::Noise, &c),
        Command::FilterEval(c) => stage(Stage::FilterEval, &c),
        Command::Train(c) => stage(Stage::Train, &c),
        Command::Eval(c) => stage(Stage::Eval, &c),
        Command::Stats(c) => stage(Stage::Stats, &c),
        Command::Run(c) => {
            let cfg = required(load(&c)?)?;
            let out = out_dir(&c, Some(&cfg))?;
            let m = run_experiment(&cfg, &out, c.force)?;
            println!("run complete: {} artifacts in {}", m.artifacts.len(), out.display());
            Ok(())
        }
        Command::Sweep { common, param, values } => {
            let cfg = required(load(&common)?)?;
            let out = out_dir(&common, Some(&cfg))?;
            let (sm, _) = sweep(&cfg, &param, &values, &out, common.force)?;
            println!("sweep complete: {} runs in {}", sm.runs.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
