use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use crop_cli::{commands, exit_code, ExperimentConfig, Method};
use crop_core::CropError;

#[derive(Parser)]
#[command(name = "crop", version, about = "Context-robust personalization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run only this seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one generic model per seed on the generic users.
    TrainGeneric(Common),
    /// Personalize every configured user from the generic models.
    Personalize {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "all")]
        method: Method,
    },
    /// Score saved models per context and write the delta summary.
    Evaluate(Common),
    /// Gradient alignment, Fisher traces and weight maps per stage.
    Diagnose(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig, CropError> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn configure_threads() -> Result<(), CropError> {
    let Ok(raw) = std::env::var("CROP_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CropError::Usage(format!("CROP_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CropError::Usage(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CropError> {
    configure_threads()?;
    match cli.command {
        Command::TrainGeneric(common) => {
            for path in commands::train_generic(&load(&common)?)? {
                println!("{}", path.display());
            }
        }
        Command::Personalize { common, method } => {
            let written = commands::personalize(&load(&common)?, method)?;
            println!("wrote {} files", written.len());
        }
        Command::Evaluate(common) => {
            let cfg = load(&common)?;
            commands::evaluate(&cfg)?;
            let layout = commands::Layout::new(&cfg.out_dir);
            println!("{}", layout.report().display());
            println!("{}", layout.summary().display());
        }
        Command::Diagnose(common) => {
            println!("{}", commands::diagnose(&load(&common)?)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
