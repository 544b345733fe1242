use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mamo_core::dataset::Setting;
use mamo_core::experiment::{cmd_eval, cmd_make_data, cmd_repro, cmd_train, ExperimentManifest, Overrides};
use mamo_core::query::Scheme;
use mamo_core::train::Algorithm;
use mamo_core::Result;

/// Complex query answering with meta-learned projection operators.
#[derive(Debug, Parser)]
#[command(name = "mamo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the graph split and few-shot dataset under --out.
    MakeData {
        #[command(flatten)]
        common: Common,
        /// Overwrite an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Train one model on the dataset under --out.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the run's checkpoint if one exists.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint and write result tables.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; defaults to the configured run's.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the full comparison for a setting end to end.
    Repro {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// Manifest file (JSON, or TOML with a .toml extension).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse::<Setting>)]
    setting: Option<Setting>,
    #[arg(long, value_parser = parse::<Algorithm>)]
    algorithm: Option<Algorithm>,
    #[arg(long, value_parser = parse::<Scheme>)]
    scheme: Option<Scheme>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse<T: std::str::FromStr<Err = mamo_core::Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: mamo_core::Error| e.to_string())
}

impl Common {
    fn manifest(&self) -> Result<ExperimentManifest> {
        let mut m = match &self.config {
            Some(p) => ExperimentManifest::load(p)?,
            None => ExperimentManifest::default(),
        };
        m.apply(&Overrides {
            setting: self.setting,
            algorithm: self.algorithm,
            scheme: self.scheme,
            seed: self.seed,
            out: self.out.clone(),
        });
        Ok(m)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeData { common, force } => {
            let m = common.manifest()?;
            cmd_make_data(&m, force)?;
            println!("dataset written to {}", m.data_dir().display());
        }
        Command::Train { common, resume } => {
            let m = common.manifest()?;
            let ck = cmd_train(&m, resume)?;
            println!("{} steps; checkpoint {}", ck.step, m.checkpoint_path().display());
        }
        Command::Eval { common, checkpoint } => {
            let m = common.manifest()?;
            let table = cmd_eval(&m, checkpoint.as_deref(), common.scheme)?;
            print!("{}", table.to_text());
        }
        Command::Repro { common } => {
            let m = common.manifest()?;
            let outcome = cmd_repro(&m)?;
            print!("{}", outcome.table.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
