use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use relufair_cli::commands::{cmd_audit, cmd_linearize, cmd_mitigate, cmd_report, cmd_theory, cmd_train};
use relufair_cli::{exit_code, ConfigError, ExperimentConfig, RunOptions};

#[derive(Debug, Parser)]
#[command(name = "relufair", version, about = "Group-fairness audits of ReLU-linearized networks")]
struct Cli {
    /// Experiment config (TOML). Optional for `theory`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; RELUFAIR_OUT takes precedence.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated seeds replacing the config's list.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Worker threads; seeds run in parallel.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Skip distillation after linearization.
    #[arg(long, global = true)]
    no_finetune: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the all-ReLU base model (and the scratch model) per seed.
    Train,
    /// Linearize base models at every configured budget.
    Linearize {
        /// Linearize this checkpoint instead of each seed's base model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fairness-constrained fine-tuning of linearized models.
    Mitigate {
        /// Linearized student checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Teacher checkpoint; defaults to `base.ckpt.json` beside the student.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Per-group audit report, CSV and figures.
    Audit {
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', requires = "base")]
        candidates: Vec<PathBuf>,
    },
    /// Approximation rates and linear-region counts.
    Theory {
        /// Function names, comma-separated (square, exp, softplus).
        #[arg(long = "fn", value_delimiter = ',')]
        functions: Option<Vec<String>>,
        /// Segment counts, comma-separated.
        #[arg(long, value_delimiter = ',')]
        ns: Option<Vec<usize>>,
    },
    /// Full pipeline: train, linearize, mitigate, audit, theory.
    Report,
}

fn options(cli: &Cli) -> anyhow::Result<RunOptions> {
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None if matches!(cli.command, Command::Theory { .. }) => ExperimentConfig::toy(),
        None => {
            return Err(ConfigError {
                field: "--config".into(),
                message: "this command needs a config file".into(),
            }
            .into())
        }
    };
    if let Some(seeds) = &cli.seeds {
        config.seeds = seeds.clone();
        config.validate()?;
    }
    let out = std::env::var_os("RELUFAIR_OUT")
        .map(PathBuf::from)
        .or_else(|| cli.out.clone())
        .unwrap_or_else(|| config.output_dir.clone());
    let mut opts = RunOptions::new(config);
    opts.out = out;
    opts.jobs = cli.jobs;
    opts.no_finetune = cli.no_finetune;
    std::fs::create_dir_all(&opts.out)
        .map_err(|e| relufair::Error::Io {
            path: opts.out.clone(),
            source: e,
        })
        .context("creating the output directory")?;
    Ok(opts)
}

fn run(cli: &Cli) -> anyhow::Result<PathBuf> {
    let opts = options(cli)?;
    match &cli.command {
        Command::Train => cmd_train(&opts),
        Command::Linearize { checkpoint } => cmd_linearize(&opts, checkpoint.as_deref()),
        Command::Mitigate { checkpoint, teacher } => cmd_mitigate(&opts, checkpoint.as_deref(), teacher.as_deref()),
        Command::Audit { base, candidates } => cmd_audit(&opts, base.as_deref(), candidates),
        Command::Theory { functions, ns } => cmd_theory(&opts, functions.as_deref(), ns.as_deref()),
        Command::Report => cmd_report(&opts),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(manifest) => {
            println!("{}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
