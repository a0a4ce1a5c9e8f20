use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use expert_cfg_cli::commands;
use expert_cfg_cli::{CliError, Overrides};

#[derive(Parser)]
#[command(name = "expert-cfg", version, about = "Expert-guided decoding: batch runs and the review service")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest a JSONL corpus (optionally gzipped) into a store directory.
    Ingest {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate every arm and write metrics.json plus the report CSVs.
    Eval(RunArgs),
    /// Score the gated guided arm over a knob grid.
    Ablate(RunArgs),
    /// Rewrite the report CSVs from a metrics.json.
    Report {
        metrics: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Launch the review service.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write a synthetic world with ready-to-run configs.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Run manifest (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Grid axes, e.g. `alpha=0,0.01;gamma=1.3`.
    #[arg(long)]
    grid: Option<String>,
    /// `top:5` or `threshold:0.4`.
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    /// image, text, sum or union.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            grid: self.grid.clone(),
            policy: self.policy.clone(),
            k: self.k,
            strategy: self.strategy.clone(),
            out: self.out.clone(),
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let written = match cli.command {
        Command::Ingest { input, out } => commands::ingest(&input, &out)?,
        Command::Eval(a) => commands::eval(&a.config, &a.overrides())?,
        Command::Ablate(a) => commands::ablate(&a.config, &a.overrides())?,
        Command::Report { metrics, out } => commands::report(&metrics, out.as_deref())?,
        Command::Serve { config } => {
            commands::serve(&config)?;
            Vec::new()
        }
        Command::Synth { config, seed, out } => commands::synth(config.as_deref(), seed, &out)?,
    };
    for path in written {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
