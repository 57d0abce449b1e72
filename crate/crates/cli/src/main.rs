use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use diracsc_cli::output::OutDir;
use diracsc_cli::{execute, parse_config, CliError, Command};

/// Semiclassical Dirac dynamics, spin transport and trace formula.
#[derive(Debug, Parser)]
#[command(name = "diracsc", version)]
struct Args {
    /// Subcommand to run.
    #[arg(value_enum)]
    command: Command,
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `out` in the configuration).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long)]
    workers: Option<usize>,
    /// RNG seed override.
    #[arg(long)]
    seed: Option<u64>,
}

fn run(args: &Args) -> Result<Vec<String>, CliError> {
    let text = std::fs::read_to_string(&args.config)?;
    let mut cfg = parse_config(&text)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(n) = args.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Io(std::io::Error::other(e)))?;
    }
    let root = args.out.clone().or_else(|| cfg.out.clone().map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("."));
    let mut out = OutDir::create(&root)?;
    let report = execute(&cfg, args.command, &mut out)?;
    let mut lines = report.notices.iter().map(|n| format!("notice: {n}")).collect::<Vec<_>>();
    lines.extend(report.files.iter().map(|f| format!("wrote {}", f.display())));
    Ok(lines)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
