use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sqlab::cli::{parse_config_with_seed, run_all, Mode, RunConfig};
use sqlab::czd::{demo_decomposition, describe, write_decomposition};
use sqlab::verify::CheckId;

#[derive(Parser)]
#[command(name = "sqlab", about = "Kernel audits and inequality checks for multilinear square functions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Configuration file (`section.key = value` lines)
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `run.out`
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed; overrides `run.seed` for items without their own seed
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; overrides `run.jobs`
    #[arg(long)]
    jobs: Option<usize>,
    /// Comma-separated check ids to run
    #[arg(long, value_delimiter = ',')]
    only: Option<Vec<String>>,
}

#[derive(Subcommand)]
enum Command {
    /// Kernel condition audits only
    Audit(RunArgs),
    /// Inequality checks only
    Check(RunArgs),
    /// Audits, then checks
    Run(RunArgs),
    /// Print the worked Calderón–Zygmund decomposition
    DemoCzd {
        /// Also write JSON and CSV exports here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the version
    Version,
}

fn load(args: &RunArgs) -> Result<(RunConfig, Option<Vec<CheckId>>), String> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| format!("{}: {e}", args.config.display()))?;
    let mut cfg = parse_config_with_seed(&text, args.seed).map_err(|e| format!("{}:\n{e}", args.config.display()))?;
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    if let Some(jobs) = args.jobs {
        if jobs == 0 {
            return Err("--jobs must be at least 1".into());
        }
        cfg.jobs = jobs;
    }
    let only = match &args.only {
        Some(ids) => Some(ids.iter().map(|s| s.parse::<CheckId>()).collect::<Result<Vec<_>, _>>().map_err(|e| e.to_string())?),
        None => None,
    };
    Ok((cfg, only))
}

fn execute(args: &RunArgs, mode: Mode) -> ExitCode {
    let (cfg, only) = match load(args) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run_all(&cfg, mode, only.as_deref()) {
        Ok(outcome) => {
            for r in &outcome.rows {
                println!("{:<26} {:<20} {:<5} C={:.4e} stability={:.3}", r.check_id, r.kernel, r.verdict, r.constant, r.stability);
            }
            println!("summary: {}", cfg.out.join("summary.csv").display());
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Audit(args) => execute(&args, Mode::Audit),
        Command::Check(args) => execute(&args, Mode::Check),
        Command::Run(args) => execute(&args, Mode::Run),
        Command::DemoCzd { out } => {
            let d = match demo_decomposition() {
                Ok(d) => d,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            print!("{}", describe(&d));
            if let Some(dir) = out {
                if let Err(e) = write_decomposition(&d, &dir, "demo") {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            }
            ExitCode::SUCCESS
        }
        Command::Version => {
            println!("sqlab {}", env!("CARGO_PKG_VERSION"));
            ExitCode::SUCCESS
        }
    }
}
