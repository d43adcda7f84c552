use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mfg_gcg::cli::{run_file, sweep, Overrides};
use mfg_gcg::config::read_config;
use mfg_gcg::gcg::StepSchedule;
use mfg_gcg::Error;

/// Conditional gradient / fictitious play solver for potential mean field games.
///
/// Log verbosity is read from MFG_GCG_LOG (error, warn, info, debug, trace).
#[derive(Parser)]
#[command(name = "mfg-gcg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        config: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
    /// Run every *.toml in a directory and write comparison.csv.
    Sweep {
        dir: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
    /// Load and check a configuration, then print it with defaults filled in.
    Validate {
        config: PathBuf,
        #[command(flatten)]
        flags: Flags,
    },
}

#[derive(Args)]
struct Flags {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of iterations.
    #[arg(long)]
    iters: Option<usize>,
    /// Monte Carlo seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Step schedule: fw, fp or const:<delta>.
    #[arg(long, value_parser = parse_schedule)]
    schedule: Option<StepSchedule>,
}

fn parse_schedule(s: &str) -> Result<StepSchedule, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Flags {
    fn overrides(self) -> Overrides {
        Overrides {
            out: self.out,
            iters: self.iters,
            seed: self.seed,
            schedule: self.schedule,
        }
    }
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::Run { config, flags } => {
            let summary = run_file(&config, &flags.overrides())?;
            println!(
                "{}: k = {}, exploitability = {:e}, primal gap = {}",
                summary.config.run.out.display(),
                summary.last.k,
                summary.last.exploitability,
                summary.last.primal_gap.map_or("n/a".into(), |e| format!("{e:e}"))
            );
            Ok(())
        }
        Command::Sweep { dir, flags } => {
            let rows = sweep(&dir, &flags.overrides())?;
            let mut worst = None;
            for r in &rows {
                println!("{}: {}", r.config, r.status);
                if r.exit_code != 0 && worst.as_ref().is_none_or(|(c, _)| r.exit_code < *c) {
                    worst = Some((r.exit_code, r.status.clone()));
                }
            }
            match worst {
                Some((2, msg)) => Err(Error::InvariantBreach(msg)),
                Some((_, msg)) => Err(Error::Config(msg)),
                None => Ok(()),
            }
        }
        Command::Validate { config, flags } => {
            let mut cfg = read_config(&config)?;
            flags.overrides().apply(&mut cfg);
            let report = cfg.validate()?;
            print!("{}", cfg.to_toml()?);
            println!(
                "# drift check: probe CFL {:.4}, a priori CFL {:.4}, positivity factor {:.4}",
                report.probe_courant, report.bound_courant, report.probe_positivity
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MFG_GCG_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
