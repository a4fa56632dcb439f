use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bsd2dtn::{exit_code, Command, Context, ExperimentConfig, EXIT_CHECK_FAILED, EXIT_OK, EXIT_USAGE};

#[derive(Parser)]
#[command(name = "bsd2dtn", version, about = "Boundary spectral data to Dirichlet-to-Neumann maps")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; falls back to BSD2DTN_THREADS, then all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print the resolved plan and exit without computing.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Dirichlet eigenpairs and boundary fluxes of every coefficient.
    Eigs,
    /// Elliptic DtN maps by the direct and series routes.
    Dtn,
    /// Hyperbolic boundary traces by time stepping and the series formula.
    Wave,
    /// BSD distance functionals between two records.
    Delta,
    /// Identity and bound checks.
    Verify,
    /// Perturbation sweep against the matching distance functional.
    Sweep,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Eigs => Command::Eigs,
            Cmd::Dtn => Command::Dtn,
            Cmd::Wave => Command::Wave,
            Cmd::Delta => Command::Delta,
            Cmd::Verify => Command::Verify,
            Cmd::Sweep => Command::Sweep,
        }
    }
}

fn threads(cli: &Cli) -> Result<Option<usize>, String> {
    let n = match cli.threads {
        Some(n) => Some(n),
        None => match std::env::var("BSD2DTN_THREADS") {
            Ok(s) => Some(s.trim().parse::<usize>().map_err(|_| format!("BSD2DTN_THREADS = '{s}' is not a count"))?),
            Err(_) => None,
        },
    };
    match n {
        Some(0) => Err("thread count must be at least 1".into()),
        n => Ok(n),
    }
}

fn run(cli: Cli) -> i32 {
    let usage = |msg: String| {
        eprintln!("error: {msg}");
        EXIT_USAGE
    };
    let Some(path) = cli.config.clone() else {
        return usage("--config PATH is required".into());
    };
    let n = match threads(&cli) {
        Ok(n) => n,
        Err(m) => return usage(m),
    };
    if let Some(n) = n {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return usage(e.to_string());
        }
    }
    let config = match ExperimentConfig::load(&path) {
        Ok(c) => c,
        Err(e) => return usage(format!("{}: {e}", path.display())),
    };
    let base = path.parent().map(PathBuf::from).unwrap_or_default();
    let ctx = Context::new(config, base, cli.out.clone(), cli.seed);
    let cmd = Command::from(cli.cmd);
    if cli.dry_run {
        return match ctx.plan(cmd) {
            Ok(lines) => {
                for l in lines {
                    println!("{l}");
                }
                match ctx.config.to_json() {
                    Ok(j) => println!("{j}"),
                    Err(e) => return usage(e.to_string()),
                }
                EXIT_OK
            }
            Err(e) => usage(e.to_string()),
        };
    }
    match ctx.run(cmd) {
        Ok(outcome) => {
            for r in &outcome.reports {
                for l in r.summary_lines() {
                    println!("{l}");
                }
            }
            eprintln!("wrote {} file(s) to {}", outcome.files.len(), ctx.out.display());
            if outcome.pass() {
                EXIT_OK
            } else {
                EXIT_CHECK_FAILED
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    ExitCode::from(run(cli) as u8)
}
