use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hyperloc::Error;

mod commands;
mod config;
mod report;

use report::Reporter;

/// Scenario runner: one TOML config per run, reports under the output
/// directory.
#[derive(Parser)]
#[command(name = "hyperloc", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for sweeps.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Linearization at the fixed point and exponent ladder.
    Model,
    /// Resonance lattice for every h of the sweep.
    Lattice,
    /// Trajectory with variational Jacobians and its expansion on Lambda_-.
    Flow,
    /// Phase family phi(t, x, eta') and its large-t expansion.
    Phase,
    /// d_0 factors at (x, y') pairs and J(z) applied to Gaussian data.
    Transition,
    /// Oracle comparisons, resonance match and microlocalization ratios.
    Verify,
    /// FBI transform and phase-space region masses.
    Fbi,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Model => "model",
            Command::Lattice => "lattice",
            Command::Flow => "flow",
            Command::Phase => "phase",
            Command::Transition => "transition",
            Command::Verify => "verify",
            Command::Fbi => "fbi",
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Validation { .. } => 2,
        Error::Io(_) => 1,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(path) = cli.config.clone() else {
        eprintln!("error: --config is required");
        return ExitCode::from(2);
    };
    let loaded = match config::load(&path) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let out = cli.out.clone().unwrap_or_else(|| {
        let d = &loaded.cfg.output_dir;
        if d.is_absolute() {
            d.clone()
        } else {
            loaded.base_dir.join(d)
        }
    });
    let mut rep = Reporter::new(out, cli.command.name(), loaded.hash.clone(), loaded.cfg.seed);
    let ctx = commands::Ctx {
        cfg: loaded.cfg,
        base_dir: loaded.base_dir,
        verbose: cli.verbose,
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.jobs {
        if n == 0 {
            eprintln!("error: invalid jobs: must be positive");
            return ExitCode::from(2);
        }
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    };
    let mut results = serde_json::json!({});
    let outcome = pool.install(|| match cli.command {
        Command::Model => commands::model(&ctx, &mut rep, &mut results),
        Command::Lattice => commands::lattice(&ctx, &mut rep, &mut results),
        Command::Flow => commands::flow(&ctx, &mut rep, &mut results),
        Command::Phase => commands::phase(&ctx, &mut rep, &mut results),
        Command::Transition => commands::transition(&ctx, &mut rep, &mut results),
        Command::Verify => commands::verify(&ctx, &mut rep, &mut results),
        Command::Fbi => commands::fbi(&ctx, &mut rep, &mut results),
    });
    let err = outcome.err();
    if let Err(e) = rep.finish(results, err.as_ref()) {
        eprintln!("error: could not write report: {e}");
        return ExitCode::from(1);
    }
    match err {
        None => ExitCode::SUCCESS,
        Some(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
