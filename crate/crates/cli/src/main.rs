//! `lzms`: reproducible runs of the sweep, DFS and unravelling tools.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use commands::{Failure, Run};
use manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(
    name = "lzms",
    version,
    about = "Degenerate Landau-Zener sweeps under Davies-type noise"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat `key = value` run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "lzms-out")]
    pub out: PathBuf,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for sweeps and fits; defaults to the available cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Use the coupling set quoted in the text instead of the figure caption.
    #[arg(long, global = true)]
    pub text_couplings: bool,
}

#[derive(Subcommand, Debug, Clone)]
enum Command {
    /// Population trajectory of one sweep.
    Simulate,
    /// Transfer efficiency over a grid of noise rates.
    Sweep,
    /// Decoherence-free subspace of a noise matrix.
    Dfs,
    /// Estimate the noise matrix from efficiency measurements.
    Unravel {
        /// Measurement CSV; overrides the `data` key.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Invariant checks on the bundled configurations.
    Selftest,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Sweep => "sweep",
            Command::Dfs => "dfs",
            Command::Unravel { .. } => "unravel",
            Command::Selftest => "selftest",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started = Instant::now();
    let common = &cli.common;
    if let Some(n) = common.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("thread pool is configured once");
    }
    if let Err(e) = std::fs::create_dir_all(&common.out) {
        eprintln!("error: cannot create {}: {e}", common.out.display());
        return ExitCode::from(2);
    }

    let mut run = Run::new(common);
    let result = match &cli.command {
        Command::Simulate => commands::simulate(&mut run),
        Command::Sweep => commands::sweep(&mut run),
        Command::Dfs => commands::dfs(&mut run),
        Command::Unravel { data } => commands::unravel(&mut run, data.as_deref()),
        Command::Selftest => commands::selftest(&mut run),
    };
    let exit_code = match &result {
        Ok(()) => 0,
        Err(Failure::Config(_)) => 2,
        Err(Failure::Numerical(_)) => 1,
    };
    let manifest = RunManifest {
        command: cli.command.name().to_string(),
        config_path: common.config.as_ref().map(|p| p.display().to_string()),
        output_dir: common.out.display().to_string(),
        seed: run.seed,
        threads: rayon::current_num_threads(),
        version: lzms_core::VERSION.to_string(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        outputs: run.outputs,
        exit_code,
        error: result.as_ref().err().map(ToString::to_string),
    };
    if let Err(e) = manifest.write(&common.out) {
        eprintln!("error: cannot write manifest: {e}");
        return ExitCode::from(2);
    }
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    ExitCode::from(exit_code)
}
