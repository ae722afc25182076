//! Config-driven front end: builds surfaces, runs calibrations, prices
//! vanillas and runs the numerical self-checks. Every run leaves a
//! `manifest.toml` in its output directory.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod verify;

use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::commands::Context;
use crate::config::{resolve, RunConfig};
use crate::error::CliError;
use crate::manifest::{sha256_file, write_toml, FileRecord, Manifest, Overrides, Timings, MANIFEST_FILE, TIMINGS_FILE};

#[derive(Debug, Parser)]
#[command(name = "dupire", version, about = "Local and stochastic-local volatility calibration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Caps the number of worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory; overrides `out` in the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the Monte-Carlo path count of the command.
    #[arg(long, global = true)]
    pub paths: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Builds the implied variance surface from the market files.
    BuildSurface,
    /// Calibrates a local-vol surface under the configured rate model.
    CalibrateLv,
    /// Calibrates the leverage function of the stochastic-vol model.
    CalibrateSlv,
    /// Prices calls by simulation.
    Price {
        /// Writes the simulated paths under `<out>/paths`.
        #[arg(long)]
        dump_paths: bool,
    },
    /// Runs the deterministic-rate self-checks.
    Verify {
        /// Writes the solved densities to `<out>/density.csv`.
        #[arg(long)]
        dump_density: bool,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::BuildSurface => "build-surface",
            Command::CalibrateLv => "calibrate-lv",
            Command::CalibrateSlv => "calibrate-slv",
            Command::Price { .. } => "price",
            Command::Verify { .. } => "verify",
        }
    }
}

fn setup(cli: &Cli) -> Result<Context, CliError> {
    let config_path = cli.config.clone().ok_or_else(|| CliError::Usage("--config <path> is required".into()))?;
    let config = RunConfig::load(&config_path)?;
    let config_dir = config_path.parent().map(PathBuf::from).unwrap_or_default();
    let out = match (&cli.out, &config.out) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => resolve(&config_dir, o),
        (None, None) => return Err(CliError::Usage("no output directory: pass --out or set `out`".into())),
    };
    std::fs::create_dir_all(&out).map_err(|source| CliError::Io { path: out.display().to_string(), source })?;
    let config_record = FileRecord {
        name: "config".into(),
        path: config_path.display().to_string(),
        sha256: sha256_file(&config_path)?,
    };
    Ok(Context {
        seed: cli.seed.unwrap_or(config.seed),
        paths: cli.paths,
        config,
        config_dir,
        out,
        inputs: vec![config_record],
        outputs: Vec::new(),
    })
}

fn execute(cmd: Command, ctx: &mut Context) -> Result<(), CliError> {
    match cmd {
        Command::BuildSurface => commands::build_surface(ctx),
        Command::CalibrateLv => commands::calibrate_lv(ctx),
        Command::CalibrateSlv => commands::calibrate_slv(ctx),
        Command::Price { dump_paths } => commands::price(ctx, dump_paths),
        Command::Verify { dump_density } => commands::verify(ctx, dump_density),
    }
}

fn write_manifest(cli: &Cli, ctx: &Context, result: &Result<(), CliError>) -> Result<(), CliError> {
    let mut outputs = Vec::new();
    for f in &ctx.outputs {
        let p = ctx.out.join(f);
        if p.exists() {
            outputs.push(FileRecord { name: f.clone(), path: f.clone(), sha256: sha256_file(&p)? });
        }
    }
    let manifest = Manifest {
        command: cli.command.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        status: if result.is_ok() { "ok" } else { "failed" }.to_string(),
        error: result.as_ref().err().map(ToString::to_string),
        seed: ctx.seed,
        overrides: Overrides { seed: cli.seed, paths: cli.paths },
        inputs: ctx.inputs.clone(),
        outputs,
    };
    write_toml(&ctx.out.join(MANIFEST_FILE), &manifest)
}

/// Runs one command and returns the process exit status. Diagnostics go to
/// stderr.
pub fn run(cli: &Cli) -> i32 {
    let start = Instant::now();
    let mut ctx = match setup(cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    if let Some(n) = cli.threads.or(ctx.config.threads) {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = execute(cli.command, &mut ctx);
    let mut code = match &result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    let timings = Timings {
        command: cli.command.name().to_string(),
        wall_seconds: start.elapsed().as_secs_f64(),
        threads: rayon::current_num_threads(),
    };
    let written = write_manifest(cli, &ctx, &result).and_then(|_| write_toml(&ctx.out.join(TIMINGS_FILE), &timings));
    if let Err(e) = written {
        eprintln!("error: {e}");
        code = code.max(1);
    }
    code
}
