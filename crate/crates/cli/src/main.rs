//! `volreg` command-line front end.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 divergence. Every
//! failure prints a JSON object `{"error": {"code": ..., "message": ...}}` on
//! stdout; with `--quiet` stdout carries JSON only.

mod bundle;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use volreg::RegError;

#[derive(Debug, Parser)]
#[command(name = "volreg", version, about = "Coupled affine + deformable 3D registration")]
struct Cli {
    /// Worker threads for voxel-level parallelism (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Print only machine-readable JSON on stdout.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic registration problem.
    Synth(SynthArgs),
    /// Register a moving volume onto a reference volume.
    Register(RegisterArgs),
    /// Warp a volume with a stored grid.
    Warp(WarpArgs),
    /// Score a stored grid with masks and/or landmarks.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Volume size as `N` or `NZ,NY,NX`.
    #[arg(long, value_parser = parse_dims)]
    pub dims: [usize; 3],
    /// Deformation strength in `[0, 1)`.
    #[arg(long, default_value_t = 0.2)]
    pub strength: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Perturb only the affine part of the ground truth.
    #[arg(long)]
    pub affine_only: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub moving: PathBuf,
    /// JSON optimizer configuration; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed recorded in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, requires = "mask_reference")]
    pub mask_moving: Option<PathBuf>,
    #[arg(long, requires = "mask_moving")]
    pub mask_reference: Option<PathBuf>,
    #[arg(long, requires = "landmarks_mov")]
    pub landmarks_ref: Option<PathBuf>,
    #[arg(long, requires = "landmarks_ref")]
    pub landmarks_mov: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct WarpArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Grid prefix: `DIR/STEM` reads `DIR/STEM_{z,y,x}.raw`.
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Treat the input as a binary mask (re-thresholded at 0.5).
    #[arg(long)]
    pub mask: bool,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("metrics").multiple(true).required(true))]
pub struct EvalArgs {
    /// Grid prefix: `DIR/STEM` reads `DIR/STEM_{z,y,x}.raw`.
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long, group = "metrics", requires = "mask_mov")]
    pub mask_ref: Option<PathBuf>,
    #[arg(long, requires = "mask_ref")]
    pub mask_mov: Option<PathBuf>,
    #[arg(long, group = "metrics", requires = "landmarks_mov")]
    pub landmarks_ref: Option<PathBuf>,
    #[arg(long, requires = "landmarks_ref")]
    pub landmarks_mov: Option<PathBuf>,
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split([',', 'x']).map(str::trim).collect();
    let parsed: Vec<usize> = parts
        .iter()
        .map(|p| p.parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parsed[..] {
        [n] => Ok([n; 3]),
        [z, y, x] => Ok([z, y, x]),
        _ => Err(format!("expected N or NZ,NY,NX, got {s:?}")),
    }
}

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_DIVERGENCE: u8 = 4;

fn print_error(code: &str, message: &str, extra: Option<serde_json::Value>) {
    let mut err = json!({ "code": code, "message": message });
    if let Some(extra) = extra {
        err["details"] = extra;
    }
    println!("{}", json!({ "error": err }));
}

fn report_failure(e: &RegError, quiet: bool) -> ExitCode {
    if !quiet {
        eprintln!("error: {e}");
    }
    let extra = match e {
        RegError::Divergence { iterations, trace } => {
            Some(json!({ "iterations": iterations, "loss_trace": trace }))
        }
        _ => None,
    };
    print_error(e.code(), &e.to_string(), extra);
    ExitCode::from(match e {
        RegError::Divergence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_DATA,
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            print_error("usage", &e.kind().to_string(), None);
            return ExitCode::from(EXIT_USAGE);
        }
    };

    env_logger::Builder::from_env(
        env_logger::Env::default().default_filter_or(if cli.quiet { "error" } else { "warn" }),
    )
    .init();

    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            print_error("usage", &e.to_string(), None);
            return ExitCode::from(EXIT_USAGE);
        }
    }

    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Register(a) => commands::register(a),
        Command::Warp(a) => commands::warp(a),
        Command::Eval(a) => commands::eval(a),
    };
    match result {
        Ok(out) => {
            if cli.quiet {
                println!("{}", out.json);
            } else {
                print!("{}", out.human);
            }
            ExitCode::SUCCESS
        }
        Err(e) => report_failure(&e, cli.quiet),
    }
}
