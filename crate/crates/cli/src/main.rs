//! `idf`: fit, mesh, evaluate, transfer and verify implicit displacement
//! fields from the command line.
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use idf_core::IdfError;

#[derive(Parser)]
#[command(name = "idf", version, about = "Implicit displacement fields on oriented point clouds")]
struct Cli {
    /// Worker threads; 0 lets the runtime decide. A deterministic config forces 1.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum NormalChoice {
    Face,
    Vertex,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum PrecisionChoice {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum AnalyticChoice {
    Plane,
    Sphere,
}

#[derive(Subcommand)]
pub enum Command {
    /// Normalize a mesh into the unit cube and sample an oriented cloud.
    Prepare {
        mesh: PathBuf,
        out: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = NormalChoice::Face)]
        normals: NormalChoice,
        /// Also write the normalization transform as JSON.
        #[arg(long)]
        transform_out: Option<PathBuf>,
    },
    /// Train a base and displacement pair from a config file.
    Fit {
        config: PathBuf,
        /// Train the base alone on its own loss.
        #[arg(long)]
        base_only: bool,
        #[arg(long)]
        no_tanh_bound: bool,
        #[arg(long)]
        no_attenuation: bool,
        #[arg(long)]
        no_progressive: bool,
    },
    /// Extract the zero level set of a saved model.
    Mesh {
        model: PathBuf,
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        resolution: usize,
        #[arg(long, default_value_t = idf_core::model::DEFAULT_RESOLUTION_CAP)]
        max_resolution: usize,
        /// Mesh the base surface instead of the composed one.
        #[arg(long)]
        base_only: bool,
        #[arg(long, value_enum, default_value_t = PrecisionChoice::F32)]
        precision: PrecisionChoice,
        /// Map the mesh back through a transform written by `prepare`.
        #[arg(long)]
        denormalize: Option<PathBuf>,
    },
    /// Two-way point and normal metrics between meshes or clouds; JSON on stdout.
    Eval {
        a: PathBuf,
        b: PathBuf,
        /// Samples drawn from each mesh input.
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Penalize flipped normals instead of ignoring orientation.
        #[arg(long)]
        signed_normals: bool,
    },
    /// Fit a source, learn its detail and apply it to a target base.
    Transfer { config: PathBuf },
    /// Check the normal perturbation bounds on a base field.
    Verify {
        /// Model bundle; its base network is checked.
        #[arg(long, conflicts_with = "analytic", required_unless_present = "analytic")]
        model: Option<PathBuf>,
        #[arg(long, value_enum)]
        analytic: Option<AnalyticChoice>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest displacement; defaults to the model's bound.
        #[arg(long)]
        alpha: Option<f64>,
        /// Sample near these points instead of the whole cube.
        #[arg(long)]
        cloud: Option<PathBuf>,
        #[arg(long, default_value_t = 0.02)]
        jitter: f64,
    },
    /// Print the default config with every key.
    Defaults,
}

pub fn exit_code(e: &IdfError) -> u8 {
    match e {
        IdfError::NonFinite(_) | IdfError::Numeric(_) | IdfError::DegenerateNormal { .. } | IdfError::InapplicableBound(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command, cli.threads) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
