//! `drivekit`: command-line driver for the desk-scale driving-scene toolkit.
//!
//! Exit codes: 0 on success, 1 on validation errors (bad flags, bad config,
//! malformed inputs), 2 on stage failures (I/O or computation errors inside a
//! pipeline stage).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use commands::CliError;

#[derive(Parser)]
#[command(name = "drivekit", version, about = "Desk-scale driving-scene pipeline")]
struct Cli {
    /// Print per-stage progress to stderr.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a procedural scene: layout, trajectory, rig, LiDAR clouds.
    Synth {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        /// Number of rig cameras.
        #[arg(long, default_value_t = 3)]
        views: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Voxelize a point cloud into a BEV feature grid.
    Voxelize {
        #[arg(long = "in")]
        input: PathBuf,
        /// "default" or x_min,x_max,y_min,y_max,z_min,z_max,cell_size,n_z_bins.
        #[arg(long, default_value = "default")]
        spec: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode a feature grid to a latent (or decode a latent with --decode).
    Encode {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "default")]
        spec: String,
        #[arg(long)]
        out: PathBuf,
        /// Treat the input as a latent and write the decoded occupancy grid.
        #[arg(long)]
        decode: bool,
    },
    /// Ray-march an occupancy grid back into a point cloud.
    Render {
        #[arg(long)]
        grid: PathBuf,
        /// "default" or azimuths,rings,max_range.
        #[arg(long, default_value = "default")]
        pattern: String,
        #[arg(long)]
        out: PathBuf,
        /// Spatial skipping: on or off (results are identical either way).
        #[arg(long, default_value = "on")]
        skip: String,
        /// Sensor height above the grid origin, meters.
        #[arg(long, default_value_t = commands::SENSOR_HEIGHT)]
        height: f64,
    },
    /// Rasterize a scene layout into per-view control maps.
    Project {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        rig: PathBuf,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Lift-splat an image feature map into a BEV plane.
    Splat {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long, default_value = "default")]
        spec: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Integrate the learned flow from noise to a sample.
    Sample {
        /// Tensor-container directory holding model tensors "a" and "b".
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 16)]
        steps: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Optional conditioning tensors (a "bias" tensor is added to the field).
        #[arg(long)]
        cond: Option<PathBuf>,
        /// Sample dimensionality.
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Caption utilities.
    Caption {
        #[command(subcommand)]
        cmd: CaptionCmd,
    },
    /// Evaluation utilities.
    Eval {
        #[command(subcommand)]
        cmd: EvalCmd,
    },
    /// Run the full pipeline from a key=value config file.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum CaptionCmd {
    /// Score clips and print the kept ids as JSON.
    Score {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        tau: f64,
    },
    /// Fuse per-view captions into one caption file.
    Fuse {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Chamfer distance at the 1, 2 and 3 second horizons.
    Chamfer {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Frame rate of the cloud sequences, Hz.
        #[arg(long)]
        rate: f64,
        /// "default" or x0,x1,y0,y1,z0,z1.
        #[arg(long, default_value = "default")]
        volume: String,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let verbose = cli.verbose;
    match cli.cmd {
        Cmd::Synth { seed, frames, views, out } => {
            commands::cmd_synth(seed, frames, views, &out, verbose)
        }
        Cmd::Voxelize { input, spec, out } => commands::cmd_voxelize(&input, &spec, &out, verbose),
        Cmd::Encode { input, spec, out, decode } => commands::cmd_encode(&input, &spec, &out, decode),
        Cmd::Render { grid, pattern, out, skip, height } => {
            commands::cmd_render(&grid, &pattern, &out, &skip, height)
        }
        Cmd::Project { scene, rig, frame, out } => commands::cmd_project(&scene, &rig, frame, &out),
        Cmd::Splat { features, calib, spec, out } => {
            commands::cmd_splat(&features, &calib, &spec, &out)
        }
        Cmd::Sample { model, steps, seed, cond, dim, out } => {
            commands::cmd_sample(&model, steps, seed, cond.as_deref(), dim, &out)
        }
        Cmd::Caption { cmd } => match cmd {
            CaptionCmd::Score { input, tau } => {
                let report = commands::cmd_caption_score(&input, tau)?;
                println!("{report}");
                Ok(())
            }
            CaptionCmd::Fuse { input, out } => commands::cmd_caption_fuse(&input, &out),
        },
        Cmd::Eval { cmd } => match cmd {
            EvalCmd::Chamfer { pred, gt, rate, volume } => {
                let report = commands::cmd_eval_chamfer(&pred, &gt, rate, &volume)?;
                println!("{report}");
                Ok(())
            }
        },
        Cmd::Run { config, seed, out } => {
            commands::cmd_run(config.as_deref(), seed, out.as_deref(), verbose)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CliError::Validation(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e @ CliError::Stage { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
