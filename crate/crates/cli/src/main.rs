//! `duet`: contact retargeting, composition, animation, rendering and
//! evaluation of a gaussian human-object pair.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use duet_core::render::RenderSettings;
use serde::Serialize;

use commands::{RenderSpec, Runtime, Source, StageRun};
use error::CliError;
use manifest::Scene;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  other failure (I/O, internal)
  2  contact not found: no gaussian passes the label threshold
  3  validation: manifest, asset, config or checkpoint rejected before compute
  4  provider transport: sidecar unreachable or malformed response
  5  numeric: non-finite values or divergence

Environment:
  DUET_SIDECAR_URL  base URL replacing every HTTP or `sidecar` provider
  RUST_LOG          log filter (default: info)";

#[derive(Debug, Parser)]
#[command(name = "duet", version, about, after_help = EXIT_CODES)]
struct Cli {
    /// Scene manifest (JSON).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Stage config override as dotted.key=value (JSON value or bare string); repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Overrides the stage seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for rendering (1 keeps everything on the main thread).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Single-threaded execution regardless of --threads.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Continue from the latest checkpoint of the stage.
    #[arg(long)]
    resume: bool,
    /// Stop after this many completed steps (checkpointed), as if interrupted.
    #[arg(long, hide = true)]
    stop_after: Option<usize>,
}

#[derive(Debug, Args)]
struct SourceArgs {
    /// Checkpoint directory ({out}/{stage}/{step}) to read instead of the latest.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Ignore animation checkpoints (identity residual, no deformation field).
    #[arg(long)]
    canonical: bool,
    /// Treat the manifest object as already placed; no compose checkpoint needed.
    #[arg(long)]
    placed_object: bool,
}

impl From<SourceArgs> for Source {
    fn from(a: SourceArgs) -> Self {
        Source { checkpoint: a.checkpoint, canonical: a.canonical, placed_object: a.placed_object }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Segment the body part in a frontal render and initialize the object translation.
    Contact,
    /// Stage 1: place the object with spatial-aware SDS.
    Compose {
        #[command(flatten)]
        run: RunArgs,
        /// Anchor the object at the origin instead of the contact report's T_init.
        #[arg(long)]
        skip_contact: bool,
    },
    /// Stage 2: animate the composed pair with the correspondence loss and joint SDS.
    Animate {
        #[command(flatten)]
        run: RunArgs,
        /// Treat the manifest object as already placed; no compose checkpoint needed.
        #[arg(long)]
        placed_object: bool,
    },
    /// Render a checkpoint as a turntable or from a fixed camera.
    Render {
        #[command(flatten)]
        source: SourceArgs,
        /// Evenly spaced views around the target.
        #[arg(long)]
        turntable: Option<usize>,
        /// Azimuth in degrees (start angle of a turntable).
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        azimuth: f64,
        /// Elevation in degrees.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        elevation: f64,
        /// Camera distance; defaults to the compose sampling radius.
        #[arg(long)]
        radius: Option<f64>,
        /// Square image size in pixels.
        #[arg(long, default_value_t = 256)]
        size: usize,
        /// Motion frames to pose (comma separated); omitted renders the static composite.
        #[arg(long, value_delimiter = ',')]
        frames: Vec<usize>,
        /// Also export every frame as PLY with an animation manifest.
        #[arg(long)]
        ply: bool,
    },
    /// Per-frame penetration, correspondence loss and rigidity deviation.
    Eval {
        #[command(flatten)]
        source: SourceArgs,
    },
    /// Write the bundled procedural assets and a manifest into a directory.
    Fixtures {
        dir: PathBuf,
    },
}

fn print_json(v: &impl Serialize) {
    match serde_json::to_string_pretty(v) {
        Ok(s) => println!("{s}"),
        Err(e) => log::error!("cannot print result: {e}"),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = if cli.deterministic { 1 } else { cli.threads.max(1) };
    if threads > 1 {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().map_err(|e| CliError::Other(e.to_string()))?;
    }
    let rt = Runtime { settings: RenderSettings { parallel: threads > 1, ..Default::default() }, seed: cli.seed, overrides: cli.set };
    if let Command::Fixtures { dir } = &cli.command {
        let written = commands::cmd_fixtures(dir)?;
        print_json(&written);
        return Ok(());
    }
    let path = cli.manifest.ok_or_else(|| CliError::Validation("--manifest is required".into()))?;
    let scene = Scene::load(&path)?;
    match cli.command {
        Command::Contact => print_json(&commands::cmd_contact(&scene, &rt)?),
        Command::Compose { run, skip_contact } => {
            print_json(&commands::cmd_compose(&scene, &rt, &StageRun { resume: run.resume, stop_after: run.stop_after }, skip_contact)?)
        }
        Command::Animate { run, placed_object } => {
            print_json(&commands::cmd_animate(&scene, &rt, &StageRun { resume: run.resume, stop_after: run.stop_after }, placed_object)?)
        }
        Command::Render { source, turntable, azimuth, elevation, radius, size, frames, ply } => {
            let spec = RenderSpec { turntable, azimuth, elevation, radius, size, frames, ply };
            print_json(&commands::cmd_render(&scene, &rt, &source.into(), &spec)?)
        }
        Command::Eval { source } => print_json(&commands::cmd_eval(&scene, &rt, &source.into())?),
        Command::Fixtures { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
