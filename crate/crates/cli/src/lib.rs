//! `poselab` command line and HTTP service.

pub mod commands;
pub mod error;
pub mod fixture;
pub mod server;
pub mod store;

use std::ffi::OsString;
use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use poselab_core::io::{load_json, load_model, load_pixel_keypoints};
use poselab_core::labelgen::{BoardSpec, DrConfig, MixRatio};
use poselab_core::synth::{SessionConfig, SynthConfig};
use poselab_core::CameraIntrinsics;
use serde::Serialize;
use serde_json::Value;

use crate::commands::{Branch, EstimateArgs, InitArgs};
use crate::error::{CliError, CliResult};
use crate::fixture::FixtureConfig;
use crate::store::ProjectStore;

#[derive(Debug, Parser)]
#[command(name = "poselab", version, about = "Keypoint-based 6-DoF pose labels and estimates")]
pub struct Cli {
    /// Project directory.
    #[arg(long, global = true, env = "POSELAB_PROJECT", default_value = ".")]
    pub project: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BranchArg {
    Pnp,
    Procrustes,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create a project in DIR.
    Init {
        dir: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        keypoints: PathBuf,
        #[arg(long)]
        intrinsics: PathBuf,
        /// Inner-corner grid and square size in meters, `RxC:size`.
        #[arg(long)]
        board: BoardSpec,
        #[arg(long)]
        id: Option<String>,
    },
    /// Register the PNG frames of a directory as a session.
    ImportFrames {
        session: String,
        image_dir: PathBuf,
        /// Directory holding `<frame>.txt` board corner files.
        #[arg(long)]
        corners: Option<PathBuf>,
    },
    /// Store clicked keypoints (`id u v` per line) for a frame.
    Annotate {
        frame: String,
        file: PathBuf,
        #[arg(long)]
        annotator: Option<String>,
    },
    /// Triangulate the annotated keypoints of a session.
    Triangulate { session: String },
    /// Solve the object pose in the marker frame.
    SolveObject { session: String },
    /// Propagate labels to every frame of a session.
    Label { session: String },
    /// Composite labeled cut-outs onto random backgrounds.
    Randomize {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write the training set.
    Export {
        /// `real:dr`; defaults to the project setting.
        #[arg(long)]
        ratio: Option<MixRatio>,
        #[arg(long)]
        out: PathBuf,
        /// Total item count.
        #[arg(long)]
        target: Option<usize>,
    },
    /// Estimate the object pose in one image.
    Estimate {
        #[arg(long)]
        image_keypoints: PathBuf,
        #[arg(long)]
        cloud: Option<PathBuf>,
        #[arg(long, value_enum)]
        branch: BranchArg,
        #[arg(long)]
        icp: bool,
        /// Mesh file; the project model is used otherwise.
        #[arg(long, requires = "model_keypoints")]
        model: Option<PathBuf>,
        #[arg(long, requires = "model")]
        model_keypoints: Option<PathBuf>,
        /// Camera intrinsics JSON; the project intrinsics are used otherwise.
        #[arg(long)]
        intrinsics: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate synthetic data.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Score estimates against ground truth.
    Eval {
        /// Scene directory from `synth scene`.
        #[arg(long, requires = "estimates", conflicts_with_all = ["estimate", "truth"])]
        scene: Option<PathBuf>,
        /// JSON object mapping frame ids to poses.
        #[arg(long)]
        estimates: Option<PathBuf>,
        #[arg(long, requires = "truth")]
        estimate: Option<PathBuf>,
        #[arg(long, requires = "estimate")]
        truth: Option<PathBuf>,
    },
    /// Run the HTTP API.
    Serve {
        #[arg(long, env = "POSELAB_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
    },
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// Pose-estimation scene: frames, keypoints and a point cloud.
    Scene {
        #[arg(long)]
        out: PathBuf,
        /// JSON scene configuration; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        noise_px: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Label-generation session: rendered frames, corners and annotations.
    Session {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        frames: usize,
        #[arg(long, default_value_t = 0.5)]
        corner_noise_px: f64,
        #[arg(long, default_value_t = 5)]
        annotated: usize,
        #[arg(long, default_value_t = 0.0)]
        annotation_noise_px: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn to_value<T: Serialize>(v: T) -> Value {
    serde_json::to_value(v).expect("plain struct")
}

fn require(path: &Option<PathBuf>, field: &str) -> CliResult<PathBuf> {
    path.clone().ok_or_else(|| CliError::usage(format!("--{field} is required")))
}

/// Runs a parsed command and returns the JSON printed on success.
pub fn execute(cli: Cli) -> CliResult<Value> {
    let open = || ProjectStore::open(&cli.project);
    match cli.command {
        Command::Init { dir, model, keypoints, intrinsics, board, id } => commands::init(&InitArgs {
            dir: &dir,
            mesh: &model,
            keypoints: &keypoints,
            intrinsics: &intrinsics,
            board,
            project_id: id,
        }),
        Command::ImportFrames { session, image_dir, corners } => {
            Ok(to_value(commands::import_frames(&open()?, &session, &image_dir, corners.as_deref())?))
        }
        Command::Annotate { frame, file, annotator } => commands::annotate(&open()?, &frame, &file, annotator),
        Command::Triangulate { session } => Ok(to_value(commands::triangulate(&open()?, &session)?)),
        Command::SolveObject { session } => Ok(to_value(commands::solve_object(&open()?, &session)?)),
        Command::Label { session } => commands::label(&open()?, &session),
        Command::Randomize { config } => {
            let store = open()?;
            let mut cfg: DrConfig = load_json(&config)?;
            // Backgrounds are named relative to the config file.
            if let Some(d) = cfg.background_dir.as_mut().filter(|d| d.is_relative()) {
                let base = config.parent().unwrap_or(Path::new(""));
                *d = std::path::absolute(base.join(&*d)).map_err(CliError::from)?;
            }
            commands::randomize(&store, cfg)
        }
        Command::Export { ratio, out, target } => commands::export(&open()?, ratio, &out, target),
        Command::Estimate { image_keypoints, cloud, branch, icp, model, model_keypoints, intrinsics, seed } => {
            let keypoints = load_pixel_keypoints(&image_keypoints)?;
            let (model, intr) = match (model, model_keypoints, intrinsics) {
                (Some(m), Some(k), Some(i)) => (load_model(&m, &k)?, load_json::<CameraIntrinsics>(&i)?),
                (m, k, i) => {
                    let store = open()?;
                    let snap = store.load()?;
                    let model = match (m, k) {
                        (Some(m), Some(k)) => load_model(&m, &k)?,
                        _ => store.model(&snap.manifest)?,
                    };
                    let intr = match i {
                        Some(i) => load_json(&i)?,
                        None => snap.manifest.intrinsics,
                    };
                    (model, intr)
                }
            };
            let est = commands::estimate(&EstimateArgs {
                keypoints: &keypoints,
                model: &model,
                intrinsics: &intr,
                cloud: cloud.as_deref(),
                branch: match branch {
                    BranchArg::Pnp => Branch::Pnp,
                    BranchArg::Procrustes => Branch::Procrustes,
                },
                icp,
                seed,
            })?;
            let mut v = to_value(est);
            v["schema_version"] = Value::from(poselab_core::SCHEMA_VERSION);
            Ok(v)
        }
        Command::Synth(SynthCommand::Scene { out, config, frames, noise_px, seed }) => {
            let mut cfg: SynthConfig = match config {
                Some(p) => load_json(&p)?,
                None => SynthConfig::default(),
            };
            if let Some(n) = frames {
                cfg.n_frames = n;
            }
            if let Some(n) = noise_px {
                cfg.noise_px = n;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            commands::synth_scene(&cfg, &out)
        }
        Command::Synth(SynthCommand::Session {
            out,
            frames,
            corner_noise_px,
            annotated,
            annotation_noise_px,
            seed,
        }) => commands::synth_session(
            &FixtureConfig {
                session: SessionConfig { n_frames: frames, corner_noise_px, seed, ..SessionConfig::default() },
                annotated_frames: annotated,
                annotation_noise_px,
            },
            &out,
        ),
        Command::Eval { scene, estimates, estimate, truth } => match (scene, estimate) {
            (Some(scene), _) => commands::eval_scene(&scene, &require(&estimates, "estimates")?),
            (None, Some(est)) => commands::eval_pose(&est, &require(&truth, "truth")?),
            (None, None) => Err(CliError::usage("give --scene/--estimates or --estimate/--truth")),
        },
        Command::Serve { port, host } => {
            let store = open()?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(server::serve(store, SocketAddr::new(host, port)))?;
            Ok(serde_json::json!({ "schema_version": poselab_core::SCHEMA_VERSION, "stopped": true }))
        }
    }
}

/// Parses `args`, runs the command and prints the outcome: JSON on standard
/// output on success, a JSON error on standard error otherwise. Returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let err = CliError::usage(e.to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return err.exit_code();
        }
    };
    match execute(cli) {
        Ok(v) => {
            // A closed pipe on stdout is not worth a panic.
            let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&v).expect("json value"));
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
