//! `occworld`: scene generation, label baking, two-stage training,
//! evaluation, forecasting, and render dumps over scene directories.
//!
//! Exit codes: 0 success, 1 usage, 2 data/format error, 3 numeric failure.

use clap::{Args, Parser, Subcommand};
use occ_core::error::Error;
use occ_core::nets::{load_checkpoint, save_checkpoint, Model};
use occ_core::pipeline::{
    dump_forecast, dump_render, evaluate, load_scenes, stage_load_parts, train_stage, EvalMode,
    Stage, TrainConfig,
};
use occ_core::scene::{load_scene, load_scene_parts, save_scene, LoadParts};
use occ_core::scenegen::{bake_labels, generate, SceneSpec};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "occworld", version, about = "Desk-scale occupancy world model pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scene from a SceneSpec JSON.
    Gen {
        /// SceneSpec JSON path.
        #[arg(long)]
        spec: PathBuf,
        /// Output scene directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Bake 2D depth/semantic/RGB labels and input images for a scene.
    Bake {
        /// Scene directory (must contain GT grids).
        #[arg(long)]
        scene: PathBuf,
    },
    /// Self-supervised pre-training with the temporal rendering loss.
    Pretrain(TrainArgs),
    /// Fully-supervised fine-tuning with the 3D occupancy loss.
    Finetune(TrainArgs),
    /// Fine-tuning jointly supervised by the trajectory loss.
    Joint(TrainArgs),
    /// Evaluate a checkpoint over scenes and write a JSON+CSV report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory of scene directories (or a single scene).
        #[arg(long)]
        scenes: PathBuf,
        /// Report JSON path; a .csv twin is written next to it.
        #[arg(long)]
        report: PathBuf,
        /// Predict by density-threshold extraction instead of the head.
        #[arg(long)]
        selfsup: bool,
        /// Density threshold for --selfsup.
        #[arg(long)]
        tau: Option<f32>,
        /// Optional TrainConfig JSON overriding evaluation knobs.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Forecast future occupancy from one frame and dump OCCG grids.
    Forecast {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        horizon: usize,
        /// Also write bird's-eye-view PPM images.
        #[arg(long)]
        dump_ppm: bool,
        #[arg(long, default_value = "occworld_out")]
        out: PathBuf,
    },
    /// Render one camera of one frame and dump PGM/PPM/CSV.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        camera: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "occworld_out")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// TrainConfig JSON.
    #[arg(long)]
    config: PathBuf,
    /// Directory of scene directories (or a single scene).
    #[arg(long)]
    scenes: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Warm-start checkpoint.
    #[arg(long)]
    init: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Numeric(_) => 3,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}

/// Scene directories under `root`: either root itself (when it holds a
/// scene.json) or its subdirectories that do, sorted by name.
fn scene_dirs(root: &Path) -> Result<Vec<PathBuf>, Error> {
    if root.join("scene.json").is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs = Vec::new();
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    for entry in entries {
        let p = entry.map_err(|e| Error::io(root, e))?.path();
        if p.is_dir() && p.join("scene.json").is_file() {
            dirs.push(p);
        }
    }
    if dirs.is_empty() {
        return Err(Error::Data(format!(
            "no scenes found under {}",
            root.display()
        )));
    }
    dirs.sort();
    Ok(dirs)
}

fn read_config(path: &Path) -> Result<TrainConfig, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    TrainConfig::from_json(&text)
}

fn train(stage: Stage, args: TrainArgs) -> Result<(), Error> {
    let mut cfg = read_config(&args.config)?;
    cfg.stage = stage;
    let dirs = scene_dirs(&args.scenes)?;
    let scenes = load_scenes(&dirs, stage_load_parts(stage))?;
    let mut model = match &args.init {
        Some(p) => {
            let m = load_checkpoint(p)?;
            if m.config != cfg.model_config() {
                return Err(Error::Data(
                    "warm-start checkpoint does not match the configured model".into(),
                ));
            }
            m
        }
        None => Model::new(cfg.model_config(), cfg.seed),
    };
    let csv = args.out.with_extension("loss.csv");
    let result = train_stage(&mut model, stage, &scenes, &cfg, Some(&csv));
    // Flush the checkpoint even when training aborted mid-way.
    save_checkpoint(&args.out, &model)?;
    result?;
    println!(
        "trained {} epochs over {} scenes -> {}",
        cfg.epochs,
        scenes.len(),
        args.out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.cmd {
        Cmd::Gen { spec, out } => {
            let text = fs::read_to_string(&spec).map_err(|e| Error::io(&spec, e))?;
            let spec: SceneSpec = serde_json::from_str(&text)
                .map_err(|e| Error::Format(format!("{}: {e}", spec.display())))?;
            let scene = generate(&spec)?;
            save_scene(&scene, &out)?;
            println!(
                "generated {} frames, {} cameras -> {}",
                scene.frames.len(),
                scene.rig.len(),
                out.display()
            );
            Ok(())
        }
        Cmd::Bake { scene } => {
            // Baking needs the grids; labels/images may not exist yet.
            let parts = LoadParts {
                grids: true,
                labels: false,
                images: false,
            };
            let mut s = load_scene_parts(&scene, parts)?;
            bake_labels(&mut s)?;
            save_scene(&s, &scene)?;
            println!(
                "baked labels for {} frames -> {}",
                s.frames.len(),
                scene.display()
            );
            Ok(())
        }
        Cmd::Pretrain(args) => train(Stage::Pretrain, args),
        Cmd::Finetune(args) => train(Stage::Finetune, args),
        Cmd::Joint(args) => train(Stage::Joint, args),
        Cmd::Eval {
            ckpt,
            scenes,
            report,
            selfsup,
            tau,
            config,
        } => {
            let model = load_checkpoint(&ckpt)?;
            let mut cfg = match config {
                Some(p) => read_config(&p)?,
                None => TrainConfig::desk_default(),
            };
            cfg.model = model.config.clone();
            cfg.future_frames = model.config.future_horizon;
            if let Some(t) = tau {
                cfg.density_threshold = t;
            }
            cfg.validate()?;
            let dirs = scene_dirs(&scenes)?;
            let loaded = load_scenes(&dirs, LoadParts::all())?;
            let mode = if selfsup {
                EvalMode::SelfSupervised
            } else {
                EvalMode::Head
            };
            let bundle = evaluate(&model, &loaded, &cfg, mode)?;
            fs::write(&report, bundle.to_json()).map_err(|e| Error::io(&report, e))?;
            let csv = report.with_extension("csv");
            fs::write(&csv, bundle.to_csv()).map_err(|e| Error::io(&csv, e))?;
            println!("{}", bundle.to_json());
            Ok(())
        }
        Cmd::Forecast {
            ckpt,
            scene,
            frame,
            horizon,
            dump_ppm,
            out,
        } => {
            let model = load_checkpoint(&ckpt)?;
            let s = load_scene(&scene)?;
            dump_forecast(&model, &s, frame, horizon, dump_ppm, &out)?;
            println!("forecast horizons 0..={horizon} -> {}", out.display());
            Ok(())
        }
        Cmd::Render {
            ckpt,
            scene,
            frame,
            camera,
            config,
            out,
        } => {
            let model = load_checkpoint(&ckpt)?;
            let cfg = match config {
                Some(p) => read_config(&p)?,
                None => {
                    let mut c = TrainConfig::desk_default();
                    c.model = model.config.clone();
                    c
                }
            };
            let s = load_scene(&scene)?;
            dump_render(&model, &s, frame, camera, &cfg, &out)?;
            println!(
                "rendered frame {frame} camera {camera} -> {}",
                out.display()
            );
            Ok(())
        }
    }
}
