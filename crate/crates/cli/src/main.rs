use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use egodepth::data::SynthSpec;
use egodepth::evalkit::Crop;
use egodepth::geometry::CameraRig;
use egodepth::warp::Side;
use egodepth::{Error, Result};
use egodepth_cli::commands::{self, DepthEvalOptions, DisparityInput, EvalSource, WarpMode};
use egodepth_cli::config::RunConfig;
use egodepth_cli::gradsuite::Scope;
use egodepth_cli::{check_threads_env, exit_code, EXIT_OK, EXIT_RUNTIME};

#[derive(Parser, Debug)]
#[command(name = "egodepth", version, about = "Stereo-supervised monocular depth and ego-motion")]
struct Cli {
    /// JSON run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: the config's `output`, else `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train both networks; writes model.ckpt, train.jsonl and config.json.
    Train {
        #[arg(long)]
        quiet: bool,
    },
    /// Depth metrics of a checkpoint on sequences with ground-truth disparity.
    EvalDepth {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sequence directory or a directory of sequences.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 80.0)]
        cap: f64,
        /// none, garg, eigen or custom:top:bottom:left:right
        #[arg(long, default_value = "none")]
        crop: Crop,
        /// Use the ground truth as the prediction.
        #[arg(long)]
        oracle: bool,
    },
    /// Trajectory error of the pose network on sequences with poses.txt.
    EvalPose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Fit one scale per snippet before comparing.
        #[arg(long)]
        align_scale: bool,
    },
    /// Analytic against finite-difference gradients.
    Gradcheck {
        #[arg(long, default_value = "all")]
        scope: Scope,
        /// Corrupt one backward pass; every check should then fail.
        #[arg(long)]
        inject_bug: bool,
    },
    /// Render synthetic sequences.
    Synth {
        /// Scene description; otherwise `data.spec` or `data.synth` of the config.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Run one reconstruction path and write warped.png and mask.png.
    Warp {
        #[arg(long, value_enum, default_value_t = WarpKind::Stereo)]
        mode: WarpKind,
        /// Image to sample from.
        #[arg(long)]
        source: PathBuf,
        /// 16-bit disparity PNG of the reconstructed view.
        #[arg(long, conflicts_with = "constant_disparity")]
        disparity: Option<PathBuf>,
        #[arg(long)]
        constant_disparity: Option<f64>,
        /// View being reconstructed in stereo mode.
        #[arg(long, value_enum, default_value_t = ViewSide::Left)]
        side: ViewSide,
        /// Target-to-source pose "tx,ty,tz,rho,theta,psi" for temporal mode.
        #[arg(long, allow_hyphen_values = true)]
        pose: Option<String>,
        /// calib.json for temporal mode.
        #[arg(long)]
        calib: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum WarpKind {
    Stereo,
    Temporal,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ViewSide {
    Left,
    Right,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn parse_pose(text: &str) -> Result<[f64; 6]> {
    let bad = || Error::Config(format!("--pose needs six comma-separated numbers, got {text:?}"));
    let v: Vec<f64> = text
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    v.try_into().map_err(|_| bad())
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| Error::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn run(cli: &Cli) -> Result<i32> {
    check_threads_env()?;
    let cfg = load_config(cli)?;
    let out = out_dir(cli, &cfg);
    match &cli.command {
        Command::Train { quiet } => {
            let summary = commands::train(&cfg, &out, *quiet)?;
            println!(
                "trained {} iterations, final total {:.6}, checkpoint {}",
                summary.iterations,
                summary.final_total,
                out.join(commands::CHECKPOINT_FILE).display()
            );
        }
        Command::EvalDepth {
            checkpoint,
            data,
            cap,
            crop,
            oracle,
        } => {
            let source = EvalSource::resolve(data.as_deref(), &cfg)?;
            let opts = DepthEvalOptions {
                cap: *cap,
                crop: *crop,
                oracle: *oracle,
            };
            let report = commands::eval_depth(checkpoint.as_deref(), &source, &opts)?;
            let csv = commands::depth_csv(&report);
            write(&out.join(commands::DEPTH_CSV_FILE), &csv)?;
            print!("{csv}");
        }
        Command::EvalPose {
            checkpoint,
            data,
            align_scale,
        } => {
            let root = data
                .clone()
                .or_else(|| cfg.data.root.clone())
                .ok_or_else(|| Error::Config("eval-pose needs --data or data.root".into()))?;
            let evals = commands::eval_pose(checkpoint, &root, *align_scale)?;
            let csv = commands::ate_csv(&evals);
            write(&out.join(commands::ATE_CSV_FILE), &csv)?;
            for e in &evals {
                write(
                    &out.join(format!("trajectory_{}.csv", e.seq)),
                    &commands::trajectory_csv(&e.trajectory),
                )?;
            }
            print!("{csv}");
        }
        Command::Gradcheck { scope, inject_bug } => {
            let (table, passed) = commands::gradcheck(*scope, *inject_bug)?;
            print!("{table}");
            if !passed {
                return Ok(EXIT_RUNTIME);
            }
        }
        Command::Synth { spec } => {
            let spec = spec.as_ref().map(SynthSpec::from_json_file).transpose()?;
            let n = commands::synth(spec.as_ref(), &cfg, &out)?;
            println!("wrote {n} sequence(s) to {}", out.display());
        }
        Command::Warp {
            mode,
            source,
            disparity,
            constant_disparity,
            side,
            pose,
            calib,
        } => {
            let disp = match (disparity, constant_disparity) {
                (Some(p), _) => DisparityInput::Png(p.clone()),
                (None, Some(v)) => DisparityInput::Constant(*v),
                (None, None) => DisparityInput::Constant(0.0),
            };
            let mode = match mode {
                WarpKind::Stereo => WarpMode::Stereo {
                    side: match side {
                        ViewSide::Left => Side::Left,
                        ViewSide::Right => Side::Right,
                    },
                },
                WarpKind::Temporal => {
                    let pose = pose.as_deref().map(parse_pose).transpose()?.unwrap_or([0.0; 6]);
                    let calib = calib
                        .as_ref()
                        .ok_or_else(|| Error::Config("temporal warp needs --calib".into()))?;
                    WarpMode::Temporal {
                        pose,
                        rig: CameraRig::from_json_file(calib)?,
                    }
                }
            };
            let (_, mask) = commands::warp(source, &disp, &mode, &out)?;
            let valid = mask.iter().filter(|&&m| m).count();
            println!("{valid} of {} pixels valid, written to {}", mask.len(), out.display());
        }
    }
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
