//! Command implementations. Each returns its printable output so the binary
//! and the tests share one code path.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use egodepth::data::{sequence_dirs, synth_generate, write_sequence, Sequence, StereoSnippet, SynthSpec};
use egodepth::evalkit::{
    ate, d1_all, depth_metrics, integrate, relatives_from_target_poses, AteReport, Crop, DepthMetricsReport,
    ATE_CSV_HEADER, DEPTH_CSV_HEADER,
};
use egodepth::geometry::{disparity_to_depth, euler_to_transform, CameraRig, PoseSE3};
use egodepth::model::{train as train_model, Model, TrainSummary};
use egodepth::objective::validate_snippet_len;
use egodepth::warp::{mask_to_grid, reconstruct_stereo, reconstruct_temporal, Side};
use egodepth::{Error, ImageGrid, Result};

use crate::config::RunConfig;
use crate::gradsuite::{run_scope, table_row, CheckResult, Scope, TABLE_HEADER};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const DEPTH_CSV_FILE: &str = "depth.csv";
pub const ATE_CSV_FILE: &str = "ate.csv";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

// --- train -------------------------------------------------------------------

/// Trains on the configured data and writes the checkpoint, the JSON-lines
/// log and the resolved config into `out`. After a non-finite abort the last
/// good parameters are still saved before the error is returned.
pub fn train(cfg: &RunConfig, out: &Path, quiet: bool) -> Result<TrainSummary> {
    let data = cfg.data.load(cfg.snippet_len)?;
    create_dir(out)?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_json())?;
    let mut model = Model::new(&cfg.model, cfg.snippet_len, cfg.seed)?;
    let log_path = out.join(LOG_FILE);
    let mut log = BufWriter::new(fs::File::create(&log_path).map_err(io_err(&log_path))?);
    let every = (cfg.iterations / 20).max(1);
    let result = train_model(&mut model, &data, &cfg.train_options(), |line| {
        let json = serde_json::to_string(line)?;
        writeln!(log, "{json}").map_err(io_err(&log_path))?;
        if !quiet && (line.iteration % every == 0 || line.iteration + 1 == cfg.iterations) {
            eprintln!("iter {:>6}  lr {:.2e}  total {:.6}", line.iteration, line.lr, line.loss.total);
        }
        Ok(())
    });
    log.flush().map_err(io_err(&log_path))?;
    model.save(out.join(CHECKPOINT_FILE))?;
    result
}

// --- eval-depth ----------------------------------------------------------------

/// Where evaluation frames come from.
#[derive(Debug, Clone)]
pub enum EvalSource {
    Dirs(PathBuf),
    Snippets(Vec<StereoSnippet>),
}

impl EvalSource {
    /// `--data` wins; otherwise the config's held-out set, then its data.
    pub fn resolve(data: Option<&Path>, cfg: &RunConfig) -> Result<Self> {
        if let Some(d) = data {
            return Ok(EvalSource::Dirs(d.to_path_buf()));
        }
        if let Some(set) = &cfg.data.heldout {
            return Ok(EvalSource::Snippets(set.generate(cfg.snippet_len)?));
        }
        if let Some(root) = &cfg.data.root {
            return Ok(EvalSource::Dirs(root.clone()));
        }
        if cfg.data.synth.is_some() || cfg.data.spec.is_some() {
            return Ok(EvalSource::Snippets(cfg.data.load(cfg.snippet_len)?));
        }
        Err(Error::Config("no evaluation data: pass --data or set data in the config".into()))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DepthEvalOptions {
    pub cap: f64,
    pub crop: Crop,
    /// Score the ground truth against itself instead of running the model.
    pub oracle: bool,
}

fn eval_frame(
    model: Option<&Model>,
    left: &ImageGrid,
    gt_disp: &ImageGrid,
    rig: &CameraRig,
    opts: &DepthEvalOptions,
) -> Result<DepthMetricsReport> {
    let pred_disp = match model {
        Some(m) => m.predict_disparity(left)?,
        None => gt_disp.clone(),
    };
    let pred_depth = disparity_to_depth(&pred_disp.map(|d| d.max(1e-9)), rig)?;
    let fb = rig.fb();
    let gt_depth = gt_disp.map(|d| if d > 0.0 { fb / d } else { 0.0 });
    let mut report = depth_metrics(&pred_depth, &gt_depth, opts.cap, opts.crop)?;
    report.d1_all = d1_all(&pred_disp, gt_disp)?;
    Ok(report)
}

/// Evaluates every left frame that has ground-truth disparity. With an
/// oracle run no checkpoint is read.
pub fn eval_depth(checkpoint: Option<&Path>, source: &EvalSource, opts: &DepthEvalOptions) -> Result<DepthMetricsReport> {
    let model = if opts.oracle {
        None
    } else {
        let path = checkpoint.ok_or_else(|| Error::Config("eval-depth needs --checkpoint".into()))?;
        Some(Model::load(path)?)
    };
    let mut reports = Vec::new();
    match source {
        EvalSource::Dirs(root) => {
            for dir in sequence_dirs(root)? {
                let seq = Sequence::open(&dir, None, 2)?;
                if !seq.has_disparity() {
                    return Err(Error::Data {
                        path: dir.join("disp_left"),
                        message: "missing ground-truth disparity".into(),
                    });
                }
                for k in 0..seq.num_frames() {
                    let (left, gt) = seq.left_frame(k)?;
                    let gt = gt.expect("checked above");
                    reports.push(eval_frame(model.as_ref(), &left, &gt, seq.rig(), opts)?);
                }
            }
        }
        EvalSource::Snippets(snippets) => {
            for (i, s) in snippets.iter().enumerate() {
                let gt = s
                    .gt_disp_left
                    .as_ref()
                    .ok_or_else(|| Error::InvalidValue(format!("snippet {i} has no ground-truth disparity")))?;
                for (left, g) in s.left.iter().zip(gt) {
                    reports.push(eval_frame(model.as_ref(), left, g, &s.rig, opts)?);
                }
            }
        }
    }
    DepthMetricsReport::merge(&reports)
}

pub fn depth_csv(report: &DepthMetricsReport) -> String {
    format!("{DEPTH_CSV_HEADER}\n{}\n", report.csv_row())
}

// --- eval-pose -----------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PoseEval {
    pub seq: String,
    pub report: AteReport,
    /// Integrated left-camera trajectory over the whole sequence.
    pub trajectory: Vec<PoseSE3>,
}

/// Chains the first relative of every snippet, then the tail of the last
/// one, into a sequence-long trajectory.
fn stitch(relatives: &[Vec<PoseSE3>]) -> Vec<PoseSE3> {
    let mut steps: Vec<PoseSE3> = relatives.iter().map(|r| r[0]).collect();
    if let Some(last) = relatives.last() {
        steps.extend_from_slice(&last[1..]);
    }
    integrate(&steps)
}

pub fn eval_pose(checkpoint: &Path, root: &Path, align_scale: bool) -> Result<Vec<PoseEval>> {
    let model = Model::load(checkpoint)?;
    let n = model.snippet_len();
    let mut out = Vec::new();
    for dir in sequence_dirs(root)? {
        let seq = Sequence::open(&dir, None, n)?;
        if seq.poses().is_none() {
            return Err(Error::Data {
                path: dir.join("poses.txt"),
                message: "missing ground-truth poses".into(),
            });
        }
        let mut pred = Vec::with_capacity(seq.len());
        let mut gt = Vec::with_capacity(seq.len());
        for snippet in seq.iter() {
            let snippet = snippet?;
            let poses = model.pose.pose_forward(&snippet.left)?;
            pred.push(relatives_from_target_poses(snippet.target(), &poses)?);
            gt.push(snippet.gt_relatives().expect("poses checked above"));
        }
        let name = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "seq".into());
        out.push(PoseEval {
            seq: name,
            report: ate(&pred, &gt, align_scale)?,
            trajectory: stitch(&pred),
        });
    }
    Ok(out)
}

pub fn ate_csv(evals: &[PoseEval]) -> String {
    let mut s = format!("{ATE_CSV_HEADER}\n");
    for e in evals {
        s.push_str(&e.report.csv_row(&e.seq));
        s.push('\n');
    }
    s
}

pub const TRAJECTORY_CSV_HEADER: &str = "frame, x, y, z, rho, theta, psi";

pub fn trajectory_csv(trajectory: &[PoseSE3]) -> String {
    let mut s = format!("{TRAJECTORY_CSV_HEADER}\n");
    for (i, p) in trajectory.iter().enumerate() {
        let [x, y, z] = p.translation;
        let [rho, theta, psi] = p.euler_angles();
        s.push_str(&format!("{i}, {x:.9}, {y:.9}, {z:.9}, {rho:.9}, {theta:.9}, {psi:.9}\n"));
    }
    s
}

// --- gradcheck -----------------------------------------------------------------

pub fn gradcheck(scope: Scope, inject_bug: bool) -> Result<(String, bool)> {
    let results: Vec<CheckResult> = run_scope(scope, inject_bug)?;
    let mut table = format!("{TABLE_HEADER}\n");
    for r in &results {
        table.push_str(&table_row(r));
        table.push('\n');
    }
    let failed = results.iter().filter(|r| !r.report.passed).count();
    table.push_str(&format!("{} checks, {failed} failed\n", results.len()));
    Ok((table, failed == 0))
}

// --- synth ---------------------------------------------------------------------

/// Writes one sequence per snippet: a single spec goes straight to `out`,
/// a generated set to `out/NNNNNN`.
pub fn synth(spec: Option<&SynthSpec>, cfg: &RunConfig, out: &Path) -> Result<usize> {
    if let Some(spec) = spec {
        spec.validate()?;
        write_sequence(out, &synth_generate(spec)?)?;
        return Ok(1);
    }
    validate_snippet_len(cfg.snippet_len)?;
    let snippets = match (&cfg.data.spec, &cfg.data.synth) {
        (Some(spec), _) => {
            write_sequence(out, &synth_generate(spec)?)?;
            return Ok(1);
        }
        (None, Some(set)) => set.generate(cfg.snippet_len)?,
        (None, None) => {
            return Err(Error::Config("synth needs --spec, data.spec or data.synth".into()));
        }
    };
    for (i, s) in snippets.iter().enumerate() {
        write_sequence(out.join(format!("{i:06}")), s)?;
    }
    Ok(snippets.len())
}

// --- warp ----------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum WarpMode {
    /// Rebuild the `side` view from the opposite image.
    Stereo { side: Side },
    /// Rebuild the target from a source frame given the target-to-source pose.
    Temporal { pose: [f64; 6], rig: CameraRig },
}

#[derive(Debug, Clone)]
pub enum DisparityInput {
    Png(PathBuf),
    Constant(f64),
}

impl DisparityInput {
    fn load(&self, height: usize, width: usize) -> Result<ImageGrid> {
        match self {
            DisparityInput::Png(p) => {
                let d = ImageGrid::read_disparity_png(p)?;
                if d.height() != height || d.width() != width {
                    return Err(Error::Data {
                        path: p.clone(),
                        message: format!("{}x{} disparity for a {height}x{width} image", d.height(), d.width()),
                    });
                }
                Ok(d)
            }
            DisparityInput::Constant(v) => Ok(ImageGrid::filled(1, height, width, *v)),
        }
    }
}

pub const WARP_IMAGE_FILE: &str = "warped.png";
pub const WARP_MASK_FILE: &str = "mask.png";

/// Runs one reconstruction path and writes the image and its validity mask.
pub fn warp(source: &Path, disparity: &DisparityInput, mode: &WarpMode, out: &Path) -> Result<(ImageGrid, Vec<bool>)> {
    let src = ImageGrid::read_png(source)?;
    let (h, w) = (src.height(), src.width());
    let disp = disparity.load(h, w)?;
    let (img, mask) = match mode {
        WarpMode::Stereo { side } => reconstruct_stereo(&src, &disp, *side)?,
        WarpMode::Temporal { pose, rig } => {
            if rig.width != w || rig.height != h {
                return Err(Error::Config(format!(
                    "calibration is {}x{}, image is {h}x{w}",
                    rig.height, rig.width
                )));
            }
            if disp.data().iter().any(|&d| !(d > 0.0)) {
                return Err(Error::InvalidValue("temporal warp needs positive disparity everywhere".into()));
            }
            let depth = disparity_to_depth(&disp, rig)?;
            reconstruct_temporal(&src, &depth, &euler_to_transform(pose), rig)?
        }
    };
    create_dir(out)?;
    img.write_png(out.join(WARP_IMAGE_FILE))?;
    mask_to_grid(&mask, h, w).write_png(out.join(WARP_MASK_FILE))?;
    Ok((img, mask))
}
