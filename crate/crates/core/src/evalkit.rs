//! Depth and pose evaluation metrics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PoseSE3;
use crate::grid::ImageGrid;

pub const MIN_EVAL_DEPTH: f64 = 1e-3;

/// Evaluation region as fractions of the image size. Rows `[top, bottom)`
/// and columns `[left, right)` after truncation to whole pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Crop {
    None,
    Garg,
    Eigen,
    Custom { top: f64, bottom: f64, left: f64, right: f64 },
}

impl Crop {
    pub fn fractions(&self) -> [f64; 4] {
        match *self {
            Crop::None => [0.0, 1.0, 0.0, 1.0],
            Crop::Garg => [0.408_108_11, 0.991_891_89, 0.035_947_71, 0.964_052_29],
            Crop::Eigen => [0.324_324_32, 0.913_513_51, 0.035_947_71, 0.964_052_29],
            Crop::Custom { top, bottom, left, right } => [top, bottom, left, right],
        }
    }

    /// `(y0, y1, x0, x1)` pixel bounds, end-exclusive.
    pub fn rect(&self, height: usize, width: usize) -> (usize, usize, usize, usize) {
        let [t, b, l, r] = self.fractions();
        let px = |f: f64, n: usize| ((f * n as f64).floor().max(0.0) as usize).min(n);
        (px(t, height), px(b, height), px(l, width), px(r, width))
    }

    pub fn name(&self) -> String {
        match self {
            Crop::None => "none".into(),
            Crop::Garg => "garg".into(),
            Crop::Eigen => "eigen".into(),
            Crop::Custom { top, bottom, left, right } => format!("custom:{top}:{bottom}:{left}:{right}"),
        }
    }
}

impl FromStr for Crop {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Crop::None),
            "garg" => Ok(Crop::Garg),
            "eigen" => Ok(Crop::Eigen),
            other => {
                let parts: Vec<&str> = other.strip_prefix("custom:").unwrap_or("").split(':').collect();
                let vals: Vec<f64> = parts.iter().filter_map(|p| p.parse().ok()).collect();
                match vals[..] {
                    [top, bottom, left, right] if top < bottom && left < right => {
                        Ok(Crop::Custom { top, bottom, left, right })
                    }
                    _ => Err(Error::InvalidValue(format!(
                        "unknown crop '{s}', expected none, garg, eigen or custom:top:bottom:left:right"
                    ))),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthMetricsReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub log_rmse: f64,
    pub d1_all: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_pixels: usize,
    pub cap: f64,
    pub crop: String,
}

pub const DEPTH_CSV_HEADER: &str = "abs_rel, sq_rel, rmse, log_rmse, d1_all, delta1, delta2, delta3";

impl DepthMetricsReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{:.6}, {:.6}, {:.6}, {:.6}, {:.6}, {:.6}, {:.6}, {:.6}",
            self.abs_rel, self.sq_rel, self.rmse, self.log_rmse, self.d1_all, self.delta1, self.delta2, self.delta3
        )
    }

    /// Pixel-weighted mean of several reports.
    pub fn merge(reports: &[DepthMetricsReport]) -> Result<DepthMetricsReport> {
        let first = reports.first().ok_or_else(|| Error::EmptyMask("no reports to merge".into()))?;
        let n: usize = reports.iter().map(|r| r.n_pixels).sum();
        let avg = |f: fn(&DepthMetricsReport) -> f64| {
            reports.iter().map(|r| f(r) * r.n_pixels as f64).sum::<f64>() / n as f64
        };
        // rmse merges through the mean square
        let rms = |f: fn(&DepthMetricsReport) -> f64| {
            (reports.iter().map(|r| f(r).powi(2) * r.n_pixels as f64).sum::<f64>() / n as f64).sqrt()
        };
        Ok(DepthMetricsReport {
            abs_rel: avg(|r| r.abs_rel),
            sq_rel: avg(|r| r.sq_rel),
            rmse: rms(|r| r.rmse),
            log_rmse: rms(|r| r.log_rmse),
            d1_all: avg(|r| r.d1_all),
            delta1: avg(|r| r.delta1),
            delta2: avg(|r| r.delta2),
            delta3: avg(|r| r.delta3),
            n_pixels: n,
            cap: first.cap,
            crop: first.crop.clone(),
        })
    }
}

impl fmt::Display for DepthMetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{DEPTH_CSV_HEADER}")?;
        write!(f, "{}", self.csv_row())
    }
}

fn check_pair(pred: &ImageGrid, gt: &ImageGrid, what: &str) -> Result<()> {
    if !pred.same_shape(gt) || pred.channels() != 1 {
        return Err(Error::shape(format!(
            "{what}: prediction {:?} vs ground truth {:?}, expected matching single-channel maps",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok(())
}

/// Depth error statistics over pixels with `gt > 0` inside `crop`, both maps
/// clamped to `[1e-3, cap]`. `d1_all` is left at 0; fill it from
/// [`d1_all`] when disparities are available.
pub fn depth_metrics(pred: &ImageGrid, gt: &ImageGrid, cap: f64, crop: Crop) -> Result<DepthMetricsReport> {
    check_pair(pred, gt, "depth_metrics")?;
    if !(cap > MIN_EVAL_DEPTH) || !cap.is_finite() {
        return Err(Error::InvalidValue(format!("depth cap {cap}")));
    }
    let (h, w) = (gt.height(), gt.width());
    let (y0, y1, x0, x1) = crop.rect(h, w);
    let mut n = 0usize;
    let (mut abs_rel, mut sq_rel, mut sq, mut log_sq) = (0.0, 0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    let thresholds = [1.25, 1.25f64.powi(2), 1.25f64.powi(3)];
    for y in y0..y1 {
        for x in x0..x1 {
            let g = gt.get(0, y, x);
            if !(g > 0.0) {
                continue;
            }
            let g = g.clamp(MIN_EVAL_DEPTH, cap);
            let p = pred.get(0, y, x).clamp(MIN_EVAL_DEPTH, cap);
            if p.is_nan() {
                return Err(Error::InvalidValue(format!("NaN predicted depth at ({y}, {x})")));
            }
            let diff = p - g;
            abs_rel += diff.abs() / g;
            sq_rel += diff * diff / g;
            sq += diff * diff;
            log_sq += (p.ln() - g.ln()).powi(2);
            let ratio = (p / g).max(g / p);
            for (hit, t) in hits.iter_mut().zip(thresholds) {
                if ratio < t {
                    *hit += 1;
                }
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask("no valid ground-truth pixels in the evaluation region".into()));
    }
    let nf = n as f64;
    Ok(DepthMetricsReport {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (sq / nf).sqrt(),
        log_rmse: (log_sq / nf).sqrt(),
        d1_all: 0.0,
        delta1: hits[0] as f64 / nf,
        delta2: hits[1] as f64 / nf,
        delta3: hits[2] as f64 / nf,
        n_pixels: n,
        cap,
        crop: crop.name(),
    })
}

pub const D1_ABS_PX: f64 = 3.0;
pub const D1_REL: f64 = 0.05;

/// Fraction of pixels with `gt > 0` whose disparity error exceeds both 3 px
/// and 5% of the ground truth.
pub fn d1_all(pred_disp: &ImageGrid, gt_disp: &ImageGrid) -> Result<f64> {
    check_pair(pred_disp, gt_disp, "d1_all")?;
    let mut n = 0usize;
    let mut bad = 0usize;
    for (&p, &g) in pred_disp.data().iter().zip(gt_disp.data()) {
        if !(g > 0.0) {
            continue;
        }
        n += 1;
        let err = (p - g).abs();
        if err > D1_ABS_PX && err > D1_REL * g {
            bad += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask("no valid ground-truth disparities".into()));
    }
    Ok(bad as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteReport {
    pub t_ate: f64,
    pub r_ate: f64,
    pub snippet_count: usize,
    pub snippet_len: usize,
}

pub const ATE_CSV_HEADER: &str = "seq, t_ate, r_ate";

impl AteReport {
    pub fn csv_row(&self, seq: &str) -> String {
        format!("{seq}, {:.6}, {:.6}", self.t_ate, self.r_ate)
    }
}

/// Absolute poses of a snippet from consecutive relatives, frame 0 at the
/// identity. `relatives[i]` is frame `i + 1` expressed in frame `i`.
pub fn integrate(relatives: &[PoseSE3]) -> Vec<PoseSE3> {
    let mut out = Vec::with_capacity(relatives.len() + 1);
    out.push(PoseSE3::identity());
    for r in relatives {
        let next = out[out.len() - 1].compose(r);
        out.push(next);
    }
    out
}

/// Consecutive relatives from target-to-source poses. `poses` lists the
/// non-target frames in order; the target frame has index `target`.
pub fn relatives_from_target_poses(target: usize, poses: &[PoseSE3]) -> Result<Vec<PoseSE3>> {
    let n = poses.len() + 1;
    if target >= n {
        return Err(Error::shape(format!("target {target} of {n} frames")));
    }
    let mut all = Vec::with_capacity(n);
    let mut it = poses.iter();
    for j in 0..n {
        all.push(if j == target { PoseSE3::identity() } else { *it.next().unwrap() });
    }
    Ok(all.windows(2).map(|w| w[0].compose(&w[1].inverse())).collect())
}

fn geodesic_angle(a: &PoseSE3, b: &PoseSE3) -> f64 {
    a.inverse().compose(b).rotation_angle()
}

fn snippet_errors(pred: &[PoseSE3], gt: &[PoseSE3], align_scale: bool) -> (f64, f64) {
    let mut scale = 1.0;
    if align_scale {
        let (mut num, mut den) = (0.0, 0.0);
        for (p, g) in pred.iter().zip(gt) {
            for k in 0..3 {
                num += p.translation[k] * g.translation[k];
                den += p.translation[k] * p.translation[k];
            }
        }
        if den > 0.0 {
            scale = num / den;
        }
    }
    let n = pred.len() as f64;
    let mut sq = 0.0;
    let mut ang = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        sq += (0..3).map(|k| (scale * p.translation[k] - g.translation[k]).powi(2)).sum::<f64>();
        ang += geodesic_angle(p, g);
    }
    ((sq / n).sqrt(), ang / n)
}

fn check_streams<T>(pred: &[Vec<T>], gt: &[Vec<T>]) -> Result<usize> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!("{} predicted snippets vs {} ground truth", pred.len(), gt.len())));
    }
    let first = pred.first().ok_or_else(|| Error::EmptyMask("no snippets".into()))?.len();
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.len() != first || g.len() != first {
            return Err(Error::shape(format!(
                "snippet {i}: {} predicted and {} ground-truth poses, expected {first}",
                p.len(),
                g.len()
            )));
        }
    }
    Ok(first)
}

/// Trajectory error from per-snippet consecutive relatives, integrated from
/// the identity without scale alignment unless `align_scale` is set.
pub fn ate(pred_relatives: &[Vec<PoseSE3>], gt_relatives: &[Vec<PoseSE3>], align_scale: bool) -> Result<AteReport> {
    let len = check_streams(pred_relatives, gt_relatives)?;
    let (mut t, mut r) = (0.0, 0.0);
    for (p, g) in pred_relatives.iter().zip(gt_relatives) {
        let (ts, rs) = snippet_errors(&integrate(p), &integrate(g), align_scale);
        t += ts;
        r += rs;
    }
    let m = pred_relatives.len() as f64;
    Ok(AteReport {
        t_ate: t / m,
        r_ate: r / m,
        snippet_count: pred_relatives.len(),
        snippet_len: len + 1,
    })
}

/// Same as [`ate`] on absolute per-snippet trajectories; each snippet is
/// re-anchored so that its first frame is the identity.
pub fn ate_trajectories(pred: &[Vec<PoseSE3>], gt: &[Vec<PoseSE3>], align_scale: bool) -> Result<AteReport> {
    let len = check_streams(pred, gt)?;
    let anchor = |traj: &Vec<PoseSE3>| {
        let inv = traj[0].inverse();
        traj.iter().map(|p| inv.compose(p)).collect::<Vec<_>>()
    };
    let (mut t, mut r) = (0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        let (ts, rs) = snippet_errors(&anchor(p), &anchor(g), align_scale);
        t += ts;
        r += rs;
    }
    let m = pred.len() as f64;
    Ok(AteReport {
        t_ate: t / m,
        r_ate: r / m,
        snippet_count: pred.len(),
        snippet_len: len,
    })
}
