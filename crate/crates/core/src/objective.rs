//! The training objective.
//!
//! Residuals are penalised with the generalised Charbonnier function
//! `rho(x) = (x^2 + eps^2)^a`. The appearance term mixes an SSIM residual and
//! a photometric residual, the smoothness term penalises Sobel disparity
//! gradients damped by `exp(-|image gradient|)`, and the total sums both over
//! four scales and both cameras with smoothness weighted by `0.1 / s`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::geometry::{disparity_to_depth_node, CameraRig};
use crate::grid::{correlate3x3, erode3x3, ImageGrid, Pyramid, BOX3, PYRAMID_LEVELS, SOBEL_X, SOBEL_Y};
use crate::warp::{reconstruct_stereo_node, reconstruct_temporal_node, Side};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CharbonnierParams {
    pub a: f64,
    pub eps: f64,
}

impl Default for CharbonnierParams {
    fn default() -> Self {
        Self { a: 0.45, eps: 0.001 }
    }
}

impl CharbonnierParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.a <= 1.0) {
            return Err(Error::Config(format!("charbonnier.a must be in (0, 1], got {}", self.a)));
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::Config(format!("charbonnier.eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }

    /// Penalty of a zero residual, `eps^(2a)`.
    pub fn floor(&self) -> f64 {
        self.eps.powf(2.0 * self.a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_ap: f64,
    /// Smoothness at scale `s` is weighted by `lambda_ds_base / s`.
    pub lambda_ds_base: f64,
    pub alpha: f64,
    pub lambda_d: f64,
    pub lambda_p: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ap: 1.0,
            lambda_ds_base: 0.1,
            alpha: 0.85,
            lambda_d: 1.0,
            lambda_p: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_ap", self.lambda_ap),
            ("lambda_ds_base", self.lambda_ds_base),
            ("alpha", self.alpha),
            ("lambda_d", self.lambda_d),
            ("lambda_p", self.lambda_p),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("weights.{name} must be non-negative, got {v}")));
            }
        }
        if self.alpha > 1.0 {
            return Err(Error::Config(format!("weights.alpha must be in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }

    /// Smoothness coefficient at pyramid level `k` (scale `s = 2^k`).
    pub fn smoothness_weight(&self, level: usize) -> f64 {
        self.lambda_ds_base / Pyramid::scale_factor(level) as f64
    }

    /// Per-pixel appearance value of a perfect reconstruction.
    pub fn appearance_floor(&self, charb: &CharbonnierParams) -> f64 {
        charb.floor() * (0.5 * self.alpha + 1.0 - self.alpha)
    }
}

pub fn charbonnier(x: f64, params: &CharbonnierParams) -> f64 {
    (x * x + params.eps * params.eps).powf(params.a)
}

pub fn charbonnier_derivative(x: f64, params: &CharbonnierParams) -> f64 {
    2.0 * params.a * x * (x * x + params.eps * params.eps).powf(params.a - 1.0)
}

pub fn charbonnier_grid(x: &ImageGrid, params: &CharbonnierParams) -> ImageGrid {
    x.map(|v| charbonnier(v, params))
}

pub fn charbonnier_node(tape: &mut Tape, x: NodeId, params: &CharbonnierParams) -> NodeId {
    let sq = tape.square(x);
    let shifted = tape.add_scalar(sq, params.eps * params.eps);
    tape.pow_const(shifted, params.a)
}

/// Per-channel local SSIM over 3x3 uniform windows (edge-replicated borders).
pub fn ssim_map_node(tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
    if !tape.value(a).same_shape(tape.value(b)) {
        return Err(Error::shape(format!(
            "ssim of {:?} and {:?}",
            tape.value(a).shape(),
            tape.value(b).shape()
        )));
    }
    let mu_a = tape.stencil3(a, BOX3);
    let mu_b = tape.stencil3(b, BOX3);
    let aa = tape.square(a);
    let bb = tape.square(b);
    let ab = tape.mul(a, b)?;
    let e_aa = tape.stencil3(aa, BOX3);
    let e_bb = tape.stencil3(bb, BOX3);
    let e_ab = tape.stencil3(ab, BOX3);
    let mu_aa = tape.square(mu_a);
    let mu_bb = tape.square(mu_b);
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(e_aa, mu_aa)?;
    let var_b = tape.sub(e_bb, mu_bb)?;
    let cov = tape.sub(e_ab, mu_ab)?;

    let l_num = tape.scale(mu_ab, 2.0);
    let l_num = tape.add_scalar(l_num, SSIM_C1);
    let c_num = tape.scale(cov, 2.0);
    let c_num = tape.add_scalar(c_num, SSIM_C2);
    let num = tape.mul(l_num, c_num)?;

    let l_den = tape.add(mu_aa, mu_bb)?;
    let l_den = tape.add_scalar(l_den, SSIM_C1);
    let c_den = tape.add(var_a, var_b)?;
    let c_den = tape.add_scalar(c_den, SSIM_C2);
    let den = tape.mul(l_den, c_den)?;
    tape.div(num, den)
}

pub fn ssim_map(a: &ImageGrid, b: &ImageGrid) -> Result<ImageGrid> {
    let mut tape = Tape::new();
    let an = tape.constant(a.clone());
    let bn = tape.constant(b.clone());
    let s = ssim_map_node(&mut tape, an, bn)?;
    Ok(tape.value(s).clone())
}

/// Appearance loss between an image and its reconstruction. Only pixels
/// whose whole 3x3 SSIM window is valid contribute; with no such pixel the
/// node evaluates to 0.
pub fn appearance_node(
    tape: &mut Tape,
    original: NodeId,
    reconstructed: NodeId,
    mask: &[bool],
    weights: &LossWeights,
    charb: &CharbonnierParams,
) -> Result<NodeId> {
    let (_, h, w) = tape.value(original).shape();
    let window_mask = erode3x3(mask, h, w);
    appearance_on_mask(tape, original, reconstructed, &window_mask, weights, charb)
}

fn appearance_on_mask(
    tape: &mut Tape,
    original: NodeId,
    reconstructed: NodeId,
    window_mask: &[bool],
    weights: &LossWeights,
    charb: &CharbonnierParams,
) -> Result<NodeId> {
    let ssim = ssim_map_node(tape, original, reconstructed)?;
    let neg = tape.neg(ssim);
    let dssim = tape.add_scalar(neg, 1.0);
    let p_ssim = charbonnier_node(tape, dssim, charb);
    let p_ssim = tape.scale(p_ssim, 0.5 * weights.alpha);
    let diff = tape.sub(original, reconstructed)?;
    let p_l1 = charbonnier_node(tape, diff, charb);
    let p_l1 = tape.scale(p_l1, 1.0 - weights.alpha);
    let per_pixel = tape.add(p_ssim, p_l1)?;
    tape.masked_mean(per_pixel, window_mask)
}

pub fn appearance_loss(
    original: &ImageGrid,
    reconstructed: &ImageGrid,
    mask: &[bool],
    weights: &LossWeights,
    charb: &CharbonnierParams,
) -> Result<f64> {
    if !original.same_shape(reconstructed) {
        return Err(Error::shape(format!(
            "appearance of {:?} vs {:?}",
            original.shape(),
            reconstructed.shape()
        )));
    }
    if mask.len() != original.plane_len() {
        return Err(Error::shape("mask size does not match image"));
    }
    let window_mask = erode3x3(mask, original.height(), original.width());
    if !window_mask.iter().any(|&m| m) {
        return Err(Error::EmptyMask("appearance loss".into()));
    }
    let mut tape = Tape::new();
    let o = tape.constant(original.clone());
    let r = tape.constant(reconstructed.clone());
    let l = appearance_on_mask(&mut tape, o, r, &window_mask, weights, charb)?;
    Ok(tape.scalar(l))
}

/// `exp(-|dI|)` for both directions, `|dI|` the channel-mean absolute Sobel
/// response.
pub fn edge_weights(image: &ImageGrid) -> (ImageGrid, ImageGrid) {
    let weight = |kernel: &[f64; 9]| {
        let g = correlate3x3(image, kernel);
        let (c, h, w) = g.shape();
        ImageGrid::from_fn(1, h, w, |_, y, x| {
            let m = (0..c).map(|ch| g.get(ch, y, x).abs()).sum::<f64>() / c as f64;
            (-m).exp()
        })
    };
    (weight(&SOBEL_X), weight(&SOBEL_Y))
}

/// Edge-aware smoothness of a `(1, H, W)` disparity node against `image`.
pub fn smoothness_node(
    tape: &mut Tape,
    disparity: NodeId,
    image: &ImageGrid,
    charb: &CharbonnierParams,
) -> Result<NodeId> {
    let d = tape.value(disparity);
    if d.shape() != (1, image.height(), image.width()) {
        return Err(Error::shape(format!(
            "disparity {:?} for image {:?}",
            d.shape(),
            image.shape()
        )));
    }
    let (wx, wy) = edge_weights(image);
    let gx = tape.stencil3(disparity, SOBEL_X);
    let gy = tape.stencil3(disparity, SOBEL_Y);
    let wx = tape.constant(wx);
    let wy = tape.constant(wy);
    let sx = tape.mul(gx, wx)?;
    let sy = tape.mul(gy, wy)?;
    let px = charbonnier_node(tape, sx, charb);
    let py = charbonnier_node(tape, sy, charb);
    let both = tape.add(px, py)?;
    Ok(tape.mean(both))
}

pub fn smoothness_loss(disparity: &ImageGrid, image: &ImageGrid, charb: &CharbonnierParams) -> Result<f64> {
    let mut tape = Tape::new();
    let d = tape.constant(disparity.clone());
    let l = smoothness_node(&mut tape, d, image, charb)?;
    Ok(tape.scalar(l))
}

// --- total objective -------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub charbonnier: CharbonnierParams,
    /// Adds the temporal term for the right camera as well.
    pub right_temporal: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            charbonnier: CharbonnierParams::default(),
            right_temporal: false,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.charbonnier.validate()
    }
}

/// Image pyramids of one snippet; `target` indexes the frame being explained.
#[derive(Debug, Clone)]
pub struct SnippetPyramids {
    pub left: Vec<Pyramid>,
    pub right: Vec<Pyramid>,
    pub target: usize,
}

/// Network outputs as tape nodes.
#[derive(Debug, Clone)]
pub struct Predictions {
    /// Left-view disparity (`D^lr`, used to rebuild the left image) per level.
    pub disp_left: [NodeId; PYRAMID_LEVELS],
    /// Right-view disparity (`D^rl`) per level.
    pub disp_right: [NodeId; PYRAMID_LEVELS],
    /// One `(6, 1, 1)` target-to-source pose per non-target frame, in frame order.
    pub poses: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    /// Downsampling factor `s` of the level: 1, 2, 4 or 8.
    pub scale: usize,
    pub side: String,
    pub ap_spatial: f64,
    pub ap_temporal: f64,
    pub smooth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub terms: Vec<LossTerm>,
    pub total: f64,
}

impl LossBreakdown {
    /// The weighted recombination of the parts.
    pub fn recombine(&self, weights: &LossWeights) -> f64 {
        let mut appearance = 0.0;
        let mut smooth = 0.0;
        for t in &self.terms {
            appearance += weights.lambda_d * t.ap_spatial + weights.lambda_p * t.ap_temporal;
            smooth += weights.lambda_ds_base / t.scale as f64 * t.smooth;
        }
        weights.lambda_ap * appearance + smooth
    }

    pub fn appearance_part(&self, weights: &LossWeights) -> f64 {
        weights.lambda_ap
            * self
                .terms
                .iter()
                .map(|t| weights.lambda_d * t.ap_spatial + weights.lambda_p * t.ap_temporal)
                .sum::<f64>()
    }
}

struct TermNodes {
    level: usize,
    side: Side,
    ap_spatial: NodeId,
    ap_temporal: Option<NodeId>,
    smooth: NodeId,
}

pub struct ObjectiveNodes {
    pub total: NodeId,
    terms: Vec<TermNodes>,
}

impl ObjectiveNodes {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            terms: self
                .terms
                .iter()
                .map(|t| LossTerm {
                    scale: Pyramid::scale_factor(t.level),
                    side: t.side.name().to_string(),
                    ap_spatial: tape.scalar(t.ap_spatial),
                    ap_temporal: t.ap_temporal.map_or(0.0, |n| tape.scalar(n)),
                    smooth: tape.scalar(t.smooth),
                })
                .collect(),
            total: tape.scalar(self.total),
        }
    }
}

pub fn validate_snippet_len(n: usize) -> Result<()> {
    if matches!(n, 2 | 3 | 5) {
        Ok(())
    } else {
        Err(Error::InvalidValue(format!("snippet length {n}, expected 2, 3 or 5")))
    }
}

fn check_inputs(tape: &Tape, snippet: &SnippetPyramids, pred: &Predictions) -> Result<()> {
    let n = snippet.left.len();
    validate_snippet_len(n)?;
    if snippet.right.len() != n {
        return Err(Error::shape(format!("{} left frames but {} right", n, snippet.right.len())));
    }
    if snippet.target >= n {
        return Err(Error::shape(format!("target {} of {} frames", snippet.target, n)));
    }
    if pred.poses.len() != n - 1 {
        return Err(Error::shape(format!("{} poses for {} frames", pred.poses.len(), n)));
    }
    let reference = snippet.left[0].levels();
    for pyr in snippet.left.iter().chain(&snippet.right) {
        for k in 0..PYRAMID_LEVELS {
            if !pyr.level(k).same_shape(&reference[k]) {
                return Err(Error::shape(format!("frame shapes differ at level {k}")));
            }
        }
    }
    for k in 0..PYRAMID_LEVELS {
        let (_, h, w) = reference[k].shape();
        for d in [pred.disp_left[k], pred.disp_right[k]] {
            if tape.value(d).shape() != (1, h, w) {
                return Err(Error::shape(format!(
                    "disparity {:?} at level {k}, image is {h}x{w}",
                    tape.value(d).shape()
                )));
            }
        }
    }
    for &p in &pred.poses {
        if tape.value(p).len() != 6 {
            return Err(Error::shape("pose node must hold 6 values"));
        }
    }
    Ok(())
}

/// Builds the full multi-scale objective on `tape`.
pub fn total_objective_node(
    tape: &mut Tape,
    snippet: &SnippetPyramids,
    pred: &Predictions,
    rig: &CameraRig,
    cfg: &ObjectiveConfig,
) -> Result<ObjectiveNodes> {
    check_inputs(tape, snippet, pred)?;
    let w = &cfg.weights;
    let charb = &cfg.charbonnier;
    let t = snippet.target;
    let mut terms = Vec::with_capacity(2 * PYRAMID_LEVELS);
    let mut weighted = Vec::new();

    for k in 0..PYRAMID_LEVELS {
        let rig_k = rig.at_level(k);
        for side in [Side::Left, Side::Right] {
            let (own, other, disp, offset) = match side {
                Side::Left => (&snippet.left, &snippet.right, pred.disp_left[k], 0.0),
                Side::Right => (&snippet.right, &snippet.left, pred.disp_right[k], rig.baseline),
            };
            let target_img = own[t].level(k);
            let target_node = tape.constant(target_img.clone());
            let opposite = tape.constant(other[t].level(k).clone());
            let (rec, mask) = reconstruct_stereo_node(tape, opposite, disp, side)?;
            let ap_spatial = appearance_node(tape, target_node, rec, &mask, w, charb)?;

            let ap_temporal = if side == Side::Left || cfg.right_temporal {
                let depth = disparity_to_depth_node(tape, disp, &rig_k);
                let mut parts = Vec::new();
                let sources = (0..own.len()).filter(|&j| j != t);
                for (pose, j) in pred.poses.iter().zip(sources) {
                    let src = tape.constant(own[j].level(k).clone());
                    let (rec_t, mask_t) = reconstruct_temporal_node(tape, src, depth, *pose, &rig_k, offset)?;
                    parts.push(appearance_node(tape, target_node, rec_t, &mask_t, w, charb)?);
                }
                Some(tape.add_all(&parts)?)
            } else {
                None
            };

            let smooth = smoothness_node(tape, disp, target_img, charb)?;

            weighted.push(tape.scale(ap_spatial, w.lambda_ap * w.lambda_d));
            if let Some(tn) = ap_temporal {
                weighted.push(tape.scale(tn, w.lambda_ap * w.lambda_p));
            }
            weighted.push(tape.scale(smooth, w.smoothness_weight(k)));
            terms.push(TermNodes {
                level: k,
                side,
                ap_spatial,
                ap_temporal,
                smooth,
            });
        }
    }
    let total = tape.add_all(&weighted)?;
    Ok(ObjectiveNodes { total, terms })
}

/// Evaluates the objective for fixed disparities and pose vectors.
pub fn total_objective(
    snippet: &SnippetPyramids,
    disp_left: &[ImageGrid; PYRAMID_LEVELS],
    disp_right: &[ImageGrid; PYRAMID_LEVELS],
    poses: &[[f64; 6]],
    rig: &CameraRig,
    cfg: &ObjectiveConfig,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let dl = disp_left.clone().map(|d| tape.constant(d));
    let dr = disp_right.clone().map(|d| tape.constant(d));
    let poses = poses.iter().map(|p| tape.constant(ImageGrid::vector(p))).collect();
    let pred = Predictions {
        disp_left: dl,
        disp_right: dr,
        poses,
    };
    let nodes = total_objective_node(&mut tape, snippet, &pred, rig, cfg)?;
    Ok(nodes.breakdown(&tape))
}
