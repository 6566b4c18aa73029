//! Finite-difference checks grouped by scope, shared by `egodepth gradcheck`
//! and the acceptance suite.

use std::fmt;
use std::str::FromStr;

use egodepth::autodiff::{gradient_check, CustomOp, GradCheckReport, NodeId, Tape};
use egodepth::data::{synth_generate, PlaneSpec, StereoSnippet, SynthSpec};
use egodepth::geometry::CameraRig;
use egodepth::grid::{build_pyramid, PYRAMID_LEVELS};
use egodepth::model::{Model, ModelConfig};
use egodepth::objective::{
    charbonnier_node, smoothness_node, ssim_map_node, total_objective_node, CharbonnierParams, ObjectiveConfig,
    Predictions, SnippetPyramids,
};
use egodepth::rng::{stream, Stream};
use egodepth::warp::{bilinear_sample_node, reconstruct_stereo_node, reconstruct_temporal_node, Side};
use egodepth::{ImageGrid, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOL_REL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Charbonnier,
    Ssim,
    Warp,
    Objective,
    Model,
    All,
}

impl Scope {
    pub const EACH: [Scope; 5] = [Scope::Charbonnier, Scope::Ssim, Scope::Warp, Scope::Objective, Scope::Model];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Charbonnier => "charbonnier",
            Scope::Ssim => "ssim",
            Scope::Warp => "warp",
            Scope::Objective => "objective",
            Scope::Model => "model",
            Scope::All => "all",
        }
    }
}

impl FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Scope::EACH
            .into_iter()
            .chain([Scope::All])
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown scope {s:?} (charbonnier|ssim|warp|objective|model|all)"))
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub scope: Scope,
    pub name: &'static str,
    pub report: GradCheckReport,
}

/// Identity in the forward pass with a slightly wrong adjoint; the negative
/// control for the checker.
struct SkewedIdentity;

impl CustomOp for SkewedIdentity {
    fn name(&self) -> &'static str {
        "skewed_identity"
    }

    fn backward(&self, _inputs: &[&ImageGrid], _output: &ImageGrid, grad_out: &ImageGrid) -> Vec<Option<ImageGrid>> {
        vec![Some(grad_out.map(|g| g * 1.001))]
    }
}

fn finish(tape: &mut Tape, out: NodeId, inject_bug: bool) -> NodeId {
    if inject_bug {
        let v = tape.value(out).clone();
        tape.custom(&[out], v, Box::new(SkewedIdentity))
    } else {
        out
    }
}

fn check<F>(f: F, point: &[ImageGrid], inject_bug: bool) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    gradient_check(
        |t, l| {
            let out = f(t, l)?;
            Ok(finish(t, out, inject_bug))
        },
        point,
        STEP,
        TOL_REL,
        0.0,
    )
}

/// Smooth multi-frequency test pattern in (0.1, 0.9).
pub fn pattern(channels: usize, height: usize, width: usize, seed: u64) -> ImageGrid {
    let mut rng = stream(seed, Stream::Synth);
    let ph: Vec<f64> = (0..channels * 3).map(|_| rng.gen_range(0.0..6.28)).collect();
    ImageGrid::from_fn(channels, height, width, |c, y, x| {
        let (x, y) = (x as f64, y as f64);
        0.5 + 0.25 * (0.45 * x + ph[c * 3]).sin() * (0.3 * y + ph[c * 3 + 1]).cos()
            + 0.15 * (0.21 * x + 0.17 * y + ph[c * 3 + 2]).sin()
    })
}

/// Values `base + frac` with the fractional part kept away from integer kinks.
fn off_grid(height: usize, width: usize, lo: u32, hi: u32, seed: u64) -> ImageGrid {
    let mut rng = stream(seed, Stream::Synth);
    ImageGrid::from_fn(1, height, width, |_, _, _| {
        rng.gen_range(lo..hi) as f64 + rng.gen_range(0.2..0.8)
    })
}

fn charbonnier_checks(inject_bug: bool) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = stream(1, Stream::Synth);
    let x = ImageGrid::from_fn(8, 1, 1, |_, _, _| rng.gen_range(-1.0..1.0));
    let p = CharbonnierParams::default();
    let r = check(
        |t, l| {
            let c = charbonnier_node(t, l[0], &p);
            Ok(t.sum(c))
        },
        &[x],
        inject_bug,
    )?;
    Ok(vec![("charbonnier", r)])
}

fn ssim_checks(inject_bug: bool) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let r = check(
        |t, l| {
            let s = ssim_map_node(t, l[0], l[1])?;
            Ok(t.mean(s))
        },
        &[pattern(3, 6, 7, 2), pattern(3, 6, 7, 3)],
        inject_bug,
    )?;
    Ok(vec![("ssim_map", r)])
}

fn warp_checks(inject_bug: bool) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut out = Vec::new();

    let mut rng = stream(4, Stream::Synth);
    let coords = ImageGrid::from_fn(2, 5, 6, |c, _, _| {
        rng.gen_range(1..if c == 0 { 9 } else { 7 }) as f64 + rng.gen_range(0.2..0.8)
    });
    let weights = pattern(3, 5, 6, 5);
    let r = check(
        |t, l| {
            let (s, _) = bilinear_sample_node(t, l[0], l[1])?;
            let w = t.constant(weights.clone());
            let p = t.mul(s, w)?;
            let sq = t.square(p);
            Ok(t.sum(sq))
        },
        &[pattern(3, 9, 11, 6), coords],
        inject_bug,
    )?;
    out.push(("bilinear_sample", r));

    let (h, w) = (8, 12);
    let target = pattern(3, h, w, 7);
    for (name, side) in [("reconstruct_stereo_left", Side::Left), ("reconstruct_stereo_right", Side::Right)] {
        let r = check(
            |t, l| {
                let (rec, mask) = reconstruct_stereo_node(t, l[0], l[1], side)?;
                let tg = t.constant(target.clone());
                let d = t.sub(rec, tg)?;
                let sq = t.square(d);
                t.masked_mean(sq, &mask)
            },
            &[pattern(3, h, w, 8), off_grid(h, w, 0, 3, 9)],
            inject_bug,
        )?;
        out.push((name, r));
    }

    let rig = CameraRig::new(14.0, 5.5, 3.5, 0.3, w, h)?;
    // at seed 10 a sample crosses an integer kink within one step of theta
    let mut rng = stream(14, Stream::Synth);
    let depth = ImageGrid::from_fn(1, h, w, |_, _, _| rng.gen_range(4.0..8.0));
    let pose = ImageGrid::vector(&[0.13, -0.07, 0.11, 0.015, -0.02, 0.01]);
    let src = pattern(3, h, w, 11);
    let r = check(
        |t, l| {
            let s = t.constant(src.clone());
            let (rec, mask) = reconstruct_temporal_node(t, s, l[0], l[1], &rig, 0.0)?;
            let tg = t.constant(target.clone());
            let d = t.sub(rec, tg)?;
            let sq = t.square(d);
            t.masked_mean(sq, &mask)
        },
        &[depth, pose],
        inject_bug,
    )?;
    out.push(("reconstruct_temporal", r));
    Ok(out)
}

fn objective_checks(inject_bug: bool) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut out = Vec::new();
    let c = CharbonnierParams::default();
    let img = pattern(3, 7, 9, 12);
    let mut rng = stream(13, Stream::Synth);
    let disp = ImageGrid::from_fn(1, 7, 9, |_, _, _| rng.gen_range(1.0..4.0));
    let r = check(|t, l| smoothness_node(t, l[0], &img, &c), &[disp], inject_bug)?;
    out.push(("smoothness_loss", r));

    // smallest size the 4-level pyramid admits
    let (h, w, n) = (16, 24, 3);
    let rig = CameraRig::new(19.2, 11.5, 7.5, 0.5, w, h)?;
    let left: Vec<ImageGrid> = (0..n).map(|i| pattern(3, h, w, 20 + i as u64)).collect();
    let right: Vec<ImageGrid> = (0..n).map(|i| pattern(3, h, w, 30 + i as u64)).collect();
    let pyr = SnippetPyramids {
        left: left.iter().map(build_pyramid).collect::<Result<_>>()?,
        right: right.iter().map(build_pyramid).collect::<Result<_>>()?,
        target: 1,
    };
    let mut point = Vec::new();
    for side in 0..2u64 {
        for k in 0..PYRAMID_LEVELS {
            let hi = (3u32 >> k).max(1);
            point.push(off_grid(h >> k, w >> k, 0, hi, 40 + 10 * side + k as u64));
        }
    }
    point.push(ImageGrid::vector(&[-0.04, 0.01, -0.12, 0.004, -0.01, 0.002]));
    point.push(ImageGrid::vector(&[0.05, -0.01, 0.11, -0.003, 0.012, -0.001]));
    let cfg = ObjectiveConfig::default();
    let r = check(
        |t, l| {
            let pred = Predictions {
                disp_left: [l[0], l[1], l[2], l[3]],
                disp_right: [l[4], l[5], l[6], l[7]],
                poses: vec![l[8], l[9]],
            };
            Ok(total_objective_node(t, &pyr, &pred, &rig, &cfg)?.total)
        },
        &point,
        inject_bug,
    )?;
    out.push(("total_objective", r));
    Ok(out)
}

/// Three-frame 16x32 scene for the micro-network check.
pub fn micro_snippet() -> Result<StereoSnippet> {
    let rig = CameraRig::new(25.6, 15.5, 7.5, 0.5, 32, 16)?;
    synth_generate(&SynthSpec {
        width: 32,
        height: 16,
        planes: vec![
            PlaneSpec {
                depth: 4.0,
                tilt: 0.2,
                texture_seed: 3,
                contrast: 0.35,
                texture_px: 4.0,
            },
            PlaneSpec {
                depth: 2.0,
                tilt: -1.3,
                texture_seed: 4,
                contrast: 0.35,
                texture_px: 4.0,
            },
        ],
        motion: vec![[0.05, 0.0, 0.2, 0.0, 0.01, 0.0]; 2],
        rig,
    })
}

fn model_checks(inject_bug: bool) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut model = Model::new(&ModelConfig::micro(), 3, 23)?;
    // zero head biases leave the pose exactly at the identity, on the frustum edge
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let mut values = model.all_values();
    for v in values.iter_mut().flat_map(|v| v.data_mut()) {
        *v += rng.gen_range(-0.05..0.05);
    }
    model.set_all_values(&values)?;
    let snippet = micro_snippet()?;
    let pyr = snippet.pyramids()?;
    let cfg = ObjectiveConfig::default();
    let nd = model.disp.params().len();
    let r = check(
        |t, l| Ok(model.objective_on_tape(t, &l[..nd], &l[nd..], &snippet, &pyr, &cfg)?.total),
        &model.all_values(),
        inject_bug,
    )?;
    Ok(vec![("micro_network", r)])
}

pub fn run_scope(scope: Scope, inject_bug: bool) -> Result<Vec<CheckResult>> {
    let scopes: Vec<Scope> = if scope == Scope::All { Scope::EACH.to_vec() } else { vec![scope] };
    let mut out = Vec::new();
    for s in scopes {
        let checks = match s {
            Scope::Charbonnier => charbonnier_checks(inject_bug)?,
            Scope::Ssim => ssim_checks(inject_bug)?,
            Scope::Warp => warp_checks(inject_bug)?,
            Scope::Objective => objective_checks(inject_bug)?,
            Scope::Model => model_checks(inject_bug)?,
            Scope::All => unreachable!("expanded above"),
        };
        out.extend(checks.into_iter().map(|(name, report)| CheckResult { scope: s, name, report }));
    }
    Ok(out)
}

pub const TABLE_HEADER: &str = "scope        check                     status  max_rel     max_abs     coords  worst";

pub fn table_row(c: &CheckResult) -> String {
    format!(
        "{:<12} {:<25} {:<7} {:<11.3e} {:<11.3e} {:<7} {}:{}",
        c.scope.name(),
        c.name,
        if c.report.passed { "PASS" } else { "FAIL" },
        c.report.max_rel_error,
        c.report.max_abs_error,
        c.report.coordinates,
        c.report.worst_coordinate.0,
        c.report.worst_coordinate.1
    )
}
