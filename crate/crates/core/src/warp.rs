//! Differentiable inverse warping.
//!
//! Every reconstruction gathers from a source image at real-valued
//! coordinates with bilinear weights over the four neighbouring pixels. A
//! target pixel is valid only when its coordinates are finite and inside
//! `[0, W-1] x [0, H-1]` of the source; invalid pixels read as 0.
//!
//! Disparity convention: the left view is rebuilt from the right image at
//! `u - d_lr`, the right view from the left image at `u + d_rl`.

use crate::autodiff::{CustomOp, NodeId, Tape};
use crate::error::{Error, Result};
use crate::geometry::{euler_to_transform, reproject_node, CameraRig, PoseSE3};
use crate::grid::ImageGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

/// Per-target-pixel source coordinates and their validity.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleField {
    /// `(2, H, W)`: channel 0 is `u_s`, channel 1 is `v_s`.
    pub coords: ImageGrid,
    pub valid_mask: Vec<bool>,
}

impl SampleField {
    /// Derives validity for sampling a `src_height x src_width` source.
    pub fn new(coords: ImageGrid, src_height: usize, src_width: usize) -> Result<Self> {
        if coords.channels() != 2 {
            return Err(Error::shape(format!(
                "sample field needs 2 coordinate channels, got {}",
                coords.channels()
            )));
        }
        let valid_mask = (0..coords.plane_len())
            .map(|i| in_bounds(coords.data()[i], coords.data()[coords.plane_len() + i], src_height, src_width))
            .collect();
        Ok(Self { coords, valid_mask })
    }

    pub fn height(&self) -> usize {
        self.coords.height()
    }

    pub fn width(&self) -> usize {
        self.coords.width()
    }
}

/// Slack on the image bounds so coordinates that are an integer up to
/// round-off (e.g. the border row after a reprojection) stay valid.
const BOUNDS_SLACK: f64 = 1e-9;

fn in_bounds(u: f64, v: f64, h: usize, w: usize) -> bool {
    u.is_finite()
        && v.is_finite()
        && u >= -BOUNDS_SLACK
        && v >= -BOUNDS_SLACK
        && u <= (w - 1) as f64 + BOUNDS_SLACK
        && v <= (h - 1) as f64 + BOUNDS_SLACK
}

/// Coordinates this close to an integer sample that pixel exactly, so an
/// identity reprojection copies its source despite round-off.
const SNAP: f64 = 1e-11;

/// Cell corner and fraction along one axis for the forward value.
#[inline]
fn cell(c: f64, len: usize) -> (usize, usize, f64) {
    let r = c.round();
    let c = if (c - r).abs() <= SNAP { r } else { c };
    let c = c.clamp(0.0, (len - 1) as f64);
    let c0 = c.floor();
    let i0 = c0 as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, c - c0)
}

/// Corners used for the coordinate derivative: those of [`cell`], except that
/// exact integers take the cell to their left when one exists.
#[inline]
fn grad_cell(c: f64, len: usize) -> (usize, usize) {
    let (i0, i1, f) = cell(c, len);
    if f == 0.0 && i0 > 0 {
        (i0 - 1, i0)
    } else {
        (i0, i1)
    }
}

/// The four bilinear weights `(top-left, top-right, bottom-left, bottom-right)`.
pub fn bilinear_weights(fx: f64, fy: f64) -> [f64; 4] {
    [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy]
}

fn sample_forward(source: &ImageGrid, coords: &ImageGrid, mask: &[bool]) -> ImageGrid {
    let (c, h, w) = source.shape();
    let (ho, wo) = (coords.height(), coords.width());
    let n = ho * wo;
    let mut out = ImageGrid::zeros(c, ho, wo);
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let (x0, x1, fx) = cell(coords.data()[i], w);
        let (y0, y1, fy) = cell(coords.data()[n + i], h);
        let wts = bilinear_weights(fx, fy);
        for ch in 0..c {
            let p = source.plane(ch);
            let v = wts[0] * p[y0 * w + x0] + wts[1] * p[y0 * w + x1] + wts[2] * p[y1 * w + x0] + wts[3] * p[y1 * w + x1];
            out.data_mut()[ch * n + i] = v;
        }
    }
    out
}

/// Samples `source` at `field`; returns the image and its validity mask.
pub fn bilinear_sample(source: &ImageGrid, field: &SampleField) -> Result<(ImageGrid, Vec<bool>)> {
    if field.valid_mask.len() != field.coords.plane_len() {
        return Err(Error::shape("sample field mask does not match its coordinates"));
    }
    let (_, h, w) = source.shape();
    // validity is re-derived against this source so a stale mask cannot read out of bounds
    let mask: Vec<bool> = (0..field.coords.plane_len())
        .map(|i| {
            field.valid_mask[i]
                && in_bounds(
                    field.coords.data()[i],
                    field.coords.data()[field.coords.plane_len() + i],
                    h,
                    w,
                )
        })
        .collect();
    Ok((sample_forward(source, &field.coords, &mask), mask))
}

/// Tape version of [`bilinear_sample`]; differentiable in both the source
/// values and the coordinates.
pub fn bilinear_sample_node(tape: &mut Tape, source: NodeId, coords: NodeId) -> Result<(NodeId, Vec<bool>)> {
    let src = tape.value(source);
    let co = tape.value(coords);
    if co.channels() != 2 {
        return Err(Error::shape(format!("coordinates need 2 channels, got {}", co.channels())));
    }
    let (_, h, w) = src.shape();
    let n = co.plane_len();
    let mask: Vec<bool> = (0..n).map(|i| in_bounds(co.data()[i], co.data()[n + i], h, w)).collect();
    let out = sample_forward(src, co, &mask);
    let id = tape.custom(&[source, coords], out, Box::new(BilinearOp { mask: mask.clone() }));
    Ok((id, mask))
}

struct BilinearOp {
    mask: Vec<bool>,
}

impl CustomOp for BilinearOp {
    fn name(&self) -> &'static str {
        "bilinear_sample"
    }

    fn backward(&self, inputs: &[&ImageGrid], _output: &ImageGrid, g: &ImageGrid) -> Vec<Option<ImageGrid>> {
        let source = inputs[0];
        let coords = inputs[1];
        let (c, h, w) = source.shape();
        let (ho, wo) = (coords.height(), coords.width());
        let n = ho * wo;
        let mut g_src = ImageGrid::zeros(c, h, w);
        let mut g_co = ImageGrid::zeros(2, ho, wo);
        for i in 0..n {
            if !self.mask[i] {
                continue;
            }
            let u = coords.data()[i].clamp(0.0, (w - 1) as f64);
            let v = coords.data()[n + i].clamp(0.0, (h - 1) as f64);
            let (x0, x1, fx) = cell(u, w);
            let (y0, y1, fy) = cell(v, h);
            let wts = bilinear_weights(fx, fy);
            let (gx0, gx1) = grad_cell(u, w);
            let (gy0, gy1) = grad_cell(v, h);
            let mut du = 0.0;
            let mut dv = 0.0;
            for ch in 0..c {
                let go = g.data()[ch * n + i];
                if go == 0.0 {
                    continue;
                }
                let base = ch * h * w;
                let gs = g_src.data_mut();
                gs[base + y0 * w + x0] += wts[0] * go;
                gs[base + y0 * w + x1] += wts[1] * go;
                gs[base + y1 * w + x0] += wts[2] * go;
                gs[base + y1 * w + x1] += wts[3] * go;
                let p = source.plane(ch);
                // d/du uses the rows of the value cell, d/dv the columns
                let du_c = (1.0 - fy) * (p[y0 * w + gx1] - p[y0 * w + gx0]) + fy * (p[y1 * w + gx1] - p[y1 * w + gx0]);
                let dv_c = (1.0 - fx) * (p[gy1 * w + x0] - p[gy0 * w + x0]) + fx * (p[gy1 * w + x1] - p[gy0 * w + x1]);
                du += go * du_c;
                dv += go * dv_c;
            }
            g_co.data_mut()[i] = du;
            g_co.data_mut()[n + i] = dv;
        }
        vec![Some(g_src), Some(g_co)]
    }
}

fn pixel_grid(height: usize, width: usize) -> (ImageGrid, ImageGrid) {
    (
        ImageGrid::from_fn(1, height, width, |_, _, x| x as f64),
        ImageGrid::from_fn(1, height, width, |_, y, _| y as f64),
    )
}

/// Tape version of [`reconstruct_stereo`].
pub fn reconstruct_stereo_node(
    tape: &mut Tape,
    opposite: NodeId,
    disparity: NodeId,
    side: Side,
) -> Result<(NodeId, Vec<bool>)> {
    let (_, h, w) = tape.value(opposite).shape();
    let d = tape.value(disparity);
    if d.shape() != (1, h, w) {
        return Err(Error::shape(format!(
            "disparity {:?} for a {}x{} image",
            d.shape(),
            h,
            w
        )));
    }
    let (us, vs) = pixel_grid(h, w);
    let u = tape.constant(us);
    let v = tape.constant(vs);
    let shifted = match side {
        Side::Left => tape.sub(u, disparity)?,
        Side::Right => tape.add(u, disparity)?,
    };
    let coords = tape.concat(&[shifted, v])?;
    bilinear_sample_node(tape, opposite, coords)
}

/// Rebuilds the `side` view from the `opposite` view using that side's
/// disparity map. Rows are unchanged (rectified pair).
pub fn reconstruct_stereo(opposite: &ImageGrid, disparity: &ImageGrid, side: Side) -> Result<(ImageGrid, Vec<bool>)> {
    let mut tape = Tape::new();
    let o = tape.constant(opposite.clone());
    let d = tape.constant(disparity.clone());
    let (img, mask) = reconstruct_stereo_node(&mut tape, o, d, side)?;
    Ok((tape.value(img).clone(), mask))
}

/// Tape version of [`reconstruct_temporal`]. `pose` is a `(6, 1, 1)` node.
pub fn reconstruct_temporal_node(
    tape: &mut Tape,
    source: NodeId,
    target_depth: NodeId,
    pose: NodeId,
    rig: &CameraRig,
    camera_offset: f64,
) -> Result<(NodeId, Vec<bool>)> {
    let (_, h, w) = tape.value(source).shape();
    let d = tape.value(target_depth);
    if d.shape() != (1, h, w) {
        return Err(Error::shape(format!(
            "depth {:?} for a {}x{} source",
            d.shape(),
            h,
            w
        )));
    }
    if rig.width != w || rig.height != h {
        return Err(Error::shape(format!(
            "rig is {}x{}, images are {}x{}",
            rig.height, rig.width, h, w
        )));
    }
    let (coords, frustum) = reproject_node(tape, target_depth, pose, rig, camera_offset)?;
    let (img, mask) = bilinear_sample_node(tape, source, coords)?;
    debug_assert!(mask.iter().zip(&frustum).all(|(m, f)| !m || *f));
    Ok((img, mask))
}

/// Rebuilds the target view by sampling `source` where each target pixel,
/// back-projected at `target_depth`, lands after the target-to-source `pose`.
pub fn reconstruct_temporal(
    source: &ImageGrid,
    target_depth: &ImageGrid,
    pose: &PoseSE3,
    rig: &CameraRig,
) -> Result<(ImageGrid, Vec<bool>)> {
    let v = pose.to_vector();
    // the Euler chart does not cover every rotation exactly; sample with the
    // transform the vector realises
    debug_assert!(euler_to_transform(&v).max_abs_diff(pose) < 1e-9);
    let mut tape = Tape::new();
    let s = tape.constant(source.clone());
    let d = tape.constant(target_depth.clone());
    let p = tape.constant(ImageGrid::vector(&v));
    let (img, mask) = reconstruct_temporal_node(&mut tape, s, d, p, rig, 0.0)?;
    Ok((tape.value(img).clone(), mask))
}

/// 1-channel grid with 1 where `mask` is set.
pub fn mask_to_grid(mask: &[bool], height: usize, width: usize) -> ImageGrid {
    ImageGrid::from_fn(1, height, width, |_, y, x| if mask[y * width + x] { 1.0 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradient_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn smooth_image(c: usize, h: usize, w: usize, seed: u64) -> ImageGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ph: Vec<f64> = (0..c * 4).map(|_| rng.gen_range(0.0..6.28)).collect();
        ImageGrid::from_fn(c, h, w, |ch, y, x| {
            let (x, y) = (x as f64, y as f64);
            0.5 + 0.2 * (0.31 * x + ph[ch * 4]).sin() * (0.23 * y + ph[ch * 4 + 1]).cos()
                + 0.15 * (0.17 * x - 0.29 * y + ph[ch * 4 + 2]).sin()
        })
    }

    #[test]
    fn integer_coordinates_are_exact() {
        let src = smooth_image(3, 6, 7, 1);
        let coords = ImageGrid::from_fn(2, 6, 7, |c, y, x| if c == 0 { (6 - x) as f64 } else { y as f64 });
        let field = SampleField::new(coords, 6, 7).unwrap();
        let (out, mask) = bilinear_sample(&src, &field).unwrap();
        assert!(mask.iter().all(|&m| m));
        for c in 0..3 {
            for y in 0..6 {
                for x in 0..7 {
                    assert_eq!(out.get(c, y, x), src.get(c, y, 6 - x));
                }
            }
        }
    }

    #[test]
    fn centre_of_2x2_averages() {
        let src = ImageGrid::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let coords = ImageGrid::new(2, 1, 1, vec![0.5, 0.5]).unwrap();
        let (out, _) = bilinear_sample(&src, &SampleField::new(coords, 2, 2).unwrap()).unwrap();
        assert_eq!(out.data(), &[2.5]);
    }

    #[test]
    fn out_of_bounds_is_masked_and_zero() {
        let src = ImageGrid::filled(1, 4, 4, 0.7);
        let coords = ImageGrid::new(2, 1, 4, vec![-0.1, 3.0, 3.01, f64::NAN, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let field = SampleField::new(coords, 4, 4).unwrap();
        assert_eq!(field.valid_mask, vec![false, true, false, false]);
        let (out, mask) = bilinear_sample(&src, &field).unwrap();
        assert_eq!(mask, field.valid_mask);
        assert_eq!(out.data(), &[0.0, 0.7, 0.0, 0.0]);
    }

    #[test]
    fn weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10_000 {
            let w = bilinear_weights(rng.gen(), rng.gen());
            assert!((w.iter().sum::<f64>() - 1.0).abs() <= 2.0 * f64::EPSILON);
        }
    }

    #[test]
    fn coordinate_gradient_matches_finite_differences() {
        let src = smooth_image(3, 9, 11, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let coords = ImageGrid::from_fn(2, 5, 6, |c, _, _| {
            // stay away from integer kinks
            let base = rng.gen_range(1..if c == 0 { 9 } else { 7 }) as f64;
            base + rng.gen_range(0.1..0.9)
        });
        let wts = smooth_image(3, 5, 6, 8);
        let rep = gradient_check(
            |t, l| {
                let (s, _) = bilinear_sample_node(t, l[0], l[1])?;
                let w = t.constant(wts.clone());
                let p = t.mul(s, w)?;
                let sq = t.square(p);
                Ok(t.sum(sq))
            },
            &[src, coords],
            1e-5,
            1e-5,
            0.0,
        )
        .unwrap();
        assert!(rep.passed, "{rep}");
    }

    #[test]
    fn integer_coordinate_uses_left_subgradient() {
        let src = ImageGrid::new(1, 1, 4, vec![0.0, 1.0, 5.0, 6.0]).unwrap();
        let mut t = Tape::new();
        let s = t.leaf(src);
        let c = t.leaf(ImageGrid::new(2, 1, 1, vec![2.0, 0.0]).unwrap());
        let (o, _) = bilinear_sample_node(&mut t, s, c).unwrap();
        assert_eq!(t.value(o).data(), &[5.0]);
        let g = t.backward(o).unwrap().wrt(c);
        // left slope 5 - 1
        assert_eq!(g.data()[0], 4.0);
    }

    #[test]
    fn zero_disparity_copies_opposite() {
        let right = smooth_image(3, 8, 12, 3);
        let (rec, mask) = reconstruct_stereo(&right, &ImageGrid::zeros(1, 8, 12), Side::Left).unwrap();
        assert!(mask.iter().all(|&m| m));
        assert_eq!(rec, right);
    }

    #[test]
    fn integer_shift_is_recovered_bit_exact() {
        let (h, w, k) = (8, 16, 3);
        let left = smooth_image(3, h, w, 5);
        // a scene point at left column u appears at u - k in the right view
        let right = ImageGrid::from_fn(3, h, w, |c, y, x| if x + k < w { left.get(c, y, x + k) } else { 0.123 });
        let disp = ImageGrid::filled(1, h, w, k as f64);
        let (rec, mask) = reconstruct_stereo(&right, &disp, Side::Left).unwrap();
        for y in 0..h {
            for x in 0..w {
                assert_eq!(mask[y * w + x], x >= k);
                if x >= k {
                    for c in 0..3 {
                        assert_eq!(rec.get(c, y, x), left.get(c, y, x));
                    }
                }
            }
        }
        let (rec_r, mask_r) = reconstruct_stereo(&left, &disp, Side::Right).unwrap();
        for y in 0..h {
            for x in 0..w - k {
                assert!(mask_r[y * w + x]);
                assert_eq!(rec_r.get(0, y, x), right.get(0, y, x));
            }
        }
    }

    #[test]
    fn channel_permutation_commutes() {
        let src = smooth_image(3, 8, 10, 6);
        let perm = ImageGrid::concat_channels(&[&src.channel(2), &src.channel(0), &src.channel(1)]).unwrap();
        let disp = ImageGrid::from_fn(1, 8, 10, |_, y, x| 0.3 + 0.1 * ((x + y) % 5) as f64);
        let (a, _) = reconstruct_stereo(&src, &disp, Side::Right).unwrap();
        let (b, _) = reconstruct_stereo(&perm, &disp, Side::Right).unwrap();
        assert_eq!(b.channel(0), a.channel(2));
        assert_eq!(b.channel(1), a.channel(0));
        assert_eq!(b.channel(2), a.channel(1));
    }

    #[test]
    fn forward_then_backward_warp_is_near_identity() {
        let (h, w) = (24, 40);
        let img = smooth_image(3, h, w, 7);
        let disp = ImageGrid::filled(1, h, w, 2.4);
        let (there, _) = reconstruct_stereo(&img, &disp, Side::Right).unwrap();
        let (back, mask) = reconstruct_stereo(&there, &disp, Side::Left).unwrap();
        let mut err = 0.0;
        let mut n = 0;
        for y in 0..h {
            for x in 3..w - 3 {
                if mask[y * w + x] {
                    for c in 0..3 {
                        err += (back.get(c, y, x) - img.get(c, y, x)).abs();
                        n += 1;
                    }
                }
            }
        }
        assert!(err / (n as f64) < 0.02);
    }

    #[test]
    fn identity_pose_copies_source() {
        let rig = CameraRig::new(12.0, 5.5, 3.5, 0.2, 12, 8).unwrap();
        let src = smooth_image(3, 8, 12, 11);
        let depth = ImageGrid::filled(1, 8, 12, 4.0);
        let (rec, mask) = reconstruct_temporal(&src, &depth, &PoseSE3::identity(), &rig).unwrap();
        assert!(mask.iter().all(|&m| m));
        assert_eq!(rec, src);
    }

    #[test]
    fn identity_pose_copies_source_at_random_depth() {
        let rig = CameraRig::new(40.0, 27.5, 19.5, 0.25, 56, 40).unwrap();
        let src = smooth_image(3, 40, 56, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let depth = ImageGrid::from_fn(1, 40, 56, |_, _, _| rng.gen_range(1.0..30.0));
        let (rec, mask) = reconstruct_temporal(&src, &depth, &PoseSE3::identity(), &rig).unwrap();
        assert!(mask.iter().all(|&m| m));
        assert_eq!(rec, src);
    }

    #[test]
    fn baseline_pose_equals_stereo_warp() {
        let (h, w) = (16, 24);
        let rig = CameraRig::new(20.0, 11.5, 7.5, 0.4, w, h).unwrap();
        let left = smooth_image(3, h, w, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let disp = ImageGrid::from_fn(1, h, w, |_, _, _| rng.gen_range(0.5..4.0));
        let depth = crate::geometry::disparity_to_depth(&disp, &rig).unwrap();
        let pose = PoseSE3::from_translation([rig.baseline, 0.0, 0.0]);
        let (a, ma) = reconstruct_temporal(&left, &depth, &pose, &rig).unwrap();
        let (b, mb) = reconstruct_stereo(&left, &disp, Side::Right).unwrap();
        assert_eq!(ma, mb);
        assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let img = ImageGrid::zeros(3, 8, 8);
        assert!(reconstruct_stereo(&img, &ImageGrid::zeros(1, 8, 7), Side::Left).is_err());
        let rig = CameraRig::new(10.0, 4.0, 4.0, 0.1, 8, 8).unwrap();
        assert!(reconstruct_temporal(&img, &ImageGrid::filled(1, 7, 8, 1.0), &PoseSE3::identity(), &rig).is_err());
    }

    #[test]
    fn temporal_gradients_match_finite_differences() {
        let (h, w) = (8, 12);
        let rig = CameraRig::new(14.0, 5.5, 3.5, 0.3, w, h).unwrap();
        let src = smooth_image(3, h, w, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let depth = ImageGrid::from_fn(1, h, w, |_, _, _| rng.gen_range(4.0..8.0));
        let pose = ImageGrid::vector(&[0.13, -0.07, 0.11, 0.015, -0.02, 0.01]);
        let target = smooth_image(3, h, w, 15);
        let rep = gradient_check(
            |t, l| {
                let s = t.constant(src.clone());
                let (rec, mask) = reconstruct_temporal_node(t, s, l[0], l[1], &rig, 0.0)?;
                let tg = t.constant(target.clone());
                let diff = t.sub(rec, tg)?;
                let sq = t.square(diff);
                t.masked_mean(sq, &mask)
            },
            &[depth, pose],
            1e-5,
            1e-4,
            0.0,
        )
        .unwrap();
        assert!(rep.passed, "{rep}");
    }
}
