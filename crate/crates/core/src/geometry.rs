//! Pinhole stereo rig, rigid transforms and pixel reprojection.
//!
//! Rotations use the `R = Rz(psi) * Ry(theta) * Rx(rho)` convention on the pose
//! vector `(tx, ty, tz, rho, theta, psi)`, angles in radians. A pose maps points
//! from the target camera frame into the source camera frame:
//! `X_src = R * X_tgt + t`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, NodeId, Tape};
use crate::error::{Error, Result};
use crate::grid::ImageGrid;

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

/// Points whose transformed depth falls at or below this are out of frustum.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRig {
    /// Focal length in pixels.
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
    /// Stereo baseline in meters; the right camera sits at `+baseline` along x.
    pub baseline: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraRig {
    pub fn new(f: f64, cx: f64, cy: f64, baseline: f64, width: usize, height: usize) -> Result<Self> {
        let rig = Self {
            f,
            cx,
            cy,
            baseline,
            width,
            height,
        };
        rig.validate()?;
        Ok(rig)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f > 0.0) || !self.f.is_finite() {
            return Err(Error::InvalidValue(format!("focal length {}", self.f)));
        }
        if !(self.baseline > 0.0) || !self.baseline.is_finite() {
            return Err(Error::InvalidValue(format!("baseline {}", self.baseline)));
        }
        if !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::InvalidValue("principal point".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidValue("zero image size".into()));
        }
        Ok(())
    }

    pub fn k_matrix(&self) -> Mat3 {
        [[self.f, 0.0, self.cx], [0.0, self.f, self.cy], [0.0, 0.0, 1.0]]
    }

    pub fn k_inverse(&self) -> Mat3 {
        let fi = 1.0 / self.f;
        [[fi, 0.0, -self.cx * fi], [0.0, fi, -self.cy * fi], [0.0, 0.0, 1.0]]
    }

    /// `f * b`, the constant linking disparity (px) and depth (m).
    pub fn fb(&self) -> f64 {
        self.f * self.baseline
    }

    /// Intrinsics of pyramid level `k` (2x2 mean-pool applied `k` times). A
    /// coarse pixel centre `j` sits at fine coordinate `2j + 0.5`.
    pub fn at_level(&self, k: usize) -> CameraRig {
        let mut rig = *self;
        for _ in 0..k {
            rig.f *= 0.5;
            rig.cx = (rig.cx + 0.5) * 0.5 - 0.5;
            rig.cy = (rig.cy + 0.5) * 0.5 - 0.5;
            rig.width = rig.width.div_ceil(2);
            rig.height = rig.height.div_ceil(2);
        }
        rig
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rig: CameraRig = serde_json::from_str(&text)
            .map_err(|e| Error::data(path, format!("calibration: {e}")))?;
        rig.validate().map_err(|e| Error::data(path, e.to_string()))?;
        Ok(rig)
    }

    pub fn write_json_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Builds a rig from a KITTI `calib_cam_to_cam.txt`, using the rectified
    /// projections of cameras 02 (left) and 03 (right). The baseline comes
    /// from the difference of the projection offsets `P[0][3] = -f * b_x`.
    pub fn from_kitti_cam_to_cam(text: &str) -> Result<Self> {
        let field = |key: &str| -> Result<Vec<f64>> {
            let line = text
                .lines()
                .find(|l| l.trim_start().starts_with(&format!("{key}:")))
                .ok_or_else(|| Error::InvalidValue(format!("missing {key} in cam-to-cam file")))?;
            line.split_once(':')
                .map(|(_, v)| v)
                .unwrap_or("")
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| Error::InvalidValue(format!("bad number {t:?} in {key}")))
                })
                .collect()
        };
        let p2 = field("P_rect_02")?;
        let p3 = field("P_rect_03")?;
        if p2.len() != 12 || p3.len() != 12 {
            return Err(Error::InvalidValue("P_rect entries need 12 values".into()));
        }
        let size = field("S_rect_02")?;
        if size.len() != 2 {
            return Err(Error::InvalidValue("S_rect_02 needs 2 values".into()));
        }
        let f = p2[0];
        let baseline = (p2[3] - p3[3]) / f;
        CameraRig::new(f, p2[2], p2[6], baseline, size[0] as usize, size[1] as usize)
    }
}

// --- small 3x3 helpers -----------------------------------------------------

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub fn determinant(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

fn rot_x(a: f64) -> (Mat3, Mat3) {
    let (s, c) = a.sin_cos();
    (
        [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]],
        [[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]],
    )
}

fn rot_y(a: f64) -> (Mat3, Mat3) {
    let (s, c) = a.sin_cos();
    (
        [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
        [[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]],
    )
}

fn rot_z(a: f64) -> (Mat3, Mat3) {
    let (s, c) = a.sin_cos();
    (
        [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
        [[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]],
    )
}

/// `Rz(psi) * Ry(theta) * Rx(rho)` and its partials with respect to
/// `(rho, theta, psi)`.
pub fn euler_rotation_with_jacobian(rho: f64, theta: f64, psi: f64) -> (Mat3, [Mat3; 3]) {
    let (rx, drx) = rot_x(rho);
    let (ry, dry) = rot_y(theta);
    let (rz, drz) = rot_z(psi);
    let zy = mat_mul(&rz, &ry);
    let r = mat_mul(&zy, &rx);
    let d_rho = mat_mul(&zy, &drx);
    let d_theta = mat_mul(&mat_mul(&rz, &dry), &rx);
    let d_psi = mat_mul(&mat_mul(&drz, &ry), &rx);
    (r, [d_rho, d_theta, d_psi])
}

/// Rigid transform `[R | t]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self {
            translation: t,
            ..Self::identity()
        }
    }

    /// From a 3x4 row-major `[R | t]` (KITTI odometry pose rows).
    pub fn from_row_major_3x4(v: &[f64; 12]) -> Self {
        Self {
            rotation: [[v[0], v[1], v[2]], [v[4], v[5], v[6]], [v[8], v[9], v[10]]],
            translation: [v[3], v[7], v[11]],
        }
    }

    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1],
            r[2][2], t[2],
        ]
    }

    pub fn matrix(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            [r[0][0], r[0][1], r[0][2], t[0]],
            [r[1][0], r[1][1], r[1][2], t[1]],
            [r[2][0], r[2][1], r[2][2], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        let q = mat_vec(&self.rotation, p);
        [q[0] + self.translation[0], q[1] + self.translation[1], q[2] + self.translation[2]]
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: mat_mul(&self.rotation, &other.rotation),
            translation: self.transform_point(&other.translation),
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = transpose(&self.rotation);
        let t = mat_vec(&rt, &self.translation);
        PoseSE3 {
            rotation: rt,
            translation: [-t[0], -t[1], -t[2]],
        }
    }

    /// `(rho, theta, psi)` recovered from the rotation (valid away from
    /// `theta = +-pi/2`).
    pub fn euler_angles(&self) -> Vec3 {
        let r = &self.rotation;
        let theta = (-r[2][0]).clamp(-1.0, 1.0).asin();
        let rho = r[2][1].atan2(r[2][2]);
        let psi = r[1][0].atan2(r[0][0]);
        [rho, theta, psi]
    }

    /// `(tx, ty, tz, rho, theta, psi)`
    pub fn to_vector(&self) -> [f64; 6] {
        let [rho, theta, psi] = self.euler_angles();
        let t = self.translation;
        [t[0], t[1], t[2], rho, theta, psi]
    }

    /// Rotation angle of `R` in radians.
    pub fn rotation_angle(&self) -> f64 {
        let r = &self.rotation;
        // atan2 keeps precision near the identity where acos does not
        let cos = (r[0][0] + r[1][1] + r[2][2] - 1.0) * 0.5;
        let axis = [r[2][1] - r[1][2], r[0][2] - r[2][0], r[1][0] - r[0][1]];
        let sin = 0.5 * axis.iter().map(|v| v * v).sum::<f64>().sqrt();
        sin.atan2(cos)
    }

    pub fn translation_norm(&self) -> f64 {
        self.translation.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest absolute entry difference of the 3x4 matrices.
    pub fn max_abs_diff(&self, other: &PoseSE3) -> f64 {
        self.to_row_major_3x4()
            .iter()
            .zip(other.to_row_major_3x4().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Pose vector `(tx, ty, tz, rho, theta, psi)` to a rigid transform.
pub fn euler_to_transform(pose6: &[f64; 6]) -> PoseSE3 {
    let (r, _) = euler_rotation_with_jacobian(pose6[3], pose6[4], pose6[5]);
    PoseSE3 {
        rotation: r,
        translation: [pose6[0], pose6[1], pose6[2]],
    }
}

/// Per-pixel depth `f * b / disparity`.
pub fn disparity_to_depth(disparity: &ImageGrid, rig: &CameraRig) -> Result<ImageGrid> {
    if let Some(bad) = disparity.data().iter().find(|&&d| !(d > 0.0)) {
        return Err(Error::InvalidValue(format!("non-positive disparity {bad}")));
    }
    let fb = rig.fb();
    Ok(disparity.map(|d| fb / d))
}

/// Tape version of [`disparity_to_depth`].
pub fn disparity_to_depth_node(tape: &mut Tape, disparity: NodeId, rig: &CameraRig) -> NodeId {
    let inv = tape.recip(disparity);
    tape.scale(inv, rig.fb())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reprojection {
    pub u: f64,
    pub v: f64,
    /// Depth of the point in the source camera.
    pub depth: f64,
    pub in_frustum: bool,
}

/// Back-projects pixel `(u, v)` at `depth`, moves it by `pose` and projects it
/// with perspective division.
pub fn reproject(u: f64, v: f64, depth: f64, pose: &PoseSE3, rig: &CameraRig) -> Reprojection {
    let ray = [(u - rig.cx) / rig.f, (v - rig.cy) / rig.f, 1.0];
    let x = [ray[0] * depth, ray[1] * depth, depth];
    let xs = pose.transform_point(&x);
    let in_frustum = xs[2] > MIN_DEPTH;
    Reprojection {
        u: rig.f * xs[0] / xs[2] + rig.cx,
        v: rig.f * xs[1] / xs[2] + rig.cy,
        depth: xs[2],
        in_frustum,
    }
}

/// Partials of `(u', v')` with respect to depth and the six pose parameters,
/// evaluated at a pose given as a vector. Row 0 is `u'`, row 1 is `v'`;
/// columns are `(depth, tx, ty, tz, rho, theta, psi)`.
pub fn reproject_jacobian(u: f64, v: f64, depth: f64, pose6: &[f64; 6], rig: &CameraRig) -> [[f64; 7]; 2] {
    let (r, dr) = euler_rotation_with_jacobian(pose6[3], pose6[4], pose6[5]);
    let ray = [(u - rig.cx) / rig.f, (v - rig.cy) / rig.f, 1.0];
    let x = [ray[0] * depth, ray[1] * depth, depth];
    let rx = mat_vec(&r, &x);
    let xs = [rx[0] + pose6[0], rx[1] + pose6[1], rx[2] + pose6[2]];
    projection_jacobian(&xs, &r, &dr, &ray, &x, rig)
}

fn projection_jacobian(xs: &Vec3, r: &Mat3, dr: &[Mat3; 3], ray: &Vec3, x: &Vec3, rig: &CameraRig) -> [[f64; 7]; 2] {
    let iz = 1.0 / xs[2];
    let du = [rig.f * iz, 0.0, -rig.f * xs[0] * iz * iz];
    let dv = [0.0, rig.f * iz, -rig.f * xs[1] * iz * iz];
    let dot = |a: &Vec3, b: &Vec3| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let mut jac = [[0.0; 7]; 2];
    let d_depth = mat_vec(r, ray);
    let mut cols: [Vec3; 7] = [[0.0; 3]; 7];
    cols[0] = d_depth;
    cols[1] = [1.0, 0.0, 0.0];
    cols[2] = [0.0, 1.0, 0.0];
    cols[3] = [0.0, 0.0, 1.0];
    for k in 0..3 {
        cols[4 + k] = mat_vec(&dr[k], x);
    }
    for (j, col) in cols.iter().enumerate() {
        jac[0][j] = dot(&du, col);
        jac[1][j] = dot(&dv, col);
    }
    jac
}

/// Differentiable reprojection of a whole depth map.
///
/// `depth` is a `(1, H, W)` node and `pose` a `(6, 1, 1)` node holding the
/// target-to-source pose vector. The result is a `(2, H, W)` node of source
/// coordinates `(u', v')`; pixels that land behind the source camera get NaN
/// coordinates and are reported `false` in the returned frustum mask.
///
/// `camera_offset` conjugates the pose by a shift along x, so a pose expressed
/// in the left camera frame can drive the right camera (`offset = baseline`).
pub fn reproject_node(
    tape: &mut Tape,
    depth: NodeId,
    pose: NodeId,
    rig: &CameraRig,
    camera_offset: f64,
) -> Result<(NodeId, Vec<bool>)> {
    let d = tape.value(depth);
    let p = tape.value(pose);
    if d.channels() != 1 {
        return Err(Error::shape(format!("depth map has {} channels", d.channels())));
    }
    if p.len() != 6 {
        return Err(Error::shape(format!("pose vector has {} entries", p.len())));
    }
    let pose6: [f64; 6] = p.data().try_into().expect("len 6");
    let (h, w) = (d.height(), d.width());
    let transform = euler_to_transform(&pose6);
    let mut coords = ImageGrid::zeros(2, h, w);
    let mut mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let z = d.get(0, y, x);
            let ray = [(x as f64 - rig.cx) / rig.f, (y as f64 - rig.cy) / rig.f, 1.0];
            let pt = [ray[0] * z + camera_offset, ray[1] * z, z];
            let mut xs = transform.transform_point(&pt);
            xs[0] -= camera_offset;
            let i = y * w + x;
            if xs[2] > MIN_DEPTH && z.is_finite() {
                coords.set(0, y, x, rig.f * xs[0] / xs[2] + rig.cx);
                coords.set(1, y, x, rig.f * xs[1] / xs[2] + rig.cy);
                mask[i] = true;
            } else {
                coords.set(0, y, x, f64::NAN);
                coords.set(1, y, x, f64::NAN);
            }
        }
    }
    let op = ReprojectOp {
        rig: *rig,
        camera_offset,
        mask: mask.clone(),
    };
    Ok((tape.custom(&[depth, pose], coords, Box::new(op)), mask))
}

struct ReprojectOp {
    rig: CameraRig,
    camera_offset: f64,
    mask: Vec<bool>,
}

impl CustomOp for ReprojectOp {
    fn name(&self) -> &'static str {
        "reproject"
    }

    fn backward(&self, inputs: &[&ImageGrid], _output: &ImageGrid, grad_out: &ImageGrid) -> Vec<Option<ImageGrid>> {
        let depth = inputs[0];
        let pose6: [f64; 6] = inputs[1].data().try_into().expect("len 6");
        let (r, dr) = euler_rotation_with_jacobian(pose6[3], pose6[4], pose6[5]);
        let (h, w) = (depth.height(), depth.width());
        let rig = &self.rig;
        let mut g_depth = ImageGrid::zeros(1, h, w);
        let mut g_pose = [0.0; 6];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if !self.mask[i] {
                    continue;
                }
                let gu = grad_out.get(0, y, x);
                let gv = grad_out.get(1, y, x);
                if gu == 0.0 && gv == 0.0 {
                    continue;
                }
                let z = depth.get(0, y, x);
                let ray = [(x as f64 - rig.cx) / rig.f, (y as f64 - rig.cy) / rig.f, 1.0];
                let pt = [ray[0] * z + self.camera_offset, ray[1] * z, z];
                let rx = mat_vec(&r, &pt);
                let xs = [
                    rx[0] + pose6[0] - self.camera_offset,
                    rx[1] + pose6[1],
                    rx[2] + pose6[2],
                ];
                let jac = projection_jacobian(&xs, &r, &dr, &ray, &pt, rig);
                g_depth.data_mut()[i] = gu * jac[0][0] + gv * jac[1][0];
                for k in 0..6 {
                    g_pose[k] += gu * jac[0][k + 1] + gv * jac[1][k + 1];
                }
            }
        }
        let (pc, ph, pw) = inputs[1].shape();
        let g_pose = ImageGrid::new(pc, ph, pw, g_pose.to_vec()).expect("pose shape");
        vec![Some(g_depth), Some(g_pose)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradient_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn rig() -> CameraRig {
        CameraRig::new(100.0, 47.5, 31.5, 0.5, 96, 64).unwrap()
    }

    fn random_pose(rng: &mut impl Rng) -> [f64; 6] {
        [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
        ]
    }

    #[test]
    fn depth_from_disparity() {
        let r = CameraRig::new(100.0, 10.0, 10.0, 0.5, 20, 20).unwrap();
        let d = ImageGrid::filled(1, 2, 2, 2.0);
        let z = disparity_to_depth(&d, &r).unwrap();
        assert!(z.data().iter().all(|&v| v == 25.0));
        let z2 = disparity_to_depth(&d.map(|v| 2.0 * v), &r).unwrap();
        assert!(z2.data().iter().all(|&v| v == 12.5));
        assert!(disparity_to_depth(&ImageGrid::vector(&[1.0, 0.0]), &r).is_err());
    }

    #[test]
    fn depth_gradient_matches_finite_differences() {
        let r = rig();
        let d = ImageGrid::vector(&[0.7, 3.0, 12.5]);
        let rep = gradient_check(
            |t, l| {
                let z = disparity_to_depth_node(t, l[0], &r);
                Ok(t.sum(z))
            },
            &[d.clone()],
            1e-5,
            1e-6,
            0.0,
        )
        .unwrap();
        assert!(rep.passed, "{rep}");
        // closed form -fb/d^2
        let mut t = Tape::new();
        let dn = t.leaf(d.clone());
        let z = disparity_to_depth_node(&mut t, dn, &r);
        let s = t.sum(z);
        let g = t.backward(s).unwrap().wrt(dn);
        for (gi, di) in g.data().iter().zip(d.data()) {
            assert!((gi + r.fb() / (di * di)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_vector_is_identity() {
        assert_eq!(euler_to_transform(&[0.0; 6]), PoseSE3::identity());
    }

    #[test]
    fn roll_by_pi() {
        let p = euler_to_transform(&[0.0, 0.0, 0.0, PI, 0.0, 0.0]);
        let expect = [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((p.rotation[i][j] - expect[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn euler_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let v = random_pose(&mut rng);
            let back = euler_to_transform(&v).to_vector();
            for k in 0..6 {
                assert!((back[k] - v[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rotation_jacobian_matches_finite_differences() {
        let a = [0.3, -0.2, 0.7];
        let (_, dr) = euler_rotation_with_jacobian(a[0], a[1], a[2]);
        let h = 1e-6;
        for k in 0..3 {
            let mut p = a;
            let mut m = a;
            p[k] += h;
            m[k] -= h;
            let (rp, _) = euler_rotation_with_jacobian(p[0], p[1], p[2]);
            let (rm, _) = euler_rotation_with_jacobian(m[0], m[1], m[2]);
            for i in 0..3 {
                for j in 0..3 {
                    let fd = (rp[i][j] - rm[i][j]) / (2.0 * h);
                    assert!((fd - dr[k][i][j]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn identity_pose_reprojects_in_place() {
        let r = rig();
        for (u, v, z) in [(3.0, 4.0, 1.0), (50.2, 10.7, 30.0), (0.0, 63.0, 0.1)] {
            let p = reproject(u, v, z, &PoseSE3::identity(), &r);
            assert!((p.u - u).abs() < 1e-12 && (p.v - v).abs() < 1e-12);
            assert!(p.in_frustum);
        }
    }

    #[test]
    fn baseline_translation_is_stereo_disparity() {
        let r = rig();
        let pose = PoseSE3::from_translation([r.baseline, 0.0, 0.0]);
        for z in [0.5, 1.0, 3.7, 10.0, 80.0] {
            for u in [0.0, 20.5, 95.0] {
                let p = reproject(u, 12.0, z, &pose, &r);
                assert!((p.u - u - r.fb() / z).abs() < 1e-9);
                assert!((p.v - 12.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn points_behind_camera_are_flagged() {
        let r = rig();
        let pose = PoseSE3::from_translation([0.0, 0.0, -5.0]);
        assert!(!reproject(10.0, 10.0, 2.0, &pose, &r).in_frustum);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let r = rig();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let mut p6 = random_pose(&mut rng);
            p6[2] = p6[2].abs() * 0.2;
            let (u, v, z) = (rng.gen_range(0.0..96.0), rng.gen_range(0.0..64.0), rng.gen_range(2.0..20.0));
            let jac = reproject_jacobian(u, v, z, &p6, &r);
            let h = 1e-6;
            let eval = |z: f64, p: &[f64; 6]| {
                let q = reproject(u, v, z, &euler_to_transform(p), &r);
                [q.u, q.v]
            };
            let mut params = [0.0; 7];
            params[0] = z;
            params[1..].copy_from_slice(&p6);
            for j in 0..7 {
                let mut pp = params;
                let mut pm = params;
                pp[j] += h;
                pm[j] -= h;
                let fp = eval(pp[0], pp[1..].try_into().unwrap());
                let fm = eval(pm[0], pm[1..].try_into().unwrap());
                for row in 0..2 {
                    let fd = (fp[row] - fm[row]) / (2.0 * h);
                    let rel = crate::autodiff::relative_error(jac[row][j], fd);
                    assert!(rel < 1e-5, "row {row} col {j}: {} vs {fd}", jac[row][j]);
                }
            }
        }
    }

    #[test]
    fn reproject_node_gradients() {
        let r = CameraRig::new(20.0, 5.5, 3.5, 0.3, 12, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let depth = ImageGrid::from_fn(1, 8, 12, |_, _, _| rng.gen_range(3.0..9.0));
        let pose = ImageGrid::vector(&[0.1, -0.05, 0.2, 0.02, -0.03, 0.04]);
        let weights = ImageGrid::from_fn(2, 8, 12, |_, _, _| rng.gen_range(-1.0..1.0));
        for offset in [0.0, 0.3] {
            let rep = gradient_check(
                |t, l| {
                    let (c, _) = reproject_node(t, l[0], l[1], &r, offset)?;
                    let w = t.constant(weights.clone());
                    let p = t.mul(c, w)?;
                    Ok(t.sum(p))
                },
                &[depth.clone(), pose.clone()],
                1e-5,
                1e-6,
                0.0,
            )
            .unwrap();
            assert!(rep.passed, "{rep}");
        }
    }

    #[test]
    fn rig_levels_keep_pixel_centres() {
        let r = rig();
        let r1 = r.at_level(1);
        // fine pixels 2j and 2j+1 average to coarse j; their rays average to coarse ray
        let fine = |u: f64| (u - r.cx) / r.f;
        let coarse = |u: f64| (u - r1.cx) / r1.f;
        for j in 0..10 {
            let avg = 0.5 * (fine(2.0 * j as f64) + fine(2.0 * j as f64 + 1.0));
            assert!((coarse(j as f64) - avg).abs() < 1e-12);
        }
        assert_eq!((r.at_level(3).width, r.at_level(3).height), (12, 8));
    }

    #[test]
    fn kitti_cam_to_cam_parse() {
        let text = "calib_time: 09-Jan-2012 13:57:47\n\
            S_rect_02: 1.242000e+03 3.750000e+02\n\
            P_rect_02: 7.215377e+02 0.000000e+00 6.095593e+02 4.485728e+01 0.000000e+00 7.215377e+02 1.728540e+02 2.163791e-01 0.000000e+00 0.000000e+00 1.000000e+00 2.745884e-03\n\
            P_rect_03: 7.215377e+02 0.000000e+00 6.095593e+02 -3.395242e+02 0.000000e+00 7.215377e+02 1.728540e+02 2.199936e+00 0.000000e+00 0.000000e+00 1.000000e+00 2.729905e-03\n";
        let r = CameraRig::from_kitti_cam_to_cam(text).unwrap();
        assert_eq!((r.width, r.height), (1242, 375));
        assert!((r.f - 721.5377).abs() < 1e-9);
        assert!((r.baseline - 0.5327).abs() < 1e-3);
        assert!(CameraRig::from_kitti_cam_to_cam("P_rect_02: 1 2 3").is_err());
    }

    #[test]
    fn calibration_json_roundtrip_and_rejects_unknown() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("calib.json");
        rig().write_json_file(&p).unwrap();
        assert_eq!(CameraRig::from_json_file(&p).unwrap(), rig());
        std::fs::write(&p, r#"{"f":1,"cx":0,"cy":0,"baseline":1,"width":4,"height":4,"skew":0}"#).unwrap();
        assert!(CameraRig::from_json_file(&p).is_err());
    }

    proptest! {
        #[test]
        fn transforms_are_rigid(a in proptest::array::uniform6(-3.0f64..3.0)) {
            let p = euler_to_transform(&a);
            let rtr = mat_mul(&transpose(&p.rotation), &p.rotation);
            for i in 0..3 {
                for j in 0..3 {
                    let e = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((rtr[i][j] - e).abs() < 1e-10);
                }
            }
            prop_assert!((determinant(&p.rotation) - 1.0).abs() < 1e-10);
            prop_assert!(p.compose(&p.inverse()).max_abs_diff(&PoseSE3::identity()) < 1e-10);
        }

        #[test]
        fn reprojection_is_functorial(seed in 0u64..1000) {
            let r = rig();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let small = |rng: &mut ChaCha8Rng| {
                let mut v = random_pose(rng);
                for k in 3..6 { v[k] *= 0.3; }
                euler_to_transform(&v)
            };
            let p1 = small(&mut rng);
            let p2 = small(&mut rng);
            let (u, v, z) = (rng.gen_range(0.0..96.0), rng.gen_range(0.0..64.0), rng.gen_range(5.0..30.0));
            let a = reproject(u, v, z, &p1, &r);
            prop_assume!(a.in_frustum && a.depth > 0.5);
            let b = reproject(a.u, a.v, a.depth, &p2, &r);
            let c = reproject(u, v, z, &p2.compose(&p1), &r);
            prop_assume!(b.in_frustum);
            prop_assert!((b.u - c.u).abs() < 1e-9 && (b.v - c.v).abs() < 1e-9);
        }
    }
}
