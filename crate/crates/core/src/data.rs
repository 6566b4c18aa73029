//! Stereo snippets: loading from disk, augmentation and synthetic scenes.
//!
//! A sequence directory holds `left/NNNNNN.png`, `right/NNNNNN.png`,
//! `calib.json` and optionally `poses.txt` (one KITTI-style 3x4 row-major
//! camera-to-world pose per frame) plus `disp_left/` and `disp_right/`
//! 16-bit disparity PNGs. Absolute poses follow the KITTI convention: pose
//! `i` maps points from camera `i` to the frame-0 world.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{euler_to_transform, CameraRig, PoseSE3};
use crate::grid::{build_pyramid, ImageGrid};
use crate::objective::{validate_snippet_len, SnippetPyramids};

/// Index of the frame explained by the others: the middle one for odd
/// lengths, the first for pairs.
pub fn target_index(n: usize) -> Result<usize> {
    validate_snippet_len(n)?;
    Ok(if n == 2 { 0 } else { n / 2 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StereoSnippet {
    pub left: Vec<ImageGrid>,
    pub right: Vec<ImageGrid>,
    pub rig: CameraRig,
    /// Per-frame left-view disparity in pixels, 0 where unknown.
    pub gt_disp_left: Option<Vec<ImageGrid>>,
    pub gt_disp_right: Option<Vec<ImageGrid>>,
    /// Per-frame camera-to-world poses.
    pub gt_poses: Option<Vec<PoseSE3>>,
}

impl StereoSnippet {
    pub fn len(&self) -> usize {
        self.left.len()
    }

    pub fn is_empty(&self) -> bool {
        self.left.is_empty()
    }

    pub fn target(&self) -> usize {
        target_index(self.len()).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        validate_snippet_len(n)?;
        if self.right.len() != n {
            return Err(Error::shape(format!("{n} left frames but {} right", self.right.len())));
        }
        let (h, w) = (self.rig.height, self.rig.width);
        for (i, f) in self.left.iter().chain(&self.right).enumerate() {
            if f.shape() != (3, h, w) {
                return Err(Error::shape(format!(
                    "frame {} is {:?}, rig expects 3x{h}x{w}",
                    i % n,
                    f.shape()
                )));
            }
        }
        for disp in [&self.gt_disp_left, &self.gt_disp_right].into_iter().flatten() {
            if disp.len() != n || disp.iter().any(|d| d.shape() != (1, h, w)) {
                return Err(Error::shape("ground-truth disparity does not match the frames"));
            }
        }
        if let Some(p) = &self.gt_poses {
            if p.len() != n {
                return Err(Error::shape(format!("{} poses for {n} frames", p.len())));
            }
        }
        Ok(())
    }

    pub fn pyramids(&self) -> Result<SnippetPyramids> {
        Ok(SnippetPyramids {
            left: self.left.iter().map(build_pyramid).collect::<Result<_>>()?,
            right: self.right.iter().map(build_pyramid).collect::<Result<_>>()?,
            target: target_index(self.len())?,
        })
    }

    /// Consecutive motions: entry `i` is frame `i + 1` expressed in frame `i`.
    pub fn gt_relatives(&self) -> Option<Vec<PoseSE3>> {
        let p = self.gt_poses.as_ref()?;
        Some(p.windows(2).map(|w| w[0].inverse().compose(&w[1])).collect())
    }

    /// Target-to-source transforms for the non-target frames in order.
    pub fn gt_target_poses(&self) -> Option<Vec<PoseSE3>> {
        let p = self.gt_poses.as_ref()?;
        let t = self.target();
        Some(
            (0..p.len())
                .filter(|&j| j != t)
                .map(|j| p[j].inverse().compose(&p[t]))
                .collect(),
        )
    }
}

// --- poses.txt -------------------------------------------------------------

pub fn parse_poses(text: &str, path: &Path) -> Result<Vec<PoseSE3>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::data(path, format!("line {}: {e}", i + 1)))?;
        let arr: [f64; 12] = vals
            .try_into()
            .map_err(|v: Vec<f64>| Error::data(path, format!("line {}: {} values, expected 12", i + 1, v.len())))?;
        out.push(PoseSE3::from_row_major_3x4(&arr));
    }
    Ok(out)
}

pub fn read_poses(path: impl AsRef<Path>) -> Result<Vec<PoseSE3>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_poses(&text, path)
}

pub fn format_poses(poses: &[PoseSE3]) -> String {
    let mut s = String::new();
    for p in poses {
        let row: Vec<String> = p.to_row_major_3x4().iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

pub fn write_poses(path: impl AsRef<Path>, poses: &[PoseSE3]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_poses(poses)).map_err(|e| Error::io(path, e))
}

// --- sequences on disk ------------------------------------------------------

fn frame_name(index: u64) -> String {
    format!("{index:06}.png")
}

fn list_frames(dir: &Path) -> Result<Vec<u64>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut idx = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix(".png") {
            if let Ok(i) = stem.parse::<u64>() {
                idx.push(i);
            }
        }
    }
    idx.sort_unstable();
    Ok(idx)
}

/// A validated sequence directory; snippets are read on demand.
#[derive(Debug, Clone)]
pub struct Sequence {
    root: PathBuf,
    frames: Vec<u64>,
    rig: CameraRig,
    poses: Option<Vec<PoseSE3>>,
    disp_left: bool,
    disp_right: bool,
    snippet_len: usize,
}

impl Sequence {
    /// Checks the layout; `calib` defaults to `root/calib.json`.
    pub fn open(root: impl AsRef<Path>, calib: Option<&Path>, snippet_len: usize) -> Result<Self> {
        validate_snippet_len(snippet_len)?;
        let root = root.as_ref().to_path_buf();
        let calib_path = calib.map(Path::to_path_buf).unwrap_or_else(|| root.join("calib.json"));
        let rig = CameraRig::from_json_file(&calib_path)?;
        let left_dir = root.join("left");
        let frames = list_frames(&left_dir)?;
        let first = *frames
            .first()
            .ok_or_else(|| Error::data(&left_dir, "no NNNNNN.png frames"))?;
        for (k, &i) in frames.iter().enumerate() {
            let expected = first + k as u64;
            if i != expected {
                return Err(Error::data(left_dir.join(frame_name(expected)), "missing frame"));
            }
        }
        for &i in &frames {
            let p = root.join("right").join(frame_name(i));
            if !p.is_file() {
                return Err(Error::data(p, "missing frame"));
            }
        }
        let mut has = [false; 2];
        for (flag, sub) in has.iter_mut().zip(["disp_left", "disp_right"]) {
            let dir = root.join(sub);
            if dir.is_dir() {
                for &i in &frames {
                    let p = dir.join(frame_name(i));
                    if !p.is_file() {
                        return Err(Error::data(p, "missing ground-truth disparity"));
                    }
                }
                *flag = true;
            }
        }
        let pose_path = root.join("poses.txt");
        let poses = if pose_path.is_file() {
            let p = read_poses(&pose_path)?;
            if p.len() != frames.len() {
                return Err(Error::data(
                    &pose_path,
                    format!("{} poses for {} frames", p.len(), frames.len()),
                ));
            }
            Some(p)
        } else {
            None
        };
        if frames.len() < snippet_len {
            return Err(Error::data(
                &left_dir,
                format!("{} frames, snippet length {snippet_len}", frames.len()),
            ));
        }
        Ok(Self {
            root,
            frames,
            rig,
            poses,
            disp_left: has[0],
            disp_right: has[1],
            snippet_len,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn rig(&self) -> &CameraRig {
        &self.rig
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn poses(&self) -> Option<&[PoseSE3]> {
        self.poses.as_deref()
    }

    /// Number of overlapping snippets.
    pub fn len(&self) -> usize {
        self.frames.len() + 1 - self.snippet_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn read_image(&self, sub: &str, index: u64) -> Result<ImageGrid> {
        let img = ImageGrid::read_png(self.root.join(sub).join(frame_name(index)))?;
        if img.height() != self.rig.height || img.width() != self.rig.width {
            return Err(Error::data(
                self.root.join(sub).join(frame_name(index)),
                format!(
                    "{}x{} image, calibration says {}x{}",
                    img.height(),
                    img.width(),
                    self.rig.height,
                    self.rig.width
                ),
            ));
        }
        Ok(img)
    }

    pub fn has_disparity(&self) -> bool {
        self.disp_left
    }

    /// Left image of frame `k` (counted from the first frame) with its
    /// ground-truth disparity when the sequence has one.
    pub fn left_frame(&self, k: usize) -> Result<(ImageGrid, Option<ImageGrid>)> {
        let &f = self
            .frames
            .get(k)
            .ok_or_else(|| Error::InvalidValue(format!("frame {k} of {}", self.frames.len())))?;
        let img = self.read_image("left", f)?;
        let disp = if self.disp_left {
            Some(ImageGrid::read_disparity_png(self.root.join("disp_left").join(frame_name(f)))?)
        } else {
            None
        };
        Ok((img, disp))
    }

    pub fn snippet(&self, i: usize) -> Result<StereoSnippet> {
        if i >= self.len() {
            return Err(Error::InvalidValue(format!("snippet {i} of {}", self.len())));
        }
        let ids = &self.frames[i..i + self.snippet_len];
        let read_all = |sub: &str| ids.iter().map(|&f| self.read_image(sub, f)).collect::<Result<Vec<_>>>();
        let read_disp = |sub: &str| {
            ids.iter()
                .map(|&f| ImageGrid::read_disparity_png(self.root.join(sub).join(frame_name(f))))
                .collect::<Result<Vec<_>>>()
        };
        let snippet = StereoSnippet {
            left: read_all("left")?,
            right: read_all("right")?,
            rig: self.rig,
            gt_disp_left: if self.disp_left { Some(read_disp("disp_left")?) } else { None },
            gt_disp_right: if self.disp_right { Some(read_disp("disp_right")?) } else { None },
            gt_poses: self.poses.as_ref().map(|p| p[i..i + self.snippet_len].to_vec()),
        };
        snippet.validate()?;
        Ok(snippet)
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<StereoSnippet>> + '_ {
        (0..self.len()).map(move |i| self.snippet(i))
    }
}

/// Overlapping snippets of a sequence directory in temporal order.
pub fn load_sequence(
    root: impl AsRef<Path>,
    calib: Option<&Path>,
    snippet_len: usize,
) -> Result<impl Iterator<Item = Result<StereoSnippet>>> {
    let seq = Sequence::open(root, calib, snippet_len)?;
    Ok((0..seq.len()).map(move |i| seq.snippet(i)))
}

/// Sequence directories under `root`: `root` itself when it holds `left/`,
/// otherwise its subdirectories in name order.
pub fn sequence_dirs(root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let root = root.as_ref();
    if root.join("left").is_dir() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.join("left").is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::data(root, "no sequence directories (expected left/ and right/)"));
    }
    Ok(dirs)
}

/// Every snippet of every sequence under `root`, in memory.
pub fn load_dataset(root: impl AsRef<Path>, snippet_len: usize) -> Result<Vec<StereoSnippet>> {
    let mut out = Vec::new();
    for dir in sequence_dirs(root)? {
        for s in load_sequence(&dir, None, snippet_len)? {
            out.push(s?);
        }
    }
    Ok(out)
}

/// Writes frames (and whatever ground truth is present) in the sequence layout.
pub fn write_sequence(dir: impl AsRef<Path>, frames: &StereoSnippet) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["left", "right"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    for (i, (l, r)) in frames.left.iter().zip(&frames.right).enumerate() {
        l.write_png(dir.join("left").join(frame_name(i as u64)))?;
        r.write_png(dir.join("right").join(frame_name(i as u64)))?;
    }
    for (sub, disp) in [("disp_left", &frames.gt_disp_left), ("disp_right", &frames.gt_disp_right)] {
        if let Some(disp) = disp {
            fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
            for (i, d) in disp.iter().enumerate() {
                d.write_disparity_png(dir.join(sub).join(frame_name(i as u64)))?;
            }
        }
    }
    frames.rig.write_json_file(dir.join("calib.json"))?;
    if let Some(p) = &frames.gt_poses {
        write_poses(dir.join("poses.txt"), p)?;
    }
    Ok(())
}

// --- augmentation ------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub flip_probability: f64,
    /// Probability of each color transform.
    pub apply_probability: f64,
    pub brightness: [f64; 2],
    pub gamma: [f64; 2],
    pub color_shift: [f64; 2],
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            apply_probability: 0.5,
            brightness: [0.5, 2.0],
            gamma: [0.8, 1.2],
            color_shift: [0.8, 1.2],
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        Self {
            flip_probability: 0.0,
            apply_probability: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("flip_probability", self.flip_probability), ("apply_probability", self.apply_probability)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment.{name} must be in [0, 1], got {p}")));
            }
        }
        for (name, [lo, hi]) in [("brightness", self.brightness), ("gamma", self.gamma), ("color_shift", self.color_shift)] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::Config(format!("augment.{name} range [{lo}, {hi}] is invalid")));
            }
        }
        Ok(())
    }
}

fn draw(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

fn mirror_x(p: &PoseSE3) -> PoseSE3 {
    let mut out = *p;
    for i in 0..3 {
        for j in 0..3 {
            if (i == 0) != (j == 0) {
                out.rotation[i][j] = -out.rotation[i][j];
            }
        }
    }
    out.translation[0] = -out.translation[0];
    out
}

/// Mirrors the scene: the flipped right view becomes the left view and vice
/// versa. The rig is kept, which is exact for a centred principal point.
pub fn flip_snippet(s: &StereoSnippet) -> StereoSnippet {
    let flip_all = |v: &Vec<ImageGrid>| v.iter().map(ImageGrid::flip_horizontal).collect::<Vec<_>>();
    let to_right = PoseSE3::from_translation([s.rig.baseline, 0.0, 0.0]);
    let gt_poses = s.gt_poses.as_ref().map(|poses| {
        let moved: Vec<PoseSE3> = poses.iter().map(|a| mirror_x(&a.compose(&to_right))).collect();
        let anchor = moved[0].inverse();
        moved.iter().map(|m| anchor.compose(m)).collect()
    });
    StereoSnippet {
        left: flip_all(&s.right),
        right: flip_all(&s.left),
        rig: s.rig,
        gt_disp_left: s.gt_disp_right.as_ref().map(flip_all),
        gt_disp_right: s.gt_disp_left.as_ref().map(flip_all),
        gt_poses,
    }
}

/// Randomly flips and recolors a snippet. Every frame of both cameras gets
/// the same draws.
pub fn augment(snippet: &StereoSnippet, policy: &AugmentPolicy, rng: &mut impl Rng) -> StereoSnippet {
    let flip = rng.gen::<f64>() < policy.flip_probability;
    let mut pick = |range: [f64; 2]| {
        let on = rng.gen::<f64>() < policy.apply_probability;
        let v = draw(rng, range);
        on.then_some(v)
    };
    let gamma = pick(policy.gamma);
    let brightness = pick(policy.brightness);
    let shift = [pick(policy.color_shift), pick(policy.color_shift), pick(policy.color_shift)];

    let mut out = if flip { flip_snippet(snippet) } else { snippet.clone() };
    if gamma.is_none() && brightness.is_none() && shift.iter().all(Option::is_none) {
        return out;
    }
    for img in out.left.iter_mut().chain(out.right.iter_mut()) {
        let (c, h, w) = img.shape();
        let plane = h * w;
        for ch in 0..c {
            let scale = brightness.unwrap_or(1.0) * shift[ch.min(2)].unwrap_or(1.0);
            for v in &mut img.data_mut()[ch * plane..(ch + 1) * plane] {
                let mut x = *v;
                if let Some(g) = gamma {
                    x = x.max(0.0).powf(g);
                }
                *v = (x * scale).clamp(0.0, 1.0);
            }
        }
    }
    out
}

// --- synthetic scenes ----------------------------------------------------------

/// Samples per pixel along each axis.
pub const SUPERSAMPLE: usize = 4;

fn default_contrast() -> f64 {
    0.35
}

fn default_texture_px() -> f64 {
    4.0
}

/// A textured plane through `(0, 0, depth)` of the first camera, tilted by
/// `tilt` radians about the x axis (normal `(0, -sin tilt, cos tilt)`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneSpec {
    pub depth: f64,
    #[serde(default)]
    pub tilt: f64,
    pub texture_seed: u64,
    #[serde(default = "default_contrast")]
    pub contrast: f64,
    /// Texture cell size in pixels, measured where the plane crosses the
    /// optical axis of the first camera.
    #[serde(default = "default_texture_px")]
    pub texture_px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    pub planes: Vec<PlaneSpec>,
    /// Pose vectors; entry `i` is camera `i + 1` expressed in camera `i`.
    pub motion: Vec<[f64; 6]>,
    pub rig: CameraRig,
}

impl SynthSpec {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::data(path, e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.rig.validate()?;
        if self.rig.width != self.width || self.rig.height != self.height {
            return Err(Error::InvalidValue(format!(
                "spec is {}x{} but rig is {}x{}",
                self.height, self.width, self.rig.height, self.rig.width
            )));
        }
        if self.planes.is_empty() {
            return Err(Error::InvalidValue("synthetic scene without planes".into()));
        }
        for (i, p) in self.planes.iter().enumerate() {
            if !(p.depth > 0.0) || !p.depth.is_finite() {
                return Err(Error::InvalidValue(format!("plane {i}: depth {}", p.depth)));
            }
            if !(p.tilt.abs() < 1.5) {
                return Err(Error::InvalidValue(format!("plane {i}: tilt {} rad", p.tilt)));
            }
            if !(p.contrast > 0.0 && p.contrast <= 0.5) {
                return Err(Error::InvalidValue(format!("plane {i}: texture contrast {}", p.contrast)));
            }
            if !(p.texture_px >= 1.0) || !p.texture_px.is_finite() {
                return Err(Error::InvalidValue(format!("plane {i}: texture_px {}", p.texture_px)));
            }
        }
        if self.motion.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("non-finite motion".into()));
        }
        Ok(())
    }

    /// Camera-to-world poses of the left camera, frame 0 at the identity.
    pub fn poses(&self) -> Vec<PoseSE3> {
        let mut out = vec![PoseSE3::identity()];
        for m in &self.motion {
            let next = out[out.len() - 1].compose(&euler_to_transform(m));
            out.push(next);
        }
        out
    }
}

fn hash64(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = hash64(seed ^ hash64((ix as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ hash64(iy as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Smoothly interpolated lattice noise in roughly `[-1, 1]`.
fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let (tx, ty) = (fade(x - fx), fade(y - fy));
    let a = lattice(seed, ix, iy) * (1.0 - tx) + lattice(seed, ix + 1, iy) * tx;
    let b = lattice(seed, ix, iy + 1) * (1.0 - tx) + lattice(seed, ix + 1, iy + 1) * tx;
    a * (1.0 - ty) + b * ty
}

struct PlaneGeom {
    normal: [f64; 3],
    offset: f64,
    axis_u: [f64; 3],
    axis_v: [f64; 3],
    cell: f64,
    seed: u64,
    contrast: f64,
}

impl PlaneGeom {
    fn new(p: &PlaneSpec, rig: &CameraRig) -> Self {
        let (s, c) = p.tilt.sin_cos();
        Self {
            normal: [0.0, -s, c],
            offset: p.depth * c,
            axis_u: [1.0, 0.0, 0.0],
            axis_v: [0.0, c, s],
            cell: p.depth * p.texture_px / rig.f,
            seed: hash64(p.texture_seed.wrapping_add(0x5eed)),
            contrast: p.contrast,
        }
    }

    /// Ray parameter of the hit, if in front of the origin.
    fn hit(&self, origin: &[f64; 3], dir: &[f64; 3]) -> Option<f64> {
        let dot = |a: &[f64; 3], b: &[f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        let den = dot(&self.normal, dir);
        if den.abs() < 1e-12 {
            return None;
        }
        let s = (self.offset - dot(&self.normal, origin)) / den;
        (s > 1e-9).then_some(s)
    }

    fn color(&self, x: &[f64; 3], channel: usize) -> f64 {
        let dot = |a: &[f64; 3]| a[0] * x[0] + a[1] * x[1] + a[2] * x[2];
        let (u, v) = (dot(&self.axis_u) / self.cell, dot(&self.axis_v) / self.cell);
        let seed = self.seed.wrapping_add(channel as u64 * 0x1000_0001);
        let n = value_noise(seed, u, v) + 0.5 * value_noise(seed ^ 0xabcdef, 2.0 * u + 17.3, 2.0 * v - 4.1);
        0.5 + self.contrast * n / 1.5
    }
}

struct Scene {
    planes: Vec<PlaneGeom>,
}

impl Scene {
    /// Nearest hit: (ray parameter, plane index).
    fn trace(&self, origin: &[f64; 3], dir: &[f64; 3]) -> Option<(f64, usize)> {
        self.planes
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.hit(origin, dir).map(|s| (s, i)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }
}

/// Renders one camera: supersampled color and the depth through pixel centres.
fn render_view(scene: &Scene, cam: &PoseSE3, rig: &CameraRig) -> Result<(ImageGrid, ImageGrid)> {
    let (h, w) = (rig.height, rig.width);
    let mut img = ImageGrid::zeros(3, h, w);
    let mut depth = ImageGrid::zeros(1, h, w);
    let origin = cam.translation;
    let world_dir = |u: f64, v: f64| {
        let r = [(u - rig.cx) / rig.f, (v - rig.cy) / rig.f, 1.0];
        crate::geometry::mat_vec(&cam.rotation, &r)
    };
    let ss = SUPERSAMPLE as f64;
    for y in 0..h {
        for x in 0..w {
            let centre = world_dir(x as f64, y as f64);
            let (s, _) = scene
                .trace(&origin, &centre)
                .ok_or_else(|| Error::InvalidValue(format!("pixel ({y}, {x}) sees no plane")))?;
            depth.set(0, y, x, s);
            let mut acc = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let u = x as f64 + (sx as f64 + 0.5) / ss - 0.5;
                    let v = y as f64 + (sy as f64 + 0.5) / ss - 0.5;
                    let d = world_dir(u, v);
                    let (s, i) = scene
                        .trace(&origin, &d)
                        .ok_or_else(|| Error::InvalidValue(format!("pixel ({y}, {x}) sees no plane")))?;
                    let p = [origin[0] + s * d[0], origin[1] + s * d[1], origin[2] + s * d[2]];
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += scene.planes[i].color(&p, c);
                    }
                }
            }
            for (c, a) in acc.iter().enumerate() {
                img.set(c, y, x, a / (ss * ss));
            }
        }
    }
    Ok((img, depth))
}

/// Renders every frame of the spec with exact disparities and poses. The
/// result may hold any number of frames.
pub fn render_sequence(spec: &SynthSpec) -> Result<StereoSnippet> {
    spec.validate()?;
    let rig = &spec.rig;
    let scene = Scene {
        planes: spec.planes.iter().map(|p| PlaneGeom::new(p, rig)).collect(),
    };
    let poses = spec.poses();
    let to_right = PoseSE3::from_translation([rig.baseline, 0.0, 0.0]);
    let fb = rig.fb();
    let mut out = StereoSnippet {
        left: Vec::new(),
        right: Vec::new(),
        rig: *rig,
        gt_disp_left: Some(Vec::new()),
        gt_disp_right: Some(Vec::new()),
        gt_poses: Some(poses.clone()),
    };
    for pose in &poses {
        let (l, dl) = render_view(&scene, pose, rig)?;
        let (r, dr) = render_view(&scene, &pose.compose(&to_right), rig)?;
        out.left.push(l);
        out.right.push(r);
        out.gt_disp_left.as_mut().unwrap().push(dl.map(|z| fb / z));
        out.gt_disp_right.as_mut().unwrap().push(dr.map(|z| fb / z));
    }
    for img in out.left.iter().chain(&out.right) {
        let (lo, hi) = img
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if hi - lo < 1e-3 {
            return Err(Error::InvalidValue("rendered frame has no texture contrast".into()));
        }
    }
    Ok(out)
}

/// Renders a snippet (2, 3 or 5 frames) with full ground truth.
pub fn synth_generate(spec: &SynthSpec) -> Result<StereoSnippet> {
    validate_snippet_len(spec.motion.len() + 1)?;
    let s = render_sequence(spec)?;
    s.validate()?;
    Ok(s)
}

/// Random driving-like scenes: a textured wall ahead and a steep ground plane
/// below it, with the camera moving mostly forward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneFamily {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Focal length as a fraction of the width.
    pub focal_ratio: f64,
    pub baseline: f64,
    pub wall_depth: [f64; 2],
    pub wall_tilt: [f64; 2],
    /// Probability of adding the ground plane.
    pub ground_probability: f64,
    pub ground_depth: [f64; 2],
    pub ground_tilt: [f64; 2],
    pub forward: [f64; 2],
    pub lateral: [f64; 2],
    pub yaw: [f64; 2],
    /// Texture cell size in metres, so apparent texture scale tracks depth.
    pub texture_cell: [f64; 2],
}

impl Default for SceneFamily {
    fn default() -> Self {
        Self {
            width: 64,
            height: 32,
            frames: 3,
            focal_ratio: 0.8,
            baseline: 0.54,
            wall_depth: [7.0, 12.0],
            wall_tilt: [-0.2, 0.2],
            ground_probability: 1.0,
            ground_depth: [16.6, 16.6],
            ground_tilt: [-1.45, -1.45],
            forward: [0.2, 0.5],
            lateral: [-0.05, 0.05],
            yaw: [-0.02, 0.02],
            texture_cell: [0.5, 0.5],
        }
    }
}

impl SceneFamily {
    pub fn rig(&self) -> Result<CameraRig> {
        let f = self.focal_ratio * self.width as f64;
        CameraRig::new(
            f,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
            self.baseline,
            self.width,
            self.height,
        )
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<SynthSpec> {
        let f = self.focal_ratio * self.width as f64;
        let wall_depth = draw(rng, self.wall_depth);
        let mut planes = vec![PlaneSpec {
            depth: wall_depth,
            tilt: draw(rng, self.wall_tilt),
            texture_seed: rng.gen(),
            contrast: default_contrast(),
            texture_px: draw(rng, self.texture_cell) * f / wall_depth,
        }];
        let ground = rng.gen::<f64>() < self.ground_probability;
        let ground_depth = draw(rng, self.ground_depth);
        let ground_plane = PlaneSpec {
            depth: ground_depth,
            tilt: draw(rng, self.ground_tilt),
            texture_seed: rng.gen(),
            contrast: default_contrast(),
            texture_px: draw(rng, self.texture_cell) * f / ground_depth,
        };
        if ground {
            planes.push(ground_plane);
        }
        let motion = (1..self.frames)
            .map(|_| {
                let tz = draw(rng, self.forward);
                let tx = draw(rng, self.lateral);
                let yaw = draw(rng, self.yaw);
                [tx, 0.0, tz, 0.0, yaw, 0.0]
            })
            .collect();
        Ok(SynthSpec {
            width: self.width,
            height: self.height,
            planes,
            motion,
            rig: self.rig()?,
        })
    }

    /// `count` independent snippets.
    pub fn generate(&self, count: usize, rng: &mut impl Rng) -> Result<Vec<StereoSnippet>> {
        (0..count).map(|_| synth_generate(&self.sample(rng)?)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{appearance_loss, CharbonnierParams, LossWeights};
    use crate::warp::{reconstruct_stereo, Side};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rig(w: usize, h: usize) -> CameraRig {
        CameraRig::new(0.8 * w as f64, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, 0.5, w, h).unwrap()
    }

    fn plane(depth: f64, tilt: f64, seed: u64) -> PlaneSpec {
        PlaneSpec {
            depth,
            tilt,
            texture_seed: seed,
            contrast: 0.35,
            texture_px: 4.0,
        }
    }

    fn spec(w: usize, h: usize, planes: Vec<PlaneSpec>, motion: Vec<[f64; 6]>) -> SynthSpec {
        SynthSpec {
            width: w,
            height: h,
            planes,
            motion,
            rig: rig(w, h),
        }
    }

    #[test]
    fn target_frames() {
        assert_eq!(target_index(2).unwrap(), 0);
        assert_eq!(target_index(3).unwrap(), 1);
        assert_eq!(target_index(5).unwrap(), 2);
        assert!(target_index(4).is_err());
    }

    #[test]
    fn fronto_parallel_plane_has_constant_disparity() {
        let s = synth_generate(&spec(32, 16, vec![plane(5.0, 0.0, 1)], vec![[0.0; 6]])).unwrap();
        let fb = s.rig.fb();
        for d in s.gt_disp_left.as_ref().unwrap().iter().chain(s.gt_disp_right.as_ref().unwrap()) {
            assert!(d.data().iter().all(|&v| (v - fb / 5.0).abs() < 1e-12));
        }
    }

    #[test]
    fn zero_motion_gives_identical_frames() {
        let s = synth_generate(&spec(32, 16, vec![plane(5.0, 0.1, 2)], vec![[0.0; 6]; 2])).unwrap();
        assert_eq!(s.left[0], s.left[1]);
        assert_eq!(s.left[1], s.left[2]);
        assert_eq!(s.right[0], s.right[2]);
        for p in s.gt_relatives().unwrap() {
            assert!(p.max_abs_diff(&PoseSE3::identity()) < 1e-15);
        }
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        assert!(synth_generate(&spec(32, 16, vec![], vec![[0.0; 6]])).is_err());
        let mut flat = plane(5.0, 0.0, 1);
        flat.contrast = 0.0;
        assert!(synth_generate(&spec(32, 16, vec![flat], vec![[0.0; 6]])).is_err());
        assert!(synth_generate(&spec(32, 16, vec![plane(5.0, 0.0, 1)], vec![[0.0; 6]; 3])).is_err());
        let mut s = spec(32, 16, vec![plane(5.0, 0.0, 1)], vec![[0.0; 6]]);
        s.width = 30;
        assert!(synth_generate(&s).is_err());
        // a ground plane alone leaves the sky empty
        assert!(synth_generate(&spec(32, 16, vec![plane(10.0, -1.4, 1)], vec![[0.0; 6]])).is_err());
    }

    #[test]
    fn spec_json_is_strict() {
        let s = spec(32, 16, vec![plane(5.0, 0.0, 1)], vec![[0.1, 0.0, 0.3, 0.0, 0.0, 0.0]]);
        let text = serde_json::to_string(&s).unwrap();
        let back: SynthSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
        let bad = text.replacen("\"width\"", "\"widht\"", 1);
        assert!(serde_json::from_str::<SynthSpec>(&bad).is_err());
    }

    /// Ground truth rebuilds the opposite view.
    #[test]
    fn ground_truth_is_self_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fam = SceneFamily::default();
        for _ in 0..4 {
            let s = synth_generate(&fam.sample(&mut rng).unwrap()).unwrap();
            for f in 0..s.len() {
                for (side, own, other, disp) in [
                    (Side::Left, &s.left[f], &s.right[f], &s.gt_disp_left.as_ref().unwrap()[f]),
                    (Side::Right, &s.right[f], &s.left[f], &s.gt_disp_right.as_ref().unwrap()[f]),
                ] {
                    let (rec, mask) = reconstruct_stereo(other, disp, side).unwrap();
                    let (mut err, mut n) = (0.0, 0);
                    for c in 0..3 {
                        for (i, &m) in mask.iter().enumerate() {
                            if m {
                                err += (rec.plane(c)[i] - own.plane(c)[i]).abs();
                                n += 1;
                            }
                        }
                    }
                    assert!(err / (n as f64) < 0.02, "{}", err / n as f64);
                }
            }
        }
    }

    /// Brute-force 1-D block matching on the rendered pair.
    #[test]
    fn disparity_agrees_with_exhaustive_search() {
        let s = synth_generate(&spec(64, 32, vec![plane(4.0, 0.3, 5), plane(2.5, 0.0, 6)], vec![[0.0; 6]])).unwrap();
        let (l, r) = (&s.left[0], &s.right[0]);
        let gt = &s.gt_disp_left.as_ref().unwrap()[0];
        let (mut checked, mut agree) = (0, 0);
        for y in 3..29 {
            for x in 20..61 {
                let cost = |d: f64| {
                    let mut c = 0.0;
                    for dy in -2i64..=2 {
                        for dx in -2i64..=2 {
                            let yy = (y as i64 + dy) as usize;
                            let xs = x as f64 + dx as f64 - d;
                            let x0 = xs.floor();
                            let t = xs - x0;
                            for ch in 0..3 {
                                let a = r.get(ch, yy, x0 as usize);
                                let b = r.get(ch, yy, x0 as usize + 1);
                                let v = a * (1.0 - t) + b * t;
                                c += (l.get(ch, yy, (x as i64 + dx) as usize) - v).powi(2);
                            }
                        }
                    }
                    c
                };
                let best = (0..=160)
                    .map(|i| i as f64 * 0.1)
                    .min_by(|a, b| cost(*a).total_cmp(&cost(*b)))
                    .unwrap();
                // skip windows straddling a depth edge
                let g = gt.get(0, y, x);
                let flat = (y - 2..=y + 2).all(|yy| (x - 2..=x + 2).all(|xx| (gt.get(0, yy, xx) - g).abs() < 0.3));
                if flat {
                    checked += 1;
                    if (best - g).abs() < 0.5 {
                        agree += 1;
                    }
                }
            }
        }
        assert!(checked > 500);
        assert!(agree as f64 / checked as f64 > 0.98, "{agree}/{checked}");
    }

    #[test]
    fn integer_shift_scene_sits_on_the_floor() {
        let w = 64;
        let r = rig(w, 32);
        let s = synth_generate(&SynthSpec {
            width: w,
            height: 32,
            planes: vec![plane(r.fb() / 8.0, 0.0, 9)],
            motion: vec![[0.0; 6]],
            rig: r,
        })
        .unwrap();
        let (rec, mask) = reconstruct_stereo(&s.right[0], &s.gt_disp_left.as_ref().unwrap()[0], Side::Left).unwrap();
        let c = CharbonnierParams::default();
        let wts = LossWeights::default();
        let l = appearance_loss(&s.left[0], &rec, &mask, &wts, &c).unwrap();
        assert!(l < 2.0 * c.floor(), "{l}");
    }

    #[test]
    fn augmentation_off_is_identity() {
        let s = synth_generate(&spec(32, 16, vec![plane(5.0, 0.0, 1)], vec![[0.1, 0.0, 0.2, 0.0, 0.0, 0.0]; 2])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&s, &AugmentPolicy::disabled(), &mut rng), s);
    }

    #[test]
    fn brightness_doubles() {
        let mut s = synth_generate(&spec(32, 16, vec![plane(5.0, 0.0, 1)], vec![[0.0; 6]])).unwrap();
        for img in s.left.iter_mut().chain(s.right.iter_mut()) {
            *img = ImageGrid::filled(3, 16, 32, 0.3);
        }
        let policy = AugmentPolicy {
            flip_probability: 0.0,
            apply_probability: 1.0,
            brightness: [2.0, 2.0],
            gamma: [1.0, 1.0],
            color_shift: [1.0, 1.0],
        };
        let out = augment(&s, &policy, &mut ChaCha8Rng::seed_from_u64(1));
        for img in out.left.iter().chain(&out.right) {
            assert!(img.data().iter().all(|&v| (v - 0.6).abs() < 1e-15));
        }
    }

    #[test]
    fn double_flip_restores_snippet() {
        let s = synth_generate(&spec(32, 16, vec![plane(5.0, 0.2, 1)], vec![[0.1, -0.02, 0.3, 0.01, 0.02, -0.01]; 2])).unwrap();
        let policy = AugmentPolicy {
            flip_probability: 1.0,
            ..AugmentPolicy::disabled()
        };
        let once = augment(&s, &policy, &mut ChaCha8Rng::seed_from_u64(7));
        assert_ne!(once.left[0], s.left[0]);
        let twice = augment(&once, &policy, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(twice.left, s.left);
        assert_eq!(twice.right, s.right);
        assert_eq!(twice.gt_disp_left, s.gt_disp_left);
        for (a, b) in twice.gt_poses.unwrap().iter().zip(s.gt_poses.as_ref().unwrap()) {
            assert!(a.max_abs_diff(b) < 1e-12);
        }
    }

    /// A flipped snippet is a valid rendering of the mirrored scene: its
    /// disparities and poses still explain its images.
    #[test]
    fn flipped_ground_truth_stays_consistent() {
        let s = synth_generate(&spec(48, 16, vec![plane(3.0, 0.1, 4)], vec![[0.2, 0.0, 0.3, 0.0, 0.03, 0.0]])).unwrap();
        let f = flip_snippet(&s);
        f.validate().unwrap();
        let (rec, mask) = reconstruct_stereo(&f.right[0], &f.gt_disp_left.as_ref().unwrap()[0], Side::Left).unwrap();
        let err: f64 = (0..3)
            .map(|c| mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| (rec.plane(c)[i] - f.left[0].plane(c)[i]).abs()).sum::<f64>())
            .sum::<f64>()
            / (3 * mask.iter().filter(|m| **m).count()) as f64;
        assert!(err < 0.02);
        let depth = f.gt_disp_left.as_ref().unwrap()[0].map(|d| f.rig.fb() / d);
        let pose = f.gt_target_poses().unwrap()[0];
        let (rec, mask) = crate::warp::reconstruct_temporal(&f.left[1], &depth, &pose, &f.rig).unwrap();
        let valid: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let err: f64 = valid.iter().map(|&i| (rec.plane(0)[i] - f.left[0].plane(0)[i]).abs()).sum::<f64>() / valid.len() as f64;
        assert!(err < 0.02, "{err}");
    }

    #[test]
    fn sequence_roundtrip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut sp = spec(32, 16, vec![plane(5.0, 0.0, 1)], vec![[0.1, 0.0, 0.2, 0.0, 0.01, 0.0]; 9]);
        sp.planes.push(plane(3.0, 0.0, 2));
        let frames = render_sequence(&sp).unwrap();
        write_sequence(dir.path(), &frames).unwrap();
        assert_eq!(load_sequence(dir.path(), None, 3).unwrap().count(), 8);
        assert_eq!(load_sequence(dir.path(), None, 2).unwrap().count(), 9);
        let seq = Sequence::open(dir.path(), None, 3).unwrap();
        let s = seq.snippet(4).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.left[0].max_abs_diff(&frames.left[4]) <= 0.5 / 255.0 + 1e-12);
        let rel = s.gt_relatives().unwrap();
        let expected = euler_to_transform(&[0.1, 0.0, 0.2, 0.0, 0.01, 0.0]);
        assert!(rel[0].max_abs_diff(&expected) < 1e-12);
        // the absolutes are the composed relatives
        let abs = s.gt_poses.as_ref().unwrap();
        assert!(abs[0].compose(&rel[0]).compose(&rel[1]).max_abs_diff(&abs[2]) < 1e-9);
        let d = &s.gt_disp_left.as_ref().unwrap()[0];
        assert!(d.max_abs_diff(&frames.gt_disp_left.as_ref().unwrap()[4]) <= 0.5 / 256.0 + 1e-9);
    }

    #[test]
    fn identity_pose_file() {
        let dir = tempfile::tempdir().unwrap();
        let frames = render_sequence(&spec(32, 16, vec![plane(5.0, 0.0, 1)], vec![[0.0; 6]; 3])).unwrap();
        write_sequence(dir.path(), &frames).unwrap();
        for s in load_sequence(dir.path(), None, 2).unwrap() {
            for p in s.unwrap().gt_relatives().unwrap() {
                assert!(p.max_abs_diff(&PoseSE3::identity()) < 1e-12);
            }
        }
    }

    #[test]
    fn loader_errors_name_the_culprit() {
        let dir = tempfile::tempdir().unwrap();
        let frames = render_sequence(&spec(32, 16, vec![plane(5.0, 0.0, 1)], vec![[0.0; 6]; 4])).unwrap();
        write_sequence(dir.path(), &frames).unwrap();
        fs::remove_file(dir.path().join("right/000002.png")).unwrap();
        let err = Sequence::open(dir.path(), None, 3).unwrap_err().to_string();
        assert!(err.contains("right/000002.png"), "{err}");

        write_sequence(dir.path(), &frames).unwrap();
        fs::remove_file(dir.path().join("left/000003.png")).unwrap();
        let err = Sequence::open(dir.path(), None, 3).unwrap_err().to_string();
        assert!(err.contains("left/000003.png"), "{err}");

        write_sequence(dir.path(), &frames).unwrap();
        write_poses(dir.path().join("poses.txt"), &[PoseSE3::identity(); 2]).unwrap();
        let err = Sequence::open(dir.path(), None, 3).unwrap_err().to_string();
        assert!(err.contains("poses.txt") && err.contains("2 poses for 5 frames"), "{err}");

        fs::write(dir.path().join("calib.json"), "{").unwrap();
        let err = Sequence::open(dir.path(), None, 3).unwrap_err().to_string();
        assert!(err.contains("calib.json"), "{err}");
    }

    #[test]
    fn family_is_deterministic() {
        let fam = SceneFamily::default();
        let a = fam.generate(2, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = fam.generate(2, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
        let d = &a[0].gt_disp_left.as_ref().unwrap()[1];
        let max = d.data().iter().cloned().fold(0.0, f64::max);
        assert!(max < 0.3 * 64.0);
    }
}
