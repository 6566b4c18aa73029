//! Disparity and pose networks, Adam, and the training loop.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::data::{augment, target_index, AugmentPolicy, StereoSnippet};
use crate::error::{Error, Result};
use crate::geometry::{euler_to_transform, CameraRig, PoseSE3};
use crate::grid::{ImageGrid, PYRAMID_LEVELS};
use crate::objective::{
    total_objective_node, LossBreakdown, ObjectiveConfig, ObjectiveNodes, Predictions, SnippetPyramids,
};
use crate::rng::{stream, Stream};

/// Largest disparity as a fraction of the image width at each scale.
pub const DISP_RANGE: f64 = 0.3;
/// Smallest disparity as a fraction of the image width.
pub const DISP_FLOOR: f64 = 1e-4;
pub const ROTATION_SCALE: f64 = 0.01;
pub const CHECKPOINT_MAGIC: &[u8; 5] = b"UDMN1";

const DISP_LEVELS: usize = 5;
const POSE_LEVELS: usize = 6;
const KERNEL: usize = 3;
/// Initial bias of hidden layers; slightly positive to keep ReLUs alive early on.
const HIDDEN_BIAS: f64 = 0.1;
/// Initial disparity head bias: sigmoid(-ln 5) puts the first predictions at
/// 5% of the width, the near end of the range, instead of mid-range.
const HEAD_BIAS: f64 = -1.609_437_912_434_100_3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Encoder channel widths of the disparity network, finest first.
    pub widths: Vec<usize>,
    pub pose_widths: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64, 128, 256],
            pose_widths: vec![16, 32, 64, 128, 256, 256],
        }
    }
}

impl ModelConfig {
    /// The smallest useful configuration (a few hundred parameters).
    pub fn micro() -> Self {
        Self {
            widths: vec![1; DISP_LEVELS],
            pose_widths: vec![1; POSE_LEVELS],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != DISP_LEVELS || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "model.widths needs {DISP_LEVELS} positive entries, got {:?}",
                self.widths
            )));
        }
        if self.pose_widths.len() != POSE_LEVELS || self.pose_widths.contains(&0) {
            return Err(Error::Config(format!(
                "model.pose_widths needs {POSE_LEVELS} positive entries, got {:?}",
                self.pose_widths
            )));
        }
        Ok(())
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    dims: Vec<Vec<usize>>,
    values: Vec<ImageGrid>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor; `dims` is its logical shape as stored in checkpoints.
    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, value: ImageGrid) -> usize {
        debug_assert_eq!(dims.iter().product::<usize>(), value.len());
        self.names.push(name.into());
        self.dims.push(dims);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn dims(&self) -> &[Vec<usize>] {
        &self.dims
    }

    pub fn values(&self) -> &[ImageGrid] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [ImageGrid] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&ImageGrid> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.values.iter().map(ImageGrid::len).sum()
    }

    pub fn attach(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.values.iter().map(|v| tape.leaf(v.clone())).collect()
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}

fn he_uniform(rng: &mut impl Rng, fan_in: usize, len: usize, gain: f64) -> Vec<f64> {
    let bound = gain * (6.0 / fan_in as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Layer {
    weight: usize,
    bias: usize,
}

fn conv_layer_with_bias(
    set: &mut ParamSet,
    rng: &mut impl Rng,
    name: &str,
    c_in: usize,
    c_out: usize,
    bias: f64,
) -> Layer {
    scaled_conv_layer(set, rng, name, c_in, c_out, bias, 1.0)
}

fn scaled_conv_layer(
    set: &mut ParamSet,
    rng: &mut impl Rng,
    name: &str,
    c_in: usize,
    c_out: usize,
    bias: f64,
    gain: f64,
) -> Layer {
    let k = KERNEL;
    let w = he_uniform(rng, c_in * k * k, c_out * c_in * k * k, gain);
    let weight = set.push(
        format!("{name}.weight"),
        vec![c_out, c_in, k, k],
        ImageGrid::new(c_out * c_in, k, k, w).expect("sized above"),
    );
    let bias = set.push(format!("{name}.bias"), vec![c_out], ImageGrid::filled(c_out, 1, 1, bias));
    Layer { weight, bias }
}

fn linear_layer(set: &mut ParamSet, rng: &mut impl Rng, name: &str, n_in: usize, n_out: usize, gain: f64) -> Layer {
    let w = he_uniform(rng, n_in, n_in * n_out, gain);
    let weight = set.push(
        format!("{name}.weight"),
        vec![n_out, n_in],
        ImageGrid::new(1, n_out, n_in, w).expect("sized above"),
    );
    let bias = set.push(format!("{name}.bias"), vec![n_out], ImageGrid::zeros(n_out, 1, 1));
    Layer { weight, bias }
}

fn conv(tape: &mut Tape, leaves: &[NodeId], l: Layer, x: NodeId, stride: usize) -> Result<NodeId> {
    tape.conv2d(x, leaves[l.weight], leaves[l.bias], stride)
}

fn check_leaves(leaves: &[NodeId], params: &ParamSet, what: &str) -> Result<()> {
    if leaves.len() != params.len() {
        return Err(Error::shape(format!(
            "{what}: {} leaves for {} parameters",
            leaves.len(),
            params.len()
        )));
    }
    Ok(())
}

/// Encoder-decoder with skip connections predicting left and right
/// disparities at four scales.
#[derive(Debug, Clone, PartialEq)]
pub struct DispNetSmall {
    widths: Vec<usize>,
    params: ParamSet,
    enc: Vec<Layer>,
    /// Decoder levels from coarsest (4) to finest (0).
    dec: Vec<Layer>,
    /// Heads for levels 0..4.
    heads: Vec<Layer>,
}

impl DispNetSmall {
    pub fn new(widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        ModelConfig {
            widths: widths.to_vec(),
            pose_widths: vec![1; POSE_LEVELS],
        }
        .validate()?;
        let mut params = ParamSet::new();
        let mut enc = Vec::new();
        let mut c_in = 3;
        for (i, &w) in widths.iter().enumerate() {
            enc.push(conv_layer_with_bias(&mut params, rng, &format!("disp.enc{i}"), c_in, w, HIDDEN_BIAS));
            c_in = w;
        }
        let mut dec = vec![conv_layer_with_bias(&mut params, rng, "disp.dec4", widths[4], widths[4], HIDDEN_BIAS)];
        for l in (0..PYRAMID_LEVELS).rev() {
            // finer levels also see the upsampled coarser prediction
            let extra = if l + 1 < PYRAMID_LEVELS { 2 } else { 0 };
            dec.push(conv_layer_with_bias(
                &mut params,
                rng,
                &format!("disp.dec{l}"),
                widths[l + 1] + widths[l] + extra,
                widths[l],
                HIDDEN_BIAS,
            ));
        }
        // near-flat first predictions keep the smoothness term from dominating
        // early steps, which otherwise silences the decoder
        let heads = (0..PYRAMID_LEVELS)
            .map(|l| scaled_conv_layer(&mut params, rng, &format!("disp.head{l}"), widths[l], 2, HEAD_BIAS, 0.1))
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            params,
            enc,
            dec,
            heads,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// `(2, H_k, W_k)` disparity nodes for levels 0..4; channel 0 is the left
    /// view's disparity, channel 1 the right view's.
    pub fn forward(&self, tape: &mut Tape, leaves: &[NodeId], image: NodeId) -> Result<[NodeId; PYRAMID_LEVELS]> {
        check_leaves(leaves, &self.params, "disparity network")?;
        let (c, h, w) = tape.value(image).shape();
        if c != 3 || h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "disparity input {c}x{h}x{w}, need 3 channels and sides divisible by 16"
            )));
        }
        let mut x = tape.constant(standardize(tape.value(image)));
        let mut skips = Vec::with_capacity(DISP_LEVELS);
        for (i, &layer) in self.enc.iter().enumerate() {
            let y = conv(tape, leaves, layer, x, if i == 0 { 1 } else { 2 })?;
            x = tape.relu(y);
            skips.push(x);
        }
        let y = conv(tape, leaves, self.dec[0], x, 1)?;
        x = tape.relu(y);
        let mut out = [x; PYRAMID_LEVELS];
        let mut coarse: Option<NodeId> = None;
        let mut coarse_logits: Option<NodeId> = None;
        for (j, l) in (0..PYRAMID_LEVELS).rev().enumerate() {
            let (_, hl, wl) = tape.value(skips[l]).shape();
            let up = tape.upsample2(x, hl, wl)?;
            let cat = match coarse {
                Some(c) => {
                    let c = tape.upsample2(c, hl, wl)?;
                    tape.concat(&[up, skips[l], c])?
                }
                None => tape.concat(&[up, skips[l]])?,
            };
            let y = conv(tape, leaves, self.dec[j + 1], cat, 1)?;
            x = tape.relu(y);
            let mut logits = conv(tape, leaves, self.heads[l], x, 1)?;
            if let Some(c) = coarse_logits {
                let c = tape.upsample2(c, hl, wl)?;
                logits = tape.add(logits, c)?;
            }
            coarse_logits = Some(logits);
            out[l] = disparity_activation(tape, logits, wl);
            // fed forward as a fraction of the width
            coarse = Some(tape.scale(out[l], 1.0 / wl as f64));
        }
        Ok(out)
    }

    /// Plain evaluation: `(left-view, right-view)` disparities per level.
    pub fn disparity_forward(&self, left: &ImageGrid) -> Result<Vec<(ImageGrid, ImageGrid)>> {
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = self.params.values().iter().map(|v| tape.constant(v.clone())).collect();
        let img = tape.constant(left.clone());
        let out = self.forward(&mut tape, &leaves, img)?;
        Ok(out
            .iter()
            .map(|&n| {
                let v = tape.value(n);
                (v.channel(0), v.channel(1))
            })
            .collect())
    }
}

/// Zero mean and unit deviation over the whole image. Low-contrast input
/// otherwise leaves pre-activations so small that a few hundred Adam steps on
/// the biases silence entire layers.
fn standardize(image: &ImageGrid) -> ImageGrid {
    let m = image.mean();
    let var = image.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / image.len() as f64;
    let s = var.sqrt().max(1e-3);
    image.map(|v| (v - m) / s)
}

/// `0.3 * W * sigmoid(logit) + 1e-4 * W`.
pub fn disparity_activation(tape: &mut Tape, logits: NodeId, width: usize) -> NodeId {
    let w = width as f64;
    let s = tape.sigmoid(logits);
    let s = tape.scale(s, DISP_RANGE * w);
    tape.add_scalar(s, DISP_FLOOR * w)
}

/// Strided convolutional encoder over the concatenated snippet with separate
/// translation and rotation heads.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseNetSmall {
    widths: Vec<usize>,
    snippet_len: usize,
    params: ParamSet,
    convs: Vec<Layer>,
    translation: Layer,
    rotation: Layer,
}

impl PoseNetSmall {
    pub fn new(widths: &[usize], snippet_len: usize, rng: &mut impl Rng) -> Result<Self> {
        target_index(snippet_len)?;
        ModelConfig {
            widths: vec![1; DISP_LEVELS],
            pose_widths: widths.to_vec(),
        }
        .validate()?;
        let mut params = ParamSet::new();
        let mut convs = Vec::new();
        let mut c_in = 3 * snippet_len;
        for (i, &w) in widths.iter().enumerate() {
            convs.push(conv_layer_with_bias(&mut params, rng, &format!("pose.conv{i}"), c_in, w, HIDDEN_BIAS));
            c_in = w;
        }
        let outputs = 3 * (snippet_len - 1);
        // small heads keep the first warps close to the identity
        let translation = linear_layer(&mut params, rng, "pose.translation", c_in, outputs, 0.1);
        let rotation = linear_layer(&mut params, rng, "pose.rotation", c_in, outputs, 0.1);
        Ok(Self {
            widths: widths.to_vec(),
            snippet_len,
            params,
            convs,
            translation,
            rotation,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn snippet_len(&self) -> usize {
        self.snippet_len
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Raw `(6(n-1), 1, 1)` output: translations of every pose first, then
    /// the scaled rotations.
    pub fn raw_forward(&self, tape: &mut Tape, leaves: &[NodeId], frames: &[NodeId]) -> Result<NodeId> {
        check_leaves(leaves, &self.params, "pose network")?;
        if frames.len() != self.snippet_len {
            return Err(Error::shape(format!(
                "pose network built for {} frames, got {}",
                self.snippet_len,
                frames.len()
            )));
        }
        let stacked = tape.concat(frames)?;
        let mut x = tape.add_scalar(stacked, -0.5);
        for &layer in &self.convs {
            let y = conv(tape, leaves, layer, x, 2)?;
            x = tape.relu(y);
        }
        let pooled = tape.global_avg_pool(x);
        let t = tape.linear(pooled, leaves[self.translation.weight], leaves[self.translation.bias])?;
        let r = tape.linear(pooled, leaves[self.rotation.weight], leaves[self.rotation.bias])?;
        let r = tape.scale(r, ROTATION_SCALE);
        tape.concat(&[t, r])
    }

    /// One `(6, 1, 1)` target-to-source pose vector per non-target frame.
    pub fn forward(&self, tape: &mut Tape, leaves: &[NodeId], frames: &[NodeId]) -> Result<Vec<NodeId>> {
        let raw = self.raw_forward(tape, leaves, frames)?;
        let m = self.snippet_len - 1;
        let raw_v = tape.reshape(raw, 6 * m, 1, 1)?;
        (0..m)
            .map(|j| {
                let t = tape.slice_channels(raw_v, 3 * j, 3)?;
                let r = tape.slice_channels(raw_v, 3 * m + 3 * j, 3)?;
                tape.concat(&[t, r])
            })
            .collect()
    }

    pub fn pose_forward(&self, frames: &[ImageGrid]) -> Result<Vec<PoseSE3>> {
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = self.params.values().iter().map(|v| tape.constant(v.clone())).collect();
        let nodes: Vec<NodeId> = frames.iter().map(|f| tape.constant(f.clone())).collect();
        let poses = self.forward(&mut tape, &leaves, &nodes)?;
        Ok(poses
            .iter()
            .map(|&p| {
                let v: [f64; 6] = tape.value(p).data().try_into().expect("six values");
                euler_to_transform(&v)
            })
            .collect())
    }
}

/// Both networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub disp: DispNetSmall,
    pub pose: PoseNetSmall,
}

impl Model {
    pub fn new(config: &ModelConfig, snippet_len: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, Stream::Init);
        let disp = DispNetSmall::new(&config.widths, &mut rng)?;
        let pose = PoseNetSmall::new(&config.pose_widths, snippet_len, &mut rng)?;
        Ok(Self { disp, pose })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            widths: self.disp.widths.clone(),
            pose_widths: self.pose.widths.clone(),
        }
    }

    pub fn snippet_len(&self) -> usize {
        self.pose.snippet_len
    }

    pub fn param_count(&self) -> usize {
        self.disp.params.count() + self.pose.params.count()
    }

    /// Every parameter tensor, disparity network first.
    pub fn all_values(&self) -> Vec<ImageGrid> {
        self.disp.params.values().iter().chain(self.pose.params.values()).cloned().collect()
    }

    pub fn set_all_values(&mut self, values: &[ImageGrid]) -> Result<()> {
        let nd = self.disp.params.len();
        if values.len() != nd + self.pose.params.len() {
            return Err(Error::shape("parameter count mismatch"));
        }
        for (dst, src) in self.disp.params.values_mut().iter_mut().chain(self.pose.params.values_mut()).zip(values) {
            if !dst.same_shape(src) {
                return Err(Error::shape("parameter shape mismatch"));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    /// Full-resolution left-view disparity of one image.
    pub fn predict_disparity(&self, left: &ImageGrid) -> Result<ImageGrid> {
        Ok(self.disp.disparity_forward(left)?.swap_remove(0).0)
    }

    /// Builds the objective for one snippet. `disp_leaves` and `pose_leaves`
    /// stand for the parameters of the two networks.
    pub fn objective_on_tape(
        &self,
        tape: &mut Tape,
        disp_leaves: &[NodeId],
        pose_leaves: &[NodeId],
        snippet: &StereoSnippet,
        pyramids: &SnippetPyramids,
        cfg: &ObjectiveConfig,
    ) -> Result<ObjectiveNodes> {
        if snippet.len() != self.snippet_len() {
            return Err(Error::shape(format!(
                "snippet of {} frames for a model trained on {}",
                snippet.len(),
                self.snippet_len()
            )));
        }
        let t = pyramids.target;
        let target = tape.constant(snippet.left[t].clone());
        let disp = self.disp.forward(tape, disp_leaves, target)?;
        let frames: Vec<NodeId> = snippet.left.iter().map(|f| tape.constant(f.clone())).collect();
        let poses = self.pose.forward(tape, pose_leaves, &frames)?;
        let mut disp_left = disp;
        let mut disp_right = disp;
        for k in 0..PYRAMID_LEVELS {
            disp_left[k] = tape.slice_channels(disp[k], 0, 1)?;
            disp_right[k] = tape.slice_channels(disp[k], 1, 1)?;
        }
        let pred = Predictions {
            disp_left,
            disp_right,
            poses,
        };
        total_objective_node(tape, pyramids, &pred, &snippet.rig, cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        for set in [&self.disp.params, &self.pose.params] {
            for ((name, dims), value) in set.names.iter().zip(&set.dims).zip(&set.values) {
                buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
                buf.extend_from_slice(name.as_bytes());
                buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
                for &d in dims {
                    buf.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for &v in value.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Restores a checkpoint; the architecture is read from tensor shapes.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let records = parse_checkpoint(&bytes)?;
        let find = |name: &str| {
            records
                .iter()
                .find(|r| r.0 == name)
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing tensor {name}", path.display())))
        };
        let widths = (0..DISP_LEVELS)
            .map(|i| find(&format!("disp.enc{i}.weight")).map(|r| r.1[0]))
            .collect::<Result<Vec<_>>>()?;
        let pose_widths = (0..POSE_LEVELS)
            .map(|i| find(&format!("pose.conv{i}.weight")).map(|r| r.1[0]))
            .collect::<Result<Vec<_>>>()?;
        let c_in = find("pose.conv0.weight")?.1[1];
        if c_in % 3 != 0 {
            return Err(Error::Checkpoint(format!("pose input has {c_in} channels")));
        }
        let mut model = Model::new(&ModelConfig { widths, pose_widths }, c_in / 3, 0)?;
        let total = model.disp.params.len() + model.pose.params.len();
        if records.len() != total {
            return Err(Error::Checkpoint(format!("{} tensors, expected {total}", records.len())));
        }
        for set in [&mut model.disp.params, &mut model.pose.params] {
            for i in 0..set.len() {
                let (_, dims, data) = find(&set.names[i])?;
                if *dims != set.dims[i] {
                    return Err(Error::Checkpoint(format!(
                        "{}: shape {:?}, expected {:?}",
                        set.names[i], dims, set.dims[i]
                    )));
                }
                let (c, h, w) = set.values[i].shape();
                set.values[i] = ImageGrid::new(c, h, w, data.clone())?;
            }
        }
        Ok(model)
    }
}

type Record = (String, Vec<usize>, Vec<f64>);

fn parse_checkpoint(bytes: &[u8]) -> Result<Vec<Record>> {
    struct Cursor<'a>(&'a [u8]);
    impl Cursor<'_> {
        fn take(&mut self, n: usize) -> Result<&[u8]> {
            if self.0.len() < n {
                return Err(Error::Checkpoint("truncated file".into()));
            }
            let (a, b) = self.0.split_at(n);
            self.0 = b;
            Ok(a)
        }
        fn u32(&mut self) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
        }
        fn u64(&mut self) -> Result<u64> {
            Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }
    }
    let mut cur = Cursor(bytes);
    if cur.take(CHECKPOINT_MAGIC.len()).ok() != Some(&CHECKPOINT_MAGIC[..]) {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut out = Vec::new();
    while !cur.0.is_empty() {
        let len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("non-UTF-8 tensor name".into()))?;
        let rank = cur.u32()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("{name}: rank {rank}")));
        }
        let dims = (0..rank).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = cur.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name, dims, data));
    }
    Ok(out)
}

// --- optimisation ----------------------------------------------------------------

/// Step-wise learning rate: halved after 3/5 and again after 4/5 of training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    /// Rate for the 0-based step `t`.
    pub fn lr_at(&self, t: u64) -> f64 {
        let (t, total) = (5 * t as u128, self.total_steps as u128);
        if t < 3 * total {
            self.base_lr
        } else if t < 4 * total {
            0.5 * self.base_lr
        } else {
            0.25 * self.base_lr
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<ImageGrid>,
    pub v: Vec<ImageGrid>,
    /// Number of completed steps.
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64) -> Self {
        let zeros = || params.values().iter().map(|p| ImageGrid::zeros(p.channels(), p.height(), p.width())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update at the scheduled rate. Nothing changes if
/// any gradient is non-finite.
pub fn adam_step(params: &mut ParamSet, grads: &[ImageGrid], state: &mut AdamState, schedule: &LrSchedule) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    for (i, (g, p)) in grads.iter().zip(params.values()).enumerate() {
        if !g.same_shape(p) {
            return Err(Error::shape(format!("gradient of {} has shape {:?}", params.names[i], g.shape())));
        }
        if let Some(index) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                name: params.names[i].clone(),
                index,
            });
        }
    }
    let lr = schedule.lr_at(state.step);
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for ((p, g), (m, v)) in params
        .values
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
        }
    }
    Ok(())
}

// --- training -------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub seed: u64,
    pub iterations: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub objective: ObjectiveConfig,
    pub augment: AugmentPolicy,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 1000,
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.99,
            objective: ObjectiveConfig::default(),
            augment: AugmentPolicy::default(),
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.augment.validate()?;
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: u64,
    pub lr: f64,
    pub snippet: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub iterations: u64,
    pub final_total: f64,
    pub totals: Vec<f64>,
}

/// Loss and gradients (disparity parameters first) for one snippet.
pub fn loss_and_gradients(
    model: &Model,
    snippet: &StereoSnippet,
    pyramids: &SnippetPyramids,
    cfg: &ObjectiveConfig,
) -> Result<(LossBreakdown, Vec<ImageGrid>)> {
    let mut tape = Tape::new();
    let dl = model.disp.params.attach(&mut tape);
    let pl = model.pose.params.attach(&mut tape);
    let nodes = model.objective_on_tape(&mut tape, &dl, &pl, snippet, pyramids, cfg)?;
    let breakdown = nodes.breakdown(&tape);
    let grads = tape.backward(nodes.total)?;
    Ok((breakdown, dl.iter().chain(&pl).map(|&l| grads.wrt(l)).collect()))
}

/// Trains both networks on `data`, visiting snippets in a seeded shuffled
/// order. `on_iteration` sees every log line. On a non-finite loss or
/// gradient the model keeps the last good parameters and the error is
/// returned.
pub fn train(
    model: &mut Model,
    data: &[StereoSnippet],
    opts: &TrainOptions,
    mut on_iteration: impl FnMut(&IterationLog) -> Result<()>,
) -> Result<TrainSummary> {
    opts.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidValue("empty training set".into()));
    }
    let rig: CameraRig = data[0].rig;
    for (i, s) in data.iter().enumerate() {
        s.validate()?;
        if s.len() != model.snippet_len() {
            return Err(Error::InvalidValue(format!(
                "snippet {i} has {} frames, model expects {}",
                s.len(),
                model.snippet_len()
            )));
        }
        if s.rig != rig {
            return Err(Error::InvalidValue(format!("snippet {i} has a different calibration")));
        }
    }
    let augmenting = opts.augment.flip_probability > 0.0 || opts.augment.apply_probability > 0.0;
    let cached: Option<Vec<SnippetPyramids>> = if augmenting {
        None
    } else {
        Some(data.iter().map(StereoSnippet::pyramids).collect::<Result<_>>()?)
    };
    let schedule = LrSchedule {
        base_lr: opts.lr,
        total_steps: opts.iterations,
    };
    let mut data_rng = stream(opts.seed, Stream::Data);
    let mut aug_rng = stream(opts.seed, Stream::Augment);
    let mut state_d = AdamState::new(&model.disp.params, opts.beta1, opts.beta2);
    let mut state_p = AdamState::new(&model.pose.params, opts.beta1, opts.beta2);
    let nd = model.disp.params.len();
    let mut order: Vec<usize> = Vec::new();
    let mut totals = Vec::with_capacity(opts.iterations as usize);

    for it in 0..opts.iterations {
        if order.is_empty() {
            order = (0..data.len()).collect();
            order.shuffle(&mut data_rng);
            order.reverse();
        }
        let idx = order.pop().expect("refilled above");
        let (breakdown, grads) = if let Some(c) = &cached {
            loss_and_gradients(model, &data[idx], &c[idx], &opts.objective)?
        } else {
            let s = augment(&data[idx], &opts.augment, &mut aug_rng);
            let pyr = s.pyramids()?;
            loss_and_gradients(model, &s, &pyr, &opts.objective)?
        };
        if !breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss(it as usize));
        }
        let lr = schedule.lr_at(it);
        // check both gradient sets before touching either network
        for (g, name) in grads.iter().zip(model.disp.params.names().iter().chain(model.pose.params.names())) {
            if let Some(index) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { name: name.clone(), index });
            }
        }
        adam_step(&mut model.disp.params, &grads[..nd], &mut state_d, &schedule)?;
        adam_step(&mut model.pose.params, &grads[nd..], &mut state_p, &schedule)?;
        totals.push(breakdown.total);
        on_iteration(&IterationLog {
            iteration: it,
            lr,
            snippet: idx,
            loss: breakdown,
        })?;
    }
    Ok(TrainSummary {
        iterations: opts.iterations,
        final_total: totals.last().copied().unwrap_or(f64::NAN),
        totals,
    })
}

/// Trailing moving average with the given window.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for i in 0..values.len() {
        acc += values[i];
        if i >= window {
            acc -= values[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradient_check;
    use crate::data::{synth_generate, PlaneSpec, SynthSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(h: usize, w: usize, seed: u64) -> ImageGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageGrid::from_fn(3, h, w, |_, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn disparities_stay_in_range() {
        for seed in 0..3 {
            let mut model = Model::new(&ModelConfig { widths: vec![4, 4, 8, 8, 8], pose_widths: vec![2; 6] }, 3, seed).unwrap();
            // blow the weights up to saturate the sigmoid
            for v in model.disp.params_mut().values_mut() {
                *v = v.map(|x| 40.0 * x);
            }
            let out = model.disp.disparity_forward(&image(32, 48, seed)).unwrap();
            for (k, (l, r)) in out.iter().enumerate() {
                let wk = (48 >> k) as f64;
                assert_eq!(l.shape(), (1, 32 >> k, 48 >> k));
                for &d in l.data().iter().chain(r.data()) {
                    assert!(d >= 1e-4 * wk && d <= 0.3 * wk + 1e-4 * wk, "{d}");
                }
            }
        }
    }

    #[test]
    fn zero_heads_give_mid_range() {
        let mut model = Model::new(&ModelConfig::micro(), 3, 1).unwrap();
        let names: Vec<String> = model.disp.params().names().to_vec();
        for (v, n) in model.disp.params_mut().values_mut().iter_mut().zip(&names) {
            if n.starts_with("disp.head") {
                *v = v.map(|_| 0.0);
            }
        }
        let img = image(16, 32, 2);
        let a = model.disp.disparity_forward(&img).unwrap();
        for (k, (l, _)) in a.iter().enumerate() {
            let wk = (32 >> k) as f64;
            assert!(l.data().iter().all(|&d| (d - (0.15 + 1e-4) * wk).abs() < 1e-12));
        }
        assert_eq!(a, model.disp.disparity_forward(&img).unwrap());
    }

    #[test]
    fn input_size_must_divide_by_16() {
        let model = Model::new(&ModelConfig::micro(), 3, 1).unwrap();
        assert!(model.disp.disparity_forward(&image(16, 40, 1)).is_err());
    }

    #[test]
    fn pose_output_counts() {
        for (n, poses) in [(2, 1), (3, 2), (5, 4)] {
            let model = Model::new(&ModelConfig::micro(), n, 3).unwrap();
            let frames: Vec<ImageGrid> = (0..n).map(|i| image(16, 32, i as u64)).collect();
            let mut tape = Tape::new();
            let leaves = model.pose.params.attach(&mut tape);
            let nodes: Vec<NodeId> = frames.iter().map(|f| tape.constant(f.clone())).collect();
            let raw = model.pose.raw_forward(&mut tape, &leaves, &nodes).unwrap();
            assert_eq!(tape.value(raw).len(), 6 * (n - 1));
            assert_eq!(model.pose.pose_forward(&frames).unwrap().len(), poses);
        }
        assert!(Model::new(&ModelConfig::micro(), 4, 0).is_err());
    }

    #[test]
    fn zero_pose_heads_give_identity() {
        let mut model = Model::new(&ModelConfig::micro(), 3, 4).unwrap();
        let names: Vec<String> = model.pose.params().names().to_vec();
        for (v, n) in model.pose.params_mut().values_mut().iter_mut().zip(&names) {
            if n.starts_with("pose.translation") || n.starts_with("pose.rotation") {
                *v = v.map(|_| 0.0);
            }
        }
        let frames: Vec<ImageGrid> = (0..3).map(|i| image(16, 32, i)).collect();
        for p in model.pose.pose_forward(&frames).unwrap() {
            assert_eq!(p, PoseSE3::identity());
        }
    }

    #[test]
    fn heads_are_independent() {
        let model = Model::new(&ModelConfig::micro(), 3, 5).unwrap();
        let names = model.pose.params().names();
        assert!(names.iter().any(|n| n == "pose.translation.weight"));
        assert!(names.iter().any(|n| n == "pose.rotation.weight"));
        let t = model.pose.params().get("pose.translation.weight").unwrap();
        let r = model.pose.params().get("pose.rotation.weight").unwrap();
        assert_ne!(t, r);
    }

    #[test]
    fn schedule_boundaries() {
        let s = LrSchedule { base_lr: 0.001, total_steps: 100 };
        assert_eq!(s.lr_at(59), 0.001);
        assert_eq!(s.lr_at(60), 0.0005);
        assert_eq!(s.lr_at(79), 0.0005);
        assert_eq!(s.lr_at(80), 0.00025);
    }

    fn scalar_set(x: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("x", vec![1], ImageGrid::scalar(x));
        p
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = scalar_set(1.5);
        let mut st = AdamState::new(&p, 0.9, 0.99);
        let s = LrSchedule { base_lr: 0.001, total_steps: 10 };
        for _ in 0..5 {
            adam_step(&mut p, &[ImageGrid::scalar(0.0)], &mut st, &s).unwrap();
        }
        assert_eq!(p.values()[0].data()[0], 1.5);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn adam_solves_scalar_quadratic() {
        let mut p = scalar_set(0.0);
        let mut st = AdamState::new(&p, 0.9, 0.99);
        // the default 1e-3 rate cannot travel 3 units in 500 steps
        let s = LrSchedule { base_lr: 0.1, total_steps: 500 };
        for _ in 0..500 {
            let x = p.values()[0].data()[0];
            adam_step(&mut p, &[ImageGrid::scalar(2.0 * (x - 3.0))], &mut st, &s).unwrap();
        }
        assert!((p.values()[0].data()[0] - 3.0).abs() < 1e-3, "{}", p.values()[0].data()[0]);
    }

    #[test]
    fn adam_rejects_nan_gradient() {
        let mut p = scalar_set(1.0);
        let mut st = AdamState::new(&p, 0.9, 0.99);
        let s = LrSchedule { base_lr: 0.001, total_steps: 10 };
        let err = adam_step(&mut p, &[ImageGrid::scalar(f64::NAN)], &mut st, &s).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref name, index: 0 } if name == "x"));
        assert_eq!(st.step, 0);
        assert_eq!(p.values()[0].data()[0], 1.0);
    }

    #[test]
    fn checkpoint_roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(&ModelConfig { widths: vec![2, 3, 4, 5, 6], pose_widths: vec![2, 2, 3, 3, 4, 4] }, 5, 9).unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back, model);
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..5], b"UDMN1");
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Model::load(&path), Err(Error::Checkpoint(_))));
        fs::write(&path, b"XXXXX").unwrap();
        assert!(matches!(Model::load(&path), Err(Error::Checkpoint(_))));
    }

    fn micro_snippet() -> StereoSnippet {
        let rig = CameraRig::new(25.6, 15.5, 7.5, 0.5, 32, 16).unwrap();
        synth_generate(&SynthSpec {
            width: 32,
            height: 16,
            planes: vec![
                PlaneSpec { depth: 4.0, tilt: 0.2, texture_seed: 3, contrast: 0.35, texture_px: 4.0 },
                PlaneSpec { depth: 2.0, tilt: -1.3, texture_seed: 4, contrast: 0.35, texture_px: 4.0 },
            ],
            motion: vec![[0.05, 0.0, 0.2, 0.0, 0.01, 0.0]; 2],
            rig,
        })
        .unwrap()
    }

    #[test]
    fn micro_network_gradients_match_finite_differences() {
        let mut model = Model::new(&ModelConfig::micro(), 3, 23).unwrap();
        assert!(model.param_count() <= 500, "{}", model.param_count());
        // zero biases put an exactly-identity pose on the frustum edge; use a generic point.
        // Some points land within a step of a ReLU or mask kink and fail legitimately.
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mut values = model.all_values();
        for v in values.iter_mut().flat_map(|v| v.data_mut()) {
            *v += rng.gen_range(-0.05..0.05);
        }
        model.set_all_values(&values).unwrap();
        let snippet = micro_snippet();
        let pyr = snippet.pyramids().unwrap();
        let cfg = ObjectiveConfig::default();
        let nd = model.disp.params().len();
        let rep = gradient_check(
            |tape, leaves| {
                Ok(model
                    .objective_on_tape(tape, &leaves[..nd], &leaves[nd..], &snippet, &pyr, &cfg)?
                    .total)
            },
            &model.all_values(),
            1e-5,
            1e-4,
            0.0,
        )
        .unwrap();
        assert!(rep.passed, "{rep}");
    }

    #[test]
    fn training_is_deterministic_and_logs() {
        let snippet = micro_snippet();
        let opts = TrainOptions { iterations: 6, ..Default::default() };
        let run = || {
            let mut model = Model::new(&ModelConfig::micro(), 3, 2).unwrap();
            let mut lines = Vec::new();
            train(&mut model, &[snippet.clone(), snippet.clone()], &opts, |l| {
                lines.push(serde_json::to_string(l).unwrap());
                Ok(())
            })
            .unwrap();
            (model, lines)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(la.len(), 6);
        let v: serde_json::Value = serde_json::from_str(&la[0]).unwrap();
        for key in ["total", "terms", "iteration"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let term = &v["terms"][0];
        for key in ["scale", "side", "ap_spatial", "ap_temporal", "smooth"] {
            assert!(term.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn nan_input_aborts_without_touching_parameters() {
        let mut snippet = micro_snippet();
        snippet.left[1].data_mut()[7] = f64::NAN;
        let mut model = Model::new(&ModelConfig::micro(), 3, 2).unwrap();
        let before = model.clone();
        let opts = TrainOptions { iterations: 3, augment: AugmentPolicy::disabled(), ..Default::default() };
        let err = train(&mut model, &[snippet], &opts, |_| Ok(())).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss(0) | Error::NonFiniteGradient { .. }), "{err}");
        assert_eq!(model, before);
    }

    #[test]
    fn moving_average_window() {
        assert_eq!(moving_average(&[2.0, 4.0, 6.0, 8.0], 2), vec![2.0, 3.0, 5.0, 7.0]);
    }
}
