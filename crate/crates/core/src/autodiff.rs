//! Reverse-mode differentiation over grid-valued nodes.
//!
//! A [`Tape`] is an append-only list of nodes. Every node holds its forward
//! value as an [`ImageGrid`] and the operation that produced it; operation
//! inputs always refer to earlier nodes, so walking the list backwards is a
//! valid reverse topological order. [`Tape::backward`] seeds the chosen scalar
//! output with 1 and accumulates adjoints in that fixed order, which makes two
//! backward passes over identical tapes bit-identical.
//!
//! Only the primitives needed by the warping, objective and network code are
//! provided. Anything more specialised (bilinear gathering, reprojection) plugs
//! in through [`CustomOp`].
//!
//! [`gradient_check`] compares the tape's gradients against central finite
//! differences.

use std::fmt;

use crate::error::{Error, Result};
use crate::grid::{correlate3x3, correlate3x3_adjoint, ImageGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
///
/// `backward` receives the forward values of the inputs and output plus the
/// output adjoint, and returns one optional adjoint per input (same order).
pub trait CustomOp {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&ImageGrid],
        output: &ImageGrid,
        grad_out: &ImageGrid,
    ) -> Vec<Option<ImageGrid>>;
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Square(NodeId),
    PowConst(NodeId, f64),
    Exp(NodeId),
    Recip(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Elementwise {
        input: NodeId,
        derivative: fn(f64) -> f64,
    },
    Sum(NodeId),
    Mean(NodeId),
    MaskedMean {
        input: NodeId,
        weights: Vec<f64>,
        denom: f64,
    },
    ChannelMean(NodeId),
    Stencil3(NodeId, [f64; 9]),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
    },
    Upsample2(NodeId),
    Concat(Vec<NodeId>),
    Slice {
        input: NodeId,
        start: usize,
    },
    Reshape(NodeId),
    GlobalAvgPool(NodeId),
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Custom {
        inputs: Vec<NodeId>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![*a, *b],
            Neg(a) | Scale(a, _) | AddScalar(a) | Square(a) | PowConst(a, _) | Exp(a)
            | Recip(a) | Sigmoid(a) | Relu(a) | Sum(a) | Mean(a) | ChannelMean(a)
            | Stencil3(a, _) | Upsample2(a) | Reshape(a) | GlobalAvgPool(a) => vec![*a],
            Elementwise { input, .. } | MaskedMean { input, .. } | Slice { input, .. } => {
                vec![*input]
            }
            Conv2d {
                input,
                weight,
                bias,
                ..
            }
            | Linear {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
            Concat(v) => v.clone(),
            Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: ImageGrid,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<ImageGrid>>,
    shapes: Vec<(usize, usize, usize)>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&ImageGrid> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Adjoint of `id`, zeros when the output does not depend on it.
    pub fn wrt(&self, id: NodeId) -> ImageGrid {
        match self.get(id) {
            Some(g) => g.clone(),
            None => {
                let (c, h, w) = self.shapes[id.0];
                ImageGrid::zeros(c, h, w)
            }
        }
    }
}

fn check_same(a: &ImageGrid, b: &ImageGrid, what: &str) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node so the tape can record a fresh forward pass.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, id: NodeId) -> &ImageGrid {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data()[0]
    }

    fn push(&mut self, value: ImageGrid, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Records an input. Parameters and constants are both leaves; constants
    /// simply never have their adjoint read.
    pub fn leaf(&mut self, value: ImageGrid) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: ImageGrid) -> NodeId {
        self.leaf(value)
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        check_same(va, vb, what)?;
        let v = va.zip_map(vb, f)?;
        Ok(self.push(v, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Sum of several same-shaped nodes, left to right.
    pub fn add_all(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::shape("add_all of zero terms"))?;
        let mut acc = first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let v = self.nodes[a.0].value.map(f);
        self.push(v, op)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        self.unary(a, |x| k * x, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> NodeId {
        self.unary(a, |x| x + k, Op::AddScalar(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn pow_const(&mut self, a: NodeId, p: f64) -> NodeId {
        self.unary(a, |x| x.powf(p), Op::PowConst(a, p))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| 1.0 / x, Op::Recip(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `max(x, 0)`; at exactly zero the left branch (slope 0) is taken.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    /// Elementwise function with a caller-supplied derivative. The derivative
    /// is trusted as given, which is what the gradient checker's negative
    /// control relies on.
    pub fn elementwise(
        &mut self,
        a: NodeId,
        function: fn(f64) -> f64,
        derivative: fn(f64) -> f64,
    ) -> NodeId {
        self.unary(
            a,
            function,
            Op::Elementwise {
                input: a,
                derivative,
            },
        )
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].value.sum();
        self.push(ImageGrid::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let m = self.nodes[a.0].value.mean();
        self.push(ImageGrid::scalar(m), Op::Mean(a))
    }

    /// Mean over the pixels where `mask` is set, averaging channels too. An
    /// all-false mask yields 0 with a zero adjoint.
    pub fn masked_mean(&mut self, a: NodeId, mask: &[bool]) -> Result<NodeId> {
        let v = &self.nodes[a.0].value;
        if mask.len() != v.plane_len() {
            return Err(Error::shape(format!(
                "mask of {} pixels for a {}x{} grid",
                mask.len(),
                v.height(),
                v.width()
            )));
        }
        let weights: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let count: f64 = weights.iter().sum();
        let denom = count * v.channels() as f64;
        let mut total = 0.0;
        if denom > 0.0 {
            for c in 0..v.channels() {
                for (x, w) in v.plane(c).iter().zip(&weights) {
                    if *w != 0.0 {
                        total += x;
                    }
                }
            }
            total /= denom;
        }
        Ok(self.push(
            ImageGrid::scalar(total),
            Op::MaskedMean {
                input: a,
                weights,
                denom,
            },
        ))
    }

    /// Averages channels into a single-channel grid.
    pub fn channel_mean(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value;
        let (c, h, w) = v.shape();
        let mut out = ImageGrid::zeros(1, h, w);
        for ch in 0..c {
            for (o, x) in out.data_mut().iter_mut().zip(v.plane(ch)) {
                *o += x;
            }
        }
        let inv = 1.0 / c as f64;
        for o in out.data_mut() {
            *o *= inv;
        }
        self.push(out, Op::ChannelMean(a))
    }

    /// Per-channel 3x3 correlation with edge replication.
    pub fn stencil3(&mut self, a: NodeId, kernel: [f64; 9]) -> NodeId {
        let v = correlate3x3(&self.nodes[a.0].value, &kernel);
        self.push(v, Op::Stencil3(a, kernel))
    }

    /// Zero-padded 2-D convolution. `weight` holds one k x k kernel per
    /// (out, in) channel pair as a `(c_out * c_in, k, k)` grid; `bias` is a
    /// `(c_out, 1, 1)` vector. Output size is `ceil(H / stride)`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
    ) -> Result<NodeId> {
        let x = &self.nodes[input.0].value;
        let wt = &self.nodes[weight.0].value;
        let b = &self.nodes[bias.0].value;
        let geom = ConvGeometry::new(x, wt, b, stride)?;
        let out = geom.forward(x, wt, b);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
            },
        ))
    }

    /// Nearest-neighbour 2x upsampling to exactly `height x width`.
    pub fn upsample2(&mut self, a: NodeId, height: usize, width: usize) -> Result<NodeId> {
        let v = &self.nodes[a.0].value;
        if height.div_ceil(2) != v.height() || width.div_ceil(2) != v.width() {
            return Err(Error::shape(format!(
                "cannot upsample {}x{} to {}x{}",
                v.height(),
                v.width(),
                height,
                width
            )));
        }
        let out = ImageGrid::from_fn(v.channels(), height, width, |c, y, x| v.get(c, y / 2, x / 2));
        Ok(self.push(out, Op::Upsample2(a)))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let grids: Vec<&ImageGrid> = parts.iter().map(|p| &self.nodes[p.0].value).collect();
        let out = ImageGrid::concat_channels(&grids)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = &self.nodes[a.0].value;
        if start + len > v.channels() || len == 0 {
            return Err(Error::shape(format!(
                "slice {}..{} of {} channels",
                start,
                start + len,
                v.channels()
            )));
        }
        let n = v.plane_len();
        let data = v.data()[start * n..(start + len) * n].to_vec();
        let out = ImageGrid::new(len, v.height(), v.width(), data)?;
        Ok(self.push(out, Op::Slice { input: a, start }))
    }

    pub fn reshape(&mut self, a: NodeId, channels: usize, height: usize, width: usize) -> Result<NodeId> {
        let out = self.nodes[a.0].value.reshaped(channels, height, width)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Per-channel spatial mean, giving a `(c, 1, 1)` vector.
    pub fn global_avg_pool(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value;
        let n = v.plane_len() as f64;
        let means: Vec<f64> = (0..v.channels())
            .map(|c| v.plane(c).iter().sum::<f64>() / n)
            .collect();
        self.push(ImageGrid::vector(&means), Op::GlobalAvgPool(a))
    }

    /// Dense layer. `input` is `(n, 1, 1)`, `weight` is `(1, m, n)` and `bias`
    /// is `(m, 1, 1)`.
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let b = &self.nodes[bias.0].value;
        let n = x.len();
        let m = b.len();
        if w.shape() != (1, m, n) {
            return Err(Error::shape(format!(
                "linear weight {:?}, expected (1, {m}, {n})",
                w.shape()
            )));
        }
        let out: Vec<f64> = (0..m)
            .map(|i| {
                let row = &w.data()[i * n..(i + 1) * n];
                b.data()[i] + row.iter().zip(x.data()).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        Ok(self.push(
            ImageGrid::vector(&out),
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    /// Records a node computed outside the tape together with its backward rule.
    pub fn custom(&mut self, inputs: &[NodeId], value: ImageGrid, op: Box<dyn CustomOp>) -> NodeId {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// Propagates adjoints from the scalar node `output` to every node it
    /// depends on.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out_len = self.nodes[output.0].value.len();
        if out_len != 1 {
            return Err(Error::NonScalarOutput {
                node: output.0,
                len: out_len,
            });
        }
        for (i, node) in self.nodes.iter().enumerate().take(output.0 + 1) {
            if node.op.inputs().iter().any(|p| p.0 >= i) {
                return Err(Error::Cycle(i));
            }
        }

        let mut grads: Vec<Option<ImageGrid>> = vec![None; output.0 + 1];
        grads[output.0] = Some(ImageGrid::scalar(1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &ImageGrid, grads: &mut [Option<ImageGrid>]) {
        let node = &self.nodes[i];
        let val = |id: NodeId| &self.nodes[id.0].value;
        let elementwise = |id: NodeId, d: &dyn Fn(f64, f64) -> f64| -> ImageGrid {
            // d(input, output) * g
            let x = val(id);
            let y = &node.value;
            let data = x
                .data()
                .iter()
                .zip(y.data())
                .zip(g.data())
                .map(|((&xi, &yi), &gi)| d(xi, yi) * gi)
                .collect();
            ImageGrid::new(x.channels(), x.height(), x.width(), data).expect("same shape")
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(val(*b), |gi, bi| gi * bi).expect("shape");
                let gb = g.zip_map(val(*a), |gi, ai| gi * ai).expect("shape");
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                let ga = g.zip_map(vb, |gi, bi| gi / bi).expect("shape");
                // d(a/b)/db = -(a/b)/b
                let q = node.value.zip_map(vb, |qi, bi| -qi / bi).expect("shape");
                let gb = q.zip_map(g, |qi, gi| qi * gi).expect("shape");
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Neg(a) => accumulate(grads, *a, g.map(|v| -v)),
            Op::Scale(a, k) => {
                let k = *k;
                accumulate(grads, *a, g.map(|v| k * v))
            }
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::Square(a) => accumulate(grads, *a, elementwise(*a, &|x, _| 2.0 * x)),
            Op::PowConst(a, p) => {
                let p = *p;
                accumulate(grads, *a, elementwise(*a, &|x, _| p * x.powf(p - 1.0)))
            }
            Op::Exp(a) => accumulate(grads, *a, elementwise(*a, &|_, y| y)),
            Op::Recip(a) => accumulate(grads, *a, elementwise(*a, &|_, y| -y * y)),
            Op::Sigmoid(a) => accumulate(grads, *a, elementwise(*a, &|_, y| y * (1.0 - y))),
            Op::Relu(a) => {
                accumulate(grads, *a, elementwise(*a, &|x, _| if x > 0.0 { 1.0 } else { 0.0 }))
            }
            Op::Elementwise { input, derivative } => {
                let d = *derivative;
                accumulate(grads, *input, elementwise(*input, &|x, _| d(x)))
            }
            Op::Sum(a) => {
                let (c, h, w) = val(*a).shape();
                accumulate(grads, *a, ImageGrid::filled(c, h, w, g.data()[0]));
            }
            Op::Mean(a) => {
                let v = val(*a);
                let (c, h, w) = v.shape();
                accumulate(grads, *a, ImageGrid::filled(c, h, w, g.data()[0] / v.len() as f64));
            }
            Op::MaskedMean {
                input,
                weights,
                denom,
            } => {
                let (c, h, w) = val(*input).shape();
                let mut out = ImageGrid::zeros(c, h, w);
                if *denom > 0.0 {
                    let s = g.data()[0] / denom;
                    let n = h * w;
                    for ch in 0..c {
                        for (o, wt) in out.data_mut()[ch * n..(ch + 1) * n].iter_mut().zip(weights) {
                            *o = wt * s;
                        }
                    }
                }
                accumulate(grads, *input, out);
            }
            Op::ChannelMean(a) => {
                let (c, h, w) = val(*a).shape();
                let inv = 1.0 / c as f64;
                let n = h * w;
                let mut out = ImageGrid::zeros(c, h, w);
                for ch in 0..c {
                    for (o, gi) in out.data_mut()[ch * n..(ch + 1) * n].iter_mut().zip(g.data()) {
                        *o = gi * inv;
                    }
                }
                accumulate(grads, *a, out);
            }
            Op::Stencil3(a, k) => accumulate(grads, *a, correlate3x3_adjoint(g, k)),
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
            } => {
                let x = val(*input);
                let wt = val(*weight);
                let b = val(*bias);
                let geom = ConvGeometry::new(x, wt, b, *stride).expect("validated at forward");
                let (gx, gw, gb) = geom.backward(x, wt, g);
                accumulate(grads, *input, gx);
                accumulate(grads, *weight, gw);
                accumulate(grads, *bias, gb);
            }
            Op::Upsample2(a) => {
                let (c, h, w) = val(*a).shape();
                let mut out = ImageGrid::zeros(c, h, w);
                let (_, gh, gw) = g.shape();
                for ch in 0..c {
                    for y in 0..gh {
                        for x in 0..gw {
                            let i = out.index(ch, y / 2, x / 2);
                            out.data_mut()[i] += g.get(ch, y, x);
                        }
                    }
                }
                accumulate(grads, *a, out);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (c, h, w) = val(*p).shape();
                    let n = c * h * w;
                    let piece = ImageGrid::new(c, h, w, g.data()[offset..offset + n].to_vec())
                        .expect("shape");
                    offset += n;
                    accumulate(grads, *p, piece);
                }
            }
            Op::Slice { input, start } => {
                let (c, h, w) = val(*input).shape();
                let mut out = ImageGrid::zeros(c, h, w);
                let n = h * w;
                out.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                accumulate(grads, *input, out);
            }
            Op::Reshape(a) => {
                let (c, h, w) = val(*a).shape();
                accumulate(grads, *a, g.reshaped(c, h, w).expect("shape"));
            }
            Op::GlobalAvgPool(a) => {
                let (c, h, w) = val(*a).shape();
                let n = (h * w) as f64;
                accumulate(grads, *a, ImageGrid::from_fn(c, h, w, |ch, _, _| g.data()[ch] / n));
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = val(*input);
                let w = val(*weight);
                let n = x.len();
                let m = g.len();
                let mut gx = vec![0.0; n];
                let mut gw = vec![0.0; m * n];
                for i in 0..m {
                    let gi = g.data()[i];
                    for j in 0..n {
                        gx[j] += w.data()[i * n + j] * gi;
                        gw[i * n + j] = gi * x.data()[j];
                    }
                }
                accumulate(
                    grads,
                    *input,
                    ImageGrid::new(x.channels(), x.height(), x.width(), gx).expect("shape"),
                );
                accumulate(grads, *weight, ImageGrid::new(1, m, n, gw).expect("shape"));
                accumulate(grads, *bias, g.clone());
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&ImageGrid> = inputs.iter().map(|p| val(*p)).collect();
                let gs = op.backward(&vals, &node.value, g);
                debug_assert_eq!(gs.len(), inputs.len(), "{} returned wrong arity", op.name());
                for (p, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        accumulate(grads, *p, gi);
                    }
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<ImageGrid>], id: NodeId, contribution: ImageGrid) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

struct ConvGeometry {
    c_in: usize,
    c_out: usize,
    k: usize,
    pad: usize,
    stride: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(x: &ImageGrid, wt: &ImageGrid, b: &ImageGrid, stride: usize) -> Result<Self> {
        let (c_in, h, w) = x.shape();
        let (kc, kh, kw) = wt.shape();
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape(format!("conv kernel must be odd and square, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::InvalidValue("conv stride 0".into()));
        }
        let c_out = b.len();
        if b.shape() != (c_out, 1, 1) || kc != c_out * c_in {
            return Err(Error::shape(format!(
                "conv weight {:?} / bias {:?} do not fit {} input channels",
                wt.shape(),
                b.shape(),
                c_in
            )));
        }
        Ok(Self {
            c_in,
            c_out,
            k: kh,
            pad: kh / 2,
            stride,
            h,
            w,
            ho: h.div_ceil(stride),
            wo: w.div_ceil(stride),
        })
    }

    /// Output positions `o` with `0 <= o * stride + kk - pad < len`.
    fn valid_range(&self, kk: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if kk >= self.pad { 0 } else { (self.pad - kk).div_ceil(s) };
        // largest o with o*s + kk - pad <= len - 1
        let top = len - 1 + self.pad;
        let hi = if top < kk { 0 } else { ((top - kk) / s + 1).min(out_len) };
        (lo.min(hi), hi)
    }

    fn forward(&self, x: &ImageGrid, wt: &ImageGrid, b: &ImageGrid) -> ImageGrid {
        let mut out = ImageGrid::zeros(self.c_out, self.ho, self.wo);
        let (ho, wo, h, w, k, s, p) = (self.ho, self.wo, self.h, self.w, self.k, self.stride, self.pad);
        let xd = x.data();
        let wd = wt.data();
        let od = out.data_mut();
        for co in 0..self.c_out {
            let ob = co * ho * wo;
            od[ob..ob + ho * wo].fill(b.data()[co]);
            for ci in 0..self.c_in {
                let xb = ci * h * w;
                let kb = (co * self.c_in + ci) * k * k;
                for ky in 0..k {
                    let (y0, y1) = self.valid_range(ky, h, ho);
                    for kx in 0..k {
                        let wv = wd[kb + ky * k + kx];
                        let (x0, x1) = self.valid_range(kx, w, wo);
                        for yo in y0..y1 {
                            let iy = yo * s + ky - p;
                            let orow = ob + yo * wo;
                            let irow = xb + iy * w;
                            if s == 1 {
                                let src = &xd[irow + x0 + kx - p..irow + x1 + kx - p];
                                for (o, v) in od[orow + x0..orow + x1].iter_mut().zip(src) {
                                    *o += wv * v;
                                }
                            } else {
                                for xo in x0..x1 {
                                    od[orow + xo] += wv * xd[irow + xo * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn backward(&self, x: &ImageGrid, wt: &ImageGrid, g: &ImageGrid) -> (ImageGrid, ImageGrid, ImageGrid) {
        let (ho, wo, h, w, k, s, p) = (self.ho, self.wo, self.h, self.w, self.k, self.stride, self.pad);
        let mut gx = ImageGrid::zeros(self.c_in, h, w);
        let mut gw = ImageGrid::zeros(self.c_out * self.c_in, k, k);
        let mut gb = ImageGrid::zeros(self.c_out, 1, 1);
        let xd = x.data();
        let wd = wt.data();
        let gd = g.data();
        for co in 0..self.c_out {
            let ob = co * ho * wo;
            gb.data_mut()[co] = gd[ob..ob + ho * wo].iter().sum();
        }
        let gxd = gx.data_mut();
        for ci in 0..self.c_in {
            let xb = ci * h * w;
            for co in 0..self.c_out {
                let ob = co * ho * wo;
                let kb = (co * self.c_in + ci) * k * k;
                for ky in 0..k {
                    let (y0, y1) = self.valid_range(ky, h, ho);
                    for kx in 0..k {
                        let wv = wd[kb + ky * k + kx];
                        let (x0, x1) = self.valid_range(kx, w, wo);
                        let mut acc = 0.0;
                        for yo in y0..y1 {
                            let iy = yo * s + ky - p;
                            let orow = ob + yo * wo;
                            let irow = xb + iy * w;
                            if s == 1 {
                                let start = irow + x0 + kx - p;
                                let n = x1 - x0;
                                let gs = &gd[orow + x0..orow + x1];
                                let xs = &xd[start..start + n];
                                for ((gxo, &go), &xv) in gxd[start..start + n].iter_mut().zip(gs).zip(xs) {
                                    acc += go * xv;
                                    *gxo += wv * go;
                                }
                            } else {
                                for xo in x0..x1 {
                                    let go = gd[orow + xo];
                                    let ii = irow + xo * s + kx - p;
                                    acc += go * xd[ii];
                                    gxd[ii] += wv * go;
                                }
                            }
                        }
                        gw.data_mut()[kb + ky * k + kx] = acc;
                    }
                }
            }
        }
        (gx, gw, gb)
    }
}

// --- gradient checking -----------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input index, element index)` of the largest relative error, or of
    /// the first non-finite gradient.
    pub worst_coordinate: (usize, usize),
    pub coordinates: usize,
    pub passed: bool,
    pub diagnostic: Option<String>,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} coords={:<6} max_rel={:.3e} max_abs={:.3e} worst=({}, {})",
            if self.passed { "PASS" } else { "FAIL" },
            self.coordinates,
            self.max_rel_error,
            self.max_abs_error,
            self.worst_coordinate.0,
            self.worst_coordinate.1
        )?;
        if let Some(d) = &self.diagnostic {
            write!(f, " {d}")?;
        }
        Ok(())
    }
}

/// Relative error with the `max(|a|, |n|, 1e-7)` denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

/// Compares tape gradients of `f` at `point` against central differences with
/// step `step`. `f` receives one leaf per entry of `point` and must return a
/// scalar node.
pub fn gradient_check<F>(
    f: F,
    point: &[ImageGrid],
    step: f64,
    tol_rel: f64,
    tol_abs: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidValue(format!("finite-difference step {step}")));
    }
    let mut tape = Tape::new();
    let leaves: Vec<NodeId> = point.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &leaves)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<ImageGrid> = leaves.iter().map(|&l| grads.wrt(l)).collect();

    let eval = |pt: &[ImageGrid]| -> Result<f64> {
        let mut t = Tape::new();
        let ls: Vec<NodeId> = pt.iter().map(|p| t.leaf(p.clone())).collect();
        let o = f(&mut t, &ls)?;
        Ok(t.scalar(o))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_coordinate: (0, 0),
        coordinates: 0,
        passed: true,
        diagnostic: None,
    };
    let mut work: Vec<ImageGrid> = point.to_vec();
    for (li, base) in point.iter().enumerate() {
        for e in 0..base.len() {
            let x0 = base.data()[e];
            work[li].data_mut()[e] = x0 + step;
            let fp = eval(&work)?;
            work[li].data_mut()[e] = x0 - step;
            let fm = eval(&work)?;
            work[li].data_mut()[e] = x0;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[li].data()[e];
            report.coordinates += 1;
            if !a.is_finite() || !numeric.is_finite() {
                report.passed = false;
                report.worst_coordinate = (li, e);
                report.max_rel_error = f64::INFINITY;
                report.max_abs_error = f64::INFINITY;
                report.diagnostic = Some(format!(
                    "non-finite gradient at input {li} element {e}: analytic {a}, numeric {numeric}"
                ));
                return Ok(report);
            }
            let abs = (a - numeric).abs();
            let rel = relative_error(a, numeric);
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_coordinate = (li, e);
            }
        }
    }
    report.passed = report.max_rel_error < tol_rel || report.max_abs_error < tol_abs;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_grid(c: usize, h: usize, w: usize, seed: u64) -> ImageGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageGrid::from_fn(c, h, w, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    fn check(point: &[ImageGrid], f: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId>) -> GradCheckReport {
        let r = gradient_check(f, point, 1e-5, 1e-6, 0.0).unwrap();
        assert!(r.passed, "{r}");
        r
    }

    #[test]
    fn identity_gradient_is_one() {
        let mut t = Tape::new();
        let x = t.leaf(ImageGrid::scalar(3.0));
        let g = t.backward(x).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0]);
    }

    #[test]
    fn product_rule() {
        let mut t = Tape::new();
        let x = t.leaf(ImageGrid::scalar(2.0));
        let y = t.leaf(ImageGrid::scalar(5.0));
        let z = t.mul(x, y).unwrap();
        let g = t.backward(z).unwrap();
        assert_eq!(g.wrt(x).data(), &[5.0]);
        assert_eq!(g.wrt(y).data(), &[2.0]);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(ImageGrid::zeros(1, 2, 2));
        assert!(matches!(t.backward(x), Err(Error::NonScalarOutput { .. })));
    }

    #[test]
    fn shared_input_accumulates() {
        // f = x*x + 3x at x=2 -> 2x + 3 = 7
        let mut t = Tape::new();
        let x = t.leaf(ImageGrid::scalar(2.0));
        let xx = t.mul(x, x).unwrap();
        let x3 = t.scale(x, 3.0);
        let f = t.add(xx, x3).unwrap();
        assert_eq!(t.backward(f).unwrap().wrt(x).data(), &[7.0]);
    }

    #[test]
    fn tape_is_reusable_after_backward() {
        let mut t = Tape::new();
        let x = t.leaf(ImageGrid::scalar(1.5));
        let y = t.square(x);
        let g1 = t.backward(y).unwrap().wrt(x);
        let g2 = t.backward(y).unwrap().wrt(x);
        assert_eq!(g1, g2);
        t.clear();
        assert!(t.is_empty());
    }

    #[test]
    fn quadratic_gradient_check_is_tight() {
        let x = rand_grid(7, 1, 1, 11);
        let r = gradient_check(
            |t, l| {
                let sq = t.square(l[0]);
                let s = t.sum(sq);
                Ok(t.scale(s, 0.5))
            },
            &[x],
            1e-5,
            1e-9,
            0.0,
        )
        .unwrap();
        assert!(r.passed, "{r}");
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn wrong_adjoint_is_caught() {
        fn wrong(x: f64) -> f64 {
            1.1 * x.cos()
        }
        let x = rand_grid(5, 1, 1, 2);
        let r = gradient_check(
            |t, l| {
                let s = t.elementwise(l[0], f64::sin, wrong);
                Ok(t.sum(s))
            },
            &[x],
            1e-5,
            1e-4,
            0.0,
        )
        .unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_error > 0.05);
    }

    #[test]
    fn non_finite_gradient_fails_with_coordinate() {
        let x = ImageGrid::vector(&[1.0, 0.0, 2.0]);
        let r = gradient_check(
            |t, l| {
                let r = t.pow_const(l[0], 0.5);
                Ok(t.sum(r))
            },
            &[x],
            1e-5,
            1e-4,
            0.0,
        )
        .unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst_coordinate, (0, 1));
        assert!(r.diagnostic.is_some());
    }

    #[test]
    fn elementwise_primitives() {
        let x = rand_grid(2, 3, 4, 5);
        check(&[x.clone()], |t, l| {
            let e = t.exp(l[0]);
            let s = t.sigmoid(e);
            let sq = t.square(s);
            let p = t.add_scalar(sq, 0.5);
            let q = t.pow_const(p, 0.45);
            let r = t.recip(q);
            let n = t.neg(r);
            Ok(t.mean(n))
        });
        let y = rand_grid(2, 3, 4, 6).map(|v| v + 2.5);
        check(&[x, y], |t, l| {
            let a = t.div(l[0], l[1])?;
            let b = t.sub(a, l[1])?;
            let c = t.mul(b, l[0])?;
            let cm = t.channel_mean(c);
            Ok(t.sum(cm))
        });
    }

    #[test]
    fn relu_takes_left_branch_at_zero() {
        let mut t = Tape::new();
        let x = t.leaf(ImageGrid::vector(&[-1.0, 0.0, 2.0]));
        let r = t.relu(x);
        let s = t.sum(r);
        assert_eq!(t.backward(s).unwrap().wrt(x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn masked_mean_counts_only_valid() {
        let mut t = Tape::new();
        let x = t.leaf(ImageGrid::new(2, 1, 3, vec![1.0, 2.0, 3.0, 5.0, 7.0, 9.0]).unwrap());
        let m = t.masked_mean(x, &[true, false, true]).unwrap();
        assert_eq!(t.scalar(m), (1.0 + 3.0 + 5.0 + 9.0) / 4.0);
        let g = t.backward(m).unwrap().wrt(x);
        assert_eq!(g.data(), &[0.25, 0.0, 0.25, 0.25, 0.0, 0.25]);
        let empty = t.masked_mean(x, &[false; 3]).unwrap();
        assert_eq!(t.scalar(empty), 0.0);
    }

    #[test]
    fn structural_primitives() {
        let x = rand_grid(3, 5, 6, 8);
        check(&[x.clone()], |t, l| {
            let s = t.stencil3(l[0], crate::grid::SOBEL_X);
            let b = t.stencil3(s, crate::grid::BOX3);
            let a = t.slice_channels(b, 1, 2)?;
            let c = t.concat(&[a, l[0]])?;
            let r = t.reshape(c, 1, 5, 30)?;
            let sq = t.square(r);
            Ok(t.sum(sq))
        });
        check(&[rand_grid(2, 3, 3, 4)], |t, l| {
            let u = t.upsample2(l[0], 5, 6)?;
            let w = t.constant(rand_grid(2, 5, 6, 99));
            let p = t.mul(u, w)?;
            Ok(t.sum(p))
        });
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x = rand_grid(2, 5, 7, 1);
        let w = rand_grid(3 * 2, 3, 3, 2);
        let b = rand_grid(3, 1, 1, 3);
        for stride in [1, 2] {
            let mut t = Tape::new();
            let (xn, wn, bn) = (t.leaf(x.clone()), t.leaf(w.clone()), t.leaf(b.clone()));
            let y = t.conv2d(xn, wn, bn, stride).unwrap();
            let out = t.value(y);
            assert_eq!(out.shape(), (3, 5usize.div_ceil(stride), 7usize.div_ceil(stride)));
            for co in 0..3 {
                for yo in 0..out.height() {
                    for xo in 0..out.width() {
                        let mut acc = b.data()[co];
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (yo * stride + ky) as isize - 1;
                                    let ix = (xo * stride + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= 5 || ix >= 7 {
                                        continue;
                                    }
                                    acc += w.get(co * 2 + ci, ky, kx) * x.get(ci, iy as usize, ix as usize);
                                }
                            }
                        }
                        assert!((out.get(co, yo, xo) - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_linear_pool_gradients() {
        for stride in [1, 2] {
            let pts = [rand_grid(2, 6, 5, 1), rand_grid(4 * 2, 3, 3, 2), rand_grid(4, 1, 1, 3)];
            check(&pts, |t, l| {
                let y = t.conv2d(l[0], l[1], l[2], stride)?;
                let r = t.sigmoid(y);
                let p = t.global_avg_pool(r);
                let sq = t.square(p);
                Ok(t.sum(sq))
            });
        }
        let pts = [rand_grid(4, 1, 1, 1), rand_grid(1, 3, 4, 2), rand_grid(3, 1, 1, 3)];
        check(&pts, |t, l| {
            let y = t.linear(l[0], l[1], l[2])?;
            let e = t.exp(y);
            Ok(t.sum(e))
        });
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut t = Tape::new();
        let a = t.leaf(ImageGrid::zeros(1, 2, 2));
        let b = t.leaf(ImageGrid::zeros(1, 2, 3));
        assert!(t.add(a, b).is_err());
        assert!(t.slice_channels(a, 0, 2).is_err());
        assert!(t.upsample2(a, 5, 4).is_err());
    }

    #[test]
    fn backward_is_deterministic() {
        let build = || {
            let mut t = Tape::new();
            let x = t.leaf(rand_grid(3, 6, 6, 42));
            let w = t.leaf(rand_grid(2 * 3, 3, 3, 43));
            let b = t.leaf(rand_grid(2, 1, 1, 44));
            let y = t.conv2d(x, w, b, 1).unwrap();
            let s = t.stencil3(y, crate::grid::SOBEL_Y);
            let q = t.square(s);
            let m = t.mean(q);
            let g = t.backward(m).unwrap();
            (g.wrt(x), g.wrt(w))
        };
        let (a1, b1) = build();
        let (a2, b2) = build();
        assert_eq!(a1.data(), a2.data());
        assert_eq!(b1.data(), b2.data());
    }

    proptest! {
        #[test]
        fn adjoints_are_linear(seed in 0u64..500, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            // backward(a f + b g) == a grad f + b grad g
            let x0 = rand_grid(1, 4, 4, seed);
            let grad = |ca: f64, cb: f64| {
                let mut t = Tape::new();
                let x = t.leaf(x0.clone());
                let e = t.exp(x);
                let f = t.sum(e);
                let s = t.stencil3(x, crate::grid::SOBEL_X);
                let sq = t.square(s);
                let g = t.mean(sq);
                let fa = t.scale(f, ca);
                let gb = t.scale(g, cb);
                let tot = t.add(fa, gb).unwrap();
                t.backward(tot).unwrap().wrt(x)
            };
            let combined = grad(a, b);
            let gf = grad(1.0, 0.0);
            let gg = grad(0.0, 1.0);
            for i in 0..combined.len() {
                let expect = a * gf.data()[i] + b * gg.data()[i];
                prop_assert!((combined.data()[i] - expect).abs() < 1e-12);
            }
        }
    }
}
