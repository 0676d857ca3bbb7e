use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::{self, ConvGeometry, Padding};
use super::special::{digamma, ln_gamma};
use super::{Grid, Shape, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Pointwise single-argument operations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Lgamma,
    Abs,
    Square,
    Recip,
    Neg,
    Scale(f32),
    Shift(f32),
}

/// Pointwise two-argument operations on equally shaped grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    Conv {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        geometry: ConvGeometry,
    },
    MaxPool {
        input: NodeId,
        argmax: Vec<u32>,
    },
    UpsampleConcat {
        low: NodeId,
        skip: NodeId,
    },
    Unary {
        input: NodeId,
        kind: Unary,
    },
    Binary {
        a: NodeId,
        b: NodeId,
        kind: Binary,
    },
    Dropout {
        input: NodeId,
        mask: Vec<f32>,
    },
    Channel {
        input: NodeId,
        channel: usize,
    },
    MaskedMean {
        input: NodeId,
        weights: Vec<f32>,
        count: f64,
    },
}

struct Entry {
    value: Grid,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape over [`Grid`] values.
///
/// Nodes are appended in evaluation order, so the tape index is already a
/// topological order; [`Graph::backward`] walks it once in reverse. Each
/// graph owns the RNG that drives its dropout masks.
pub struct Graph {
    nodes: Vec<Entry>,
    rng: ChaCha8Rng,
}

/// Gradients produced by [`Graph::backward`], indexed by [`NodeId`].
pub struct Gradients {
    grads: Vec<Option<Grid>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Grid> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Grid> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new(seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Grid, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Entry {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Records a trainable leaf.
    pub fn variable(&mut self, value: Grid) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Grid) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Grid {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    pub fn conv3d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        padding: Padding,
    ) -> Result<NodeId, TensorError> {
        let geometry =
            ConvGeometry::new(self.shape(input), self.shape(kernel), self.shape(bias), padding)?;
        let value = conv::forward(
            self.value(input),
            self.value(kernel).data(),
            self.value(bias).data(),
            &geometry,
        );
        let rg = self.needs_grad(input) || self.needs_grad(kernel) || self.needs_grad(bias);
        Ok(self.push(
            value,
            Op::Conv {
                input,
                kernel,
                bias,
                geometry,
            },
            rg,
        ))
    }

    /// Max over non-overlapping cubic windows. Ties go to the first voxel in
    /// scan order.
    pub fn maxpool3d(&mut self, input: NodeId, window: usize) -> Result<NodeId, TensorError> {
        let shape = self.shape(input);
        let [c, d, h, w] = shape.0;
        if window == 0 || d % window != 0 || h % window != 0 || w % window != 0 {
            return Err(TensorError::Shape(format!(
                "maxpool3d: extent {shape} not divisible by window {window}"
            )));
        }
        let (od, oh, ow) = (d / window, h / window, w / window);
        let out_shape = Shape::new(c, od, oh, ow);
        let src = self.value(input);
        let mut out = Vec::with_capacity(out_shape.len());
        let mut argmax = Vec::with_capacity(out_shape.len());
        for ci in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_at = src.index([ci, z * window, y * window, x * window]);
                        for dz in 0..window {
                            for dy in 0..window {
                                let base =
                                    src.index([ci, z * window + dz, y * window + dy, x * window]);
                                for dx in 0..window {
                                    let v = src.data()[base + dx];
                                    if v > best {
                                        best = v;
                                        best_at = base + dx;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_at as u32);
                    }
                }
            }
        }
        let value = Grid::from_vec(out_shape, out)?;
        let rg = self.needs_grad(input);
        Ok(self.push(value, Op::MaxPool { input, argmax }, rg))
    }

    /// Nearest-neighbour 2x upsampling of `low` followed by channel
    /// concatenation `[upsampled low, skip]`.
    pub fn upsample_concat(&mut self, low: NodeId, skip: NodeId) -> Result<NodeId, TensorError> {
        let ls = self.shape(low);
        let ss = self.shape(skip);
        let [_, d, h, w] = ss.0;
        if ls.spatial().map(|e| e * 2) != [d, h, w] {
            return Err(TensorError::Shape(format!(
                "upsample_concat: low {ls} is not half the extent of skip {ss}"
            )));
        }
        let out_shape = Shape::new(ls.channels() + ss.channels(), d, h, w);
        let mut data = Vec::with_capacity(out_shape.len());
        let low_v = self.value(low);
        for c in 0..ls.channels() {
            for z in 0..d {
                for y in 0..h {
                    let row = low_v.index([c, z / 2, y / 2, 0]);
                    for x in 0..w {
                        data.push(low_v.data()[row + x / 2]);
                    }
                }
            }
        }
        data.extend_from_slice(self.value(skip).data());
        let value = Grid::from_vec(out_shape, data)?;
        let rg = self.needs_grad(low) || self.needs_grad(skip);
        Ok(self.push(value, Op::UpsampleConcat { low, skip }, rg))
    }

    pub fn unary(&mut self, kind: Unary, input: NodeId) -> Result<NodeId, TensorError> {
        let x = self.value(input);
        match kind {
            Unary::Log | Unary::Lgamma => {
                if let Some(bad) = x.data().iter().find(|v| !(**v > 0.0)) {
                    return Err(TensorError::Domain(format!(
                        "{kind:?} requires strictly positive arguments, found {bad}"
                    )));
                }
            }
            Unary::Recip if x.data().contains(&0.0) => {
                return Err(TensorError::Domain("Recip of zero".into()));
            }
            _ => {}
        }
        let value = match kind {
            Unary::Relu => x.map(|v| v.max(0.0)),
            Unary::Sigmoid => x.map(sigmoid),
            Unary::Softplus => x.map(softplus),
            Unary::Exp => x.map(f32::exp),
            Unary::Log => x.map(f32::ln),
            Unary::Lgamma => x.map(|v| ln_gamma(v as f64) as f32),
            Unary::Abs => x.map(f32::abs),
            Unary::Square => x.map(|v| v * v),
            Unary::Recip => x.map(|v| 1.0 / v),
            Unary::Neg => x.map(|v| -v),
            Unary::Scale(c) => x.map(|v| v * c),
            Unary::Shift(c) => x.map(|v| v + c),
        };
        if !value.all_finite() {
            return Err(TensorError::NonFinite(format!("{kind:?} produced a non-finite value")));
        }
        let rg = self.needs_grad(input);
        Ok(self.push(value, Op::Unary { input, kind }, rg))
    }

    pub fn binary(&mut self, kind: Binary, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if kind == Binary::Div && vb.data().contains(&0.0) {
            return Err(TensorError::Domain("Div by zero".into()));
        }
        let value = va.zip_map(vb, |x, y| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        })?;
        if !value.all_finite() {
            return Err(TensorError::NonFinite(format!("{kind:?} produced a non-finite value")));
        }
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(value, Op::Binary { a, b, kind }, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.unary(Unary::Relu, x)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.unary(Unary::Softplus, x)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.unary(Unary::Log, x)
    }

    pub fn lgamma(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.unary(Unary::Lgamma, x)
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.unary(Unary::Abs, x)
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.unary(Unary::Square, x)
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> Result<NodeId, TensorError> {
        self.unary(Unary::Scale(c), x)
    }

    pub fn shift(&mut self, x: NodeId, c: f32) -> Result<NodeId, TensorError> {
        self.unary(Unary::Shift(c), x)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary(Binary::Div, a, b)
    }

    /// Inverted dropout. When `active` is false, or `rate` is zero, this is
    /// the identity and records nothing.
    pub fn dropout(&mut self, input: NodeId, rate: f32, active: bool) -> Result<NodeId, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Domain(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        if !active || rate == 0.0 {
            return Ok(input);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(input).len();
        let mask: Vec<f32> = (0..n)
            .map(|_| if self.rng.random::<f32>() < rate { 0.0 } else { keep })
            .collect();
        let value = self.value(input).map_indexed(&mask);
        let rg = self.needs_grad(input);
        Ok(self.push(value, Op::Dropout { input, mask }, rg))
    }

    pub fn channel(&mut self, input: NodeId, channel: usize) -> Result<NodeId, TensorError> {
        let shape = self.shape(input);
        if channel >= shape.channels() {
            return Err(TensorError::Shape(format!(
                "channel {channel} out of range for {shape}"
            )));
        }
        let value = self.value(input).extract_channel(channel);
        let rg = self.needs_grad(input);
        Ok(self.push(value, Op::Channel { input, channel }, rg))
    }

    /// Mean of `input` over voxels where `mask` is non-zero, accumulated in
    /// 64-bit. The result is a 1x1x1x1 node.
    pub fn masked_mean(&mut self, input: NodeId, mask: &Grid) -> Result<NodeId, TensorError> {
        mask.expect_shape(self.shape(input), "masked_mean mask")?;
        let weights: Vec<f32> = mask
            .data()
            .iter()
            .map(|&m| if m != 0.0 { 1.0 } else { 0.0 })
            .collect();
        let count: f64 = weights.iter().map(|&w| w as f64).sum();
        if count == 0.0 {
            return Err(TensorError::EmptyReduction);
        }
        let total: f64 = self
            .value(input)
            .data()
            .iter()
            .zip(&weights)
            .map(|(&v, &w)| (v * w) as f64)
            .sum();
        let value = Grid::scalar((total / count) as f32);
        if !value.all_finite() {
            return Err(TensorError::NonFinite("masked_mean overflowed".into()));
        }
        let rg = self.needs_grad(input);
        Ok(self.push(
            value,
            Op::MaskedMean {
                input,
                weights,
                count,
            },
            rg,
        ))
    }

    /// Back-propagates from a scalar root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, TensorError> {
        let shape = self.shape(root);
        if shape.len() != 1 {
            return Err(TensorError::Shape(format!(
                "backward needs a scalar root, got {shape}"
            )));
        }
        self.backward_with_seed(root, Grid::full(shape, 1.0))
    }

    /// Back-propagates `seed` (the gradient of some objective with respect to
    /// `root`) through the tape.
    pub fn backward_with_seed(&self, root: NodeId, seed: Grid) -> Result<Gradients, TensorError> {
        seed.expect_shape(self.shape(root), "backward seed")?;
        let mut grads: Vec<Option<Grid>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let entry = &self.nodes[idx];
            if !entry.requires_grad || matches!(entry.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(entry, &g, &mut grads);
            // keep interior gradients readable for inspection
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, entry: &Entry, g: &Grid, grads: &mut [Option<Grid>]) {
        let mut accumulate = |id: NodeId, contribution: Grid| {
            if !self.needs_grad(id) {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => existing
                    .data_mut()
                    .iter_mut()
                    .zip(contribution.data())
                    .for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contribution),
            }
        };
        match &entry.op {
            Op::Leaf => {}
            Op::Conv {
                input,
                kernel,
                bias,
                geometry,
            } => {
                if self.needs_grad(*input) {
                    let gi = conv::backward_input(g, self.value(*kernel).data(), geometry);
                    accumulate(*input, gi);
                }
                if self.needs_grad(*kernel) || self.needs_grad(*bias) {
                    let (gk, gb) = conv::backward_params(g, self.value(*input), geometry);
                    let ks = self.shape(*kernel);
                    let bs = self.shape(*bias);
                    accumulate(*kernel, Grid::from_vec(ks, gk).expect("kernel grad shape"));
                    accumulate(*bias, Grid::from_vec(bs, gb).expect("bias grad shape"));
                }
            }
            Op::MaxPool { input, argmax } => {
                let mut gi = Grid::zeros(self.shape(*input));
                let dst = gi.data_mut();
                for (&at, &v) in argmax.iter().zip(g.data()) {
                    dst[at as usize] += v;
                }
                accumulate(*input, gi);
            }
            Op::UpsampleConcat { low, skip } => {
                let ls = self.shape(*low);
                let [_, d, h, w] = g.shape().0;
                let mut gl = Grid::zeros(ls);
                for c in 0..ls.channels() {
                    for z in 0..d {
                        for y in 0..h {
                            let src = g.index([c, z, y, 0]);
                            let dst = gl.index([c, z / 2, y / 2, 0]);
                            for x in 0..w {
                                gl.data_mut()[dst + x / 2] += g.data()[src + x];
                            }
                        }
                    }
                }
                let offset = ls.channels() * g.shape().plane();
                let gs = Grid::from_vec(self.shape(*skip), g.data()[offset..].to_vec())
                    .expect("skip grad shape");
                accumulate(*low, gl);
                accumulate(*skip, gs);
            }
            Op::Unary { input, kind } => {
                let x = self.value(*input);
                let y = &entry.value;
                let gi = match kind {
                    Unary::Relu => zip3(g, x, y, |g, x, _| if x > 0.0 { g } else { 0.0 }),
                    Unary::Sigmoid => zip3(g, x, y, |g, _, y| g * y * (1.0 - y)),
                    Unary::Softplus => zip3(g, x, y, |g, x, _| g * sigmoid(x)),
                    Unary::Exp => zip3(g, x, y, |g, _, y| g * y),
                    Unary::Log => zip3(g, x, y, |g, x, _| g / x),
                    Unary::Lgamma => zip3(g, x, y, |g, x, _| g * digamma(x as f64) as f32),
                    Unary::Abs => zip3(g, x, y, |g, x, _| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    }),
                    Unary::Square => zip3(g, x, y, |g, x, _| 2.0 * g * x),
                    Unary::Recip => zip3(g, x, y, |g, _, y| -g * y * y),
                    Unary::Neg => g.map(|v| -v),
                    Unary::Scale(c) => g.map(|v| v * c),
                    Unary::Shift(_) => g.clone(),
                };
                accumulate(*input, gi);
            }
            Op::Binary { a, b, kind } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (ga, gb) = match kind {
                    Binary::Add => (g.clone(), g.clone()),
                    Binary::Sub => (g.clone(), g.map(|v| -v)),
                    Binary::Mul => (zip3(g, vb, vb, |g, b, _| g * b), zip3(g, va, va, |g, a, _| g * a)),
                    Binary::Div => (
                        zip3(g, vb, vb, |g, b, _| g / b),
                        zip3(g, va, vb, |g, a, b| -g * a / (b * b)),
                    ),
                };
                accumulate(*a, ga);
                accumulate(*b, gb);
            }
            Op::Dropout { input, mask } => {
                accumulate(*input, g.map_indexed(mask));
            }
            Op::Channel { input, channel } => {
                let mut gi = Grid::zeros(self.shape(*input));
                gi.channel_mut(*channel).copy_from_slice(g.data());
                accumulate(*input, gi);
            }
            Op::MaskedMean {
                input,
                weights,
                count,
            } => {
                let scale = g.data()[0] as f64 / count;
                let data = weights.iter().map(|&w| (w as f64 * scale) as f32).collect();
                accumulate(
                    *input,
                    Grid::from_vec(self.shape(*input), data).expect("mean grad shape"),
                );
            }
        }
    }
}

fn zip3(g: &Grid, a: &Grid, b: &Grid, f: impl Fn(f32, f32, f32) -> f32) -> Grid {
    let data = g
        .data()
        .iter()
        .zip(a.data())
        .zip(b.data())
        .map(|((&g, &a), &b)| f(g, a, b))
        .collect();
    Grid::from_vec(g.shape(), data).expect("gradient shape")
}

impl Grid {
    /// Elementwise product with a same-length factor slice.
    pub(crate) fn map_indexed(&self, factors: &[f32]) -> Grid {
        let data = self.data().iter().zip(factors).map(|(v, f)| v * f).collect();
        Grid::from_vec(self.shape(), data).expect("same length")
    }
}
