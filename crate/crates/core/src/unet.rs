//! Configurable 3D U-Net backbone.
//!
//! Each encoder level applies two 3x3x3 convolutions with ReLU, dropout and
//! a 2x2x2 max-pool. The bottleneck repeats the double convolution. Each
//! decoder level upsamples, concatenates the matching skip features and
//! applies another double convolution, with dropout rates mirrored. Two
//! pointwise convolutions (8 channels with ReLU, then the head) finish the
//! network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidential::{constrain_raw_nodes, NigField, NigNodes, GAMMA_FLOOR};
use crate::tensor::{Graph, Grid, NodeId, Padding, Shape};

/// What the final pointwise convolution predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Four raw NIG channels.
    Evidential,
    /// One dose-logit channel, used by the dropout and ensemble baselines.
    Point,
}

impl HeadKind {
    pub fn channels(&self) -> usize {
        match self {
            HeadKind::Evidential => 4,
            HeadKind::Point => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub input_channels: usize,
    pub grid_extent: usize,
    pub depth: usize,
    pub filters: Vec<usize>,
    pub bottleneck_filters: usize,
    pub dropout: Vec<f32>,
    pub bottleneck_dropout: f32,
    pub head_hidden: usize,
    pub head: HeadKind,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig::desk()
    }
}

impl NetConfig {
    /// Reduced network for 32^3 grids.
    pub fn desk() -> Self {
        NetConfig {
            input_channels: 11,
            grid_extent: 32,
            depth: 4,
            filters: vec![8, 16, 32, 64],
            bottleneck_filters: 128,
            dropout: vec![0.10, 0.15, 0.20, 0.25],
            bottleneck_dropout: 0.30,
            head_hidden: 8,
            head: HeadKind::Evidential,
            seed: 0,
        }
    }

    /// Full-size network on 128^3 grids.
    pub fn full_scale() -> Self {
        NetConfig {
            grid_extent: 128,
            filters: vec![16, 32, 64, 128],
            bottleneck_filters: 256,
            ..NetConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.input_channels == 0 || self.head_hidden == 0 || self.bottleneck_filters == 0 {
            return fail("channel counts must be positive".into());
        }
        if self.filters.len() != self.depth {
            return fail(format!(
                "{} filter counts given for depth {}",
                self.filters.len(),
                self.depth
            ));
        }
        if self.dropout.len() != self.depth {
            return fail(format!(
                "{} dropout rates given for depth {}",
                self.dropout.len(),
                self.depth
            ));
        }
        if self.filters.contains(&0) {
            return fail("filter counts must be positive".into());
        }
        if self
            .dropout
            .iter()
            .chain(std::iter::once(&self.bottleneck_dropout))
            .any(|r| !(0.0..1.0).contains(r))
        {
            return fail("dropout rates must lie in [0, 1)".into());
        }
        let scale = 1usize
            .checked_shl(self.depth as u32)
            .ok_or_else(|| Error::Config(format!("depth {} too large", self.depth)))?;
        if self.grid_extent == 0 || !self.grid_extent.is_multiple_of(scale) {
            return fail(format!(
                "grid extent {} not divisible by 2^{}",
                self.grid_extent, self.depth
            ));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> Shape {
        let e = self.grid_extent;
        Shape::new(self.input_channels, e, e, e)
    }

    /// Convolution layers in declaration order.
    fn layers(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let mut cin = self.input_channels;
        for &f in &self.filters {
            layers.push(LayerSpec::cube(cin, f));
            layers.push(LayerSpec::cube(f, f));
            cin = f;
        }
        let b = self.bottleneck_filters;
        layers.push(LayerSpec::cube(cin, b));
        layers.push(LayerSpec::cube(b, b));
        let mut below = b;
        for &f in self.filters.iter().rev() {
            layers.push(LayerSpec::cube(below + f, f));
            layers.push(LayerSpec::cube(f, f));
            below = f;
        }
        layers.push(LayerSpec::point(below, self.head_hidden));
        layers.push(LayerSpec::point(self.head_hidden, self.head.channels()));
        layers
    }

    /// Number of trainable weights, without building the network.
    pub fn parameter_count(&self) -> usize {
        self.layers().iter().map(LayerSpec::parameter_count).sum()
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerSpec {
    cin: usize,
    cout: usize,
    k: usize,
}

impl LayerSpec {
    fn cube(cin: usize, cout: usize) -> Self {
        LayerSpec { cin, cout, k: 3 }
    }

    fn point(cin: usize, cout: usize) -> Self {
        LayerSpec { cin, cout, k: 1 }
    }

    fn kernel_shape(&self) -> Shape {
        Shape::new(self.cout * self.cin, self.k, self.k, self.k)
    }

    fn fan_in(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn parameter_count(&self) -> usize {
        self.cout * self.fan_in() + self.cout
    }
}

/// Whether dropout is sampled during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// A built network: config plus parameters in declaration order
/// (kernel then bias for each layer).
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: NetConfig,
    params: Vec<Grid>,
}

/// Handles produced by recording one forward pass on a graph.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub params: Vec<NodeId>,
    pub raw: NodeId,
}

impl Network {
    /// Builds a network with He-uniform kernels and zero biases.
    pub fn build(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::new();
        for layer in config.layers() {
            let limit = (6.0 / layer.fan_in() as f64).sqrt() as f32;
            let shape = layer.kernel_shape();
            let data = (0..shape.len())
                .map(|_| rng.random_range(-limit..=limit))
                .collect();
            params.push(Grid::from_vec(shape, data)?);
            params.push(Grid::zeros(Shape::new(layer.cout, 1, 1, 1)));
        }
        Ok(Network { config, params })
    }

    /// Assembles a network from stored parameters.
    pub fn from_parameters(config: NetConfig, params: Vec<Grid>) -> Result<Self> {
        config.validate()?;
        let expected: Vec<Shape> = config
            .layers()
            .iter()
            .flat_map(|l| [l.kernel_shape(), Shape::new(l.cout, 1, 1, 1)])
            .collect();
        if expected.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "config needs {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (i, (shape, p)) in expected.iter().zip(&params).enumerate() {
            p.expect_shape(*shape, &format!("parameter {i}"))?;
        }
        Ok(Network { config, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Grid] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Grid] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Grid::len).sum()
    }

    /// Records a forward pass and returns the raw head output node.
    ///
    /// With `trainable` false the parameters enter as constants and the
    /// backward pass skips them.
    pub fn record(
        &self,
        g: &mut Graph,
        input: &Grid,
        mode: Mode,
        trainable: bool,
    ) -> Result<ForwardPass> {
        input.expect_shape(self.config.input_shape(), "network input")?;
        let params: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.variable(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect();
        let active = mode == Mode::Train;
        let cfg = &self.config;
        let mut next = params.chunks_exact(2);
        let mut conv = |g: &mut Graph, x: NodeId, relu: bool, padding: Padding| -> Result<NodeId> {
            let pair = next.next().expect("layer list matches parameter list");
            let y = g.conv3d(x, pair[0], pair[1], padding)?;
            Ok(if relu { g.relu(y)? } else { y })
        };

        let mut x = g.constant(input.clone());
        let mut skips = Vec::with_capacity(cfg.depth);
        for &rate in &cfg.dropout {
            x = conv(g, x, true, Padding::Same)?;
            x = conv(g, x, true, Padding::Same)?;
            x = g.dropout(x, rate, active)?;
            skips.push(x);
            x = g.maxpool3d(x, 2)?;
        }
        x = conv(g, x, true, Padding::Same)?;
        x = conv(g, x, true, Padding::Same)?;
        x = g.dropout(x, cfg.bottleneck_dropout, active)?;
        for &rate in cfg.dropout.iter().rev() {
            let skip = skips.pop().expect("one skip per level");
            x = g.upsample_concat(x, skip)?;
            x = conv(g, x, true, Padding::Same)?;
            x = conv(g, x, true, Padding::Same)?;
            x = g.dropout(x, rate, active)?;
        }
        x = conv(g, x, true, Padding::Same)?;
        let raw = conv(g, x, false, Padding::Same)?;
        Ok(ForwardPass { params, raw })
    }

    fn require_head(&self, head: HeadKind) -> Result<()> {
        if self.config.head != head {
            return Err(Error::InvalidArgument(format!(
                "network has a {:?} head, {:?} needed",
                self.config.head, head
            )));
        }
        Ok(())
    }

    /// Evidential forward pass returning the constrained NIG field.
    pub fn forward(&self, input: &Grid, mode: Mode, seed: u64) -> Result<NigField> {
        self.require_head(HeadKind::Evidential)?;
        let mut g = Graph::new(seed);
        let pass = self.record(&mut g, input, mode, false)?;
        let nig = constrain_raw_nodes(&mut g, pass.raw)?;
        Ok(nig.field(&g))
    }

    /// Point-head forward pass returning the predicted dose logit.
    pub fn forward_point(&self, input: &Grid, mode: Mode, seed: u64) -> Result<Grid> {
        self.require_head(HeadKind::Point)?;
        let mut g = Graph::new(seed);
        let pass = self.record(&mut g, input, mode, false)?;
        let logit = point_logit_node(&mut g, pass.raw)?;
        Ok(g.value(logit).clone())
    }
}

/// Maps the point head's raw channel to a dose logit bounded below by the
/// zero-dose logit, like the evidential `gamma`.
pub fn point_logit_node(g: &mut Graph, raw: NodeId) -> Result<NodeId> {
    let sp = g.softplus(raw)?;
    Ok(g.shift(sp, GAMMA_FLOOR as f32)?)
}

/// Evidential head nodes for a recorded forward pass.
pub fn evidential_nodes(g: &mut Graph, pass: &ForwardPass) -> Result<NigNodes> {
    constrain_raw_nodes(g, pass.raw)
}
