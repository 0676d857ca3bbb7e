use std::fmt;

use super::TensorError;

/// Extents of a rank-4 grid: channels, depth, height, width.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(channels: usize, depth: usize, height: usize, width: usize) -> Self {
        Shape([channels, depth, height, width])
    }

    pub const fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }

    pub fn channels(&self) -> usize {
        self.0[0]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.0[1], self.0[2], self.0[3]]
    }

    /// Voxels per channel.
    pub fn plane(&self) -> usize {
        self.0[1] * self.0[2] * self.0[3]
    }

    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_channels(&self, channels: usize) -> Self {
        Shape([channels, self.0[1], self.0[2], self.0[3]])
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [c, d, h, w] = self.0;
        write!(f, "{c}x{d}x{h}x{w}")
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Dense row-major `channels x depth x height x width` array of `f32`.
#[derive(Clone, PartialEq)]
pub struct Grid {
    shape: Shape,
    data: Vec<f32>,
}

impl Grid {
    pub fn zeros(shape: Shape) -> Self {
        Grid {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Grid {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Grid::full(Shape::scalar(), value)
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self, TensorError> {
        if data.len() != shape.len() {
            return Err(TensorError::Shape(format!(
                "grid of shape {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Grid { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> f32) -> Self {
        let [c, d, h, w] = shape.0;
        let mut data = Vec::with_capacity(shape.len());
        for ci in 0..c {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([ci, z, y, x]));
                    }
                }
            }
        }
        Grid { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn index(&self, at: [usize; 4]) -> usize {
        let [_, d, h, w] = self.shape.0;
        ((at[0] * d + at[1]) * h + at[2]) * w + at[3]
    }

    pub fn get(&self, at: [usize; 4]) -> f32 {
        self.data[self.index(at)]
    }

    pub fn set(&mut self, at: [usize; 4], value: f32) {
        let i = self.index(at);
        self.data[i] = value;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.shape.plane();
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let plane = self.shape.plane();
        &mut self.data[c * plane..(c + 1) * plane]
    }

    /// Copies channel `c` into a single-channel grid.
    pub fn extract_channel(&self, c: usize) -> Grid {
        Grid {
            shape: self.shape.with_channels(1),
            data: self.channel(c).to_vec(),
        }
    }

    /// Stacks grids of equal spatial extent along the channel axis.
    pub fn stack_channels(parts: &[&Grid]) -> Result<Grid, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Shape("cannot stack zero grids".into()))?;
        let spatial = first.shape.spatial();
        let mut channels = 0;
        for p in parts {
            if p.shape.spatial() != spatial {
                return Err(TensorError::Shape(format!(
                    "cannot stack {} with {}",
                    first.shape, p.shape
                )));
            }
            channels += p.shape.channels();
        }
        let mut data = Vec::with_capacity(channels * first.shape.plane());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Grid {
            shape: first.shape.with_channels(channels),
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Grid {
        Grid {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Grid, f: impl Fn(f32, f32) -> f32) -> Result<Grid, TensorError> {
        self.expect_shape(other.shape, "zip_map")?;
        Ok(Grid {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_shape(&self, shape: Shape, context: &str) -> Result<(), TensorError> {
        if self.shape != shape {
            return Err(TensorError::Shape(format!(
                "{context}: expected shape {shape}, got {}",
                self.shape
            )));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum with 64-bit accumulation.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Grid({}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, ", {:?}", self.data)?;
        }
        write!(f, ")")
    }
}
