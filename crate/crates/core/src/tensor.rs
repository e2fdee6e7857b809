//! Dense `(T, B, C, H, W)` tensors in double precision.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::NormalStream;

/// Extents of a 5-D tensor: timesteps, batch, channels, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape5 {
    pub t: usize,
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape5 {
    pub const fn new(t: usize, b: usize, c: usize, h: usize, w: usize) -> Self {
        Self { t, b, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.t * self.b * self.c * self.h * self.w
    }

    pub fn dims(&self) -> [usize; 5] {
        [self.t, self.b, self.c, self.h, self.w]
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims().contains(&0) {
            return Err(Error::Shape(format!("zero-sized axis in {self}")));
        }
        Ok(())
    }

    /// Row-major flat offset of `(t, b, c, h, w)`.
    #[inline]
    pub fn offset(&self, t: usize, b: usize, c: usize, h: usize, w: usize) -> usize {
        (((t * self.b + b) * self.c + c) * self.h + h) * self.w + w
    }

    pub fn unravel(&self, mut i: usize) -> [usize; 5] {
        let w = i % self.w;
        i /= self.w;
        let h = i % self.h;
        i /= self.h;
        let c = i % self.c;
        i /= self.c;
        let b = i % self.b;
        [i / self.b, b, c, h, w]
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements in one `(t, b)` sample slice.
    pub fn chw(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Elements in one timestep slice.
    pub fn step(&self) -> usize {
        self.b * self.c * self.h * self.w
    }

    pub fn with_channels(&self, c: usize) -> Self {
        Self { c, ..*self }
    }
}

impl fmt::Display for Shape5 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {}, {})", self.t, self.b, self.c, self.h, self.w)
    }
}

impl From<[usize; 5]> for Shape5 {
    fn from(d: [usize; 5]) -> Self {
        Shape5::new(d[0], d[1], d[2], d[3], d[4])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor5 {
    shape: Shape5,
    data: Vec<f64>,
}

impl Tensor5 {
    pub fn zeros(shape: Shape5) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn full(shape: Shape5, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape5, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Dimension(format!(
                "{} values supplied for shape {shape}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// I.i.d. standard normal entries from the seeded stream.
    pub fn randn(shape: Shape5, seed: u64) -> Result<Self> {
        Self::randn_from(shape, &mut NormalStream::new(seed))
    }

    pub fn randn_from(shape: Shape5, stream: &mut NormalStream) -> Result<Self> {
        shape.validate()?;
        let mut t = Self::zeros(shape);
        stream.fill_normal(&mut t.data);
        Ok(t)
    }

    pub fn one_hot(shape: Shape5, index: usize) -> Self {
        let mut t = Self::zeros(shape);
        t.data[index] = 1.0;
        t
    }

    pub fn shape(&self) -> Shape5 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, t: usize, b: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.offset(t, b, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, t: usize, b: usize, c: usize, h: usize, w: usize, v: f64) {
        let i = self.shape.offset(t, b, c, h, w);
        self.data[i] = v;
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor5) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor5) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor5) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &Tensor5) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor5 {
        Tensor5 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copy of timestep `t` as a `(1, B, C, H, W)` tensor.
    pub fn timestep(&self, t: usize) -> Tensor5 {
        let step = self.shape.step();
        Tensor5 {
            shape: Shape5 { t: 1, ..self.shape },
            data: self.data[t * step..(t + 1) * step].to_vec(),
        }
    }

    pub fn require_shape(&self, shape: Shape5, what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::Dimension(format!(
                "{what}: expected shape {shape}, got {}",
                self.shape
            )));
        }
        Ok(())
    }
}
