//! Deterministic CPU tensor kernels.
//!
//! Every output element is computed by exactly one worker using a fixed serial
//! accumulation order, so results are bitwise identical for any thread count.

mod activation;
mod bn;
mod conv;
mod pool;
mod tensor_io;

pub use activation::{activate, activate_scalar, activation_backward, mish, sigmoid, softplus};
pub use bn::{batchnorm_backward, batchnorm_forward, fold_batchnorm, BnParams, DEFAULT_EPSILON};
pub use conv::{conv2d_backward, conv2d_forward, ConvGeom};
pub use pool::{
    maxpool_backward, maxpool_forward, route_concat, route_group, shortcut_add, upsample_backward, upsample_forward,
};
pub use tensor_io::{read_ftsr, write_ftsr, TensorIoError};

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum OpError {
    #[error("expected {expected} input channels, found {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("incompatible shapes {a:?} and {b:?}")]
    ShapeConflict { a: Vec<usize>, b: Vec<usize> },
    #[error("negative variance in channel {channel}")]
    NegativeVariance { channel: usize },
    #[error("backward pass needs the forward cache of layer {layer}")]
    MissingCache { layer: usize },
    #[error("data length {len} does not match shape {shape:?}")]
    BadShape { shape: Vec<usize>, len: usize },
}

/// Dense row-major `f32` tensor. Images are `[channels, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, OpError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(OpError::BadShape { shape, len: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn chw(c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self, OpError> {
        Tensor::new(vec![c, h, w], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn dim(&self, from_end: usize) -> usize {
        let r = self.shape.len();
        if r >= from_end {
            self.shape[r - from_end]
        } else {
            1
        }
    }

    /// Channel count of a `[c, h, w]` tensor.
    pub fn c(&self) -> usize {
        self.dim(3)
    }

    pub fn h(&self) -> usize {
        self.dim(2)
    }

    pub fn w(&self) -> usize {
        self.dim(1)
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let hw = self.h() * self.w();
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h() + y) * self.w() + x]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}
