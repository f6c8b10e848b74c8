//! Dense float tensors, a define-by-run gradient tape, the layers used by the
//! encoder, decoder and prior, and the Adam optimizer.

mod adam;
pub mod kernels;
mod nn;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use nn::{he_normal, Bound, Conv, ConvKind, Dense, ParamId, ParamStore, ResidualBlock};
pub use tape::{Gradients, Graph, StopLog, Var};

use crate::error::{Error, Result};

/// Softmax over axis 1 of a `[B, V, H, W]` tensor.
pub fn softmax_channels(logits: &Tensor) -> Result<Tensor> {
    logits.dims4("softmax_channels")?;
    Tensor::new(logits.shape().to_vec(), tape::softmax_axis1(logits))
}

/// Row-major `f32` array with an explicit shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f32) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..numel).map(&mut f).collect(),
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Shape as `[B, C, H, W]`, failing for any other rank.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [b, c, h, w] => Ok([b, c, h, w]),
            _ => Err(Error::shape(op, format!("expected rank 4, got {:?}", self.shape))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Copies images `start..start + count` along the leading axis.
    pub fn slice_batch(&self, start: usize, count: usize) -> Result<Tensor> {
        let b = *self.shape.first().ok_or_else(|| Error::shape("slice_batch", "scalar"))?;
        if start + count > b {
            return Err(Error::shape(
                "slice_batch",
                format!("{}..{} out of {}", start, start + count, b),
            ));
        }
        let per = self.data.len() / b.max(1);
        let mut shape = self.shape.clone();
        shape[0] = count;
        Ok(Tensor {
            shape,
            data: self.data[start * per..(start + count) * per].to_vec(),
        })
    }

    /// Gathers the listed leading-axis entries into a new tensor.
    pub fn select_batch(&self, indices: &[usize]) -> Result<Tensor> {
        let b = *self.shape.first().ok_or_else(|| Error::shape("select_batch", "scalar"))?;
        let per = self.data.len() / b.max(1);
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            if i >= b {
                return Err(Error::shape("select_batch", format!("index {} out of {}", i, b)));
            }
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Tensor { shape, data })
    }

    pub fn clamp(mut self, lo: f32, hi: f32) -> Tensor {
        for v in &mut self.data {
            *v = v.clamp(lo, hi);
        }
        self
    }
}
