//! Dense float tensors and a minimal reverse-mode autodiff engine.
//!
//! [`Tensor`] is a plain value: a shape plus a contiguous `f32` buffer.
//! Differentiation happens through [`Graph`], a per-forward-pass tape whose
//! nodes hold op results; see the [`graph`] module. All computation runs on
//! the CPU in 32-bit floats, with reductions accumulating in 64-bit.

mod conv;
mod graph;
mod optim;

pub use graph::{Graph, Op, PadMode, Var};
pub use optim::{AmsGradConfig, AmsGradState};

use crate::error::{Error, Result};

/// A dense tensor of `f32` values.
///
/// Shapes follow the NCHW convention for image data. A scalar is a tensor
/// with an empty shape and a single element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                expected: shape.clone(),
                got: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(Error::invalid(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Interpret the shape as `(n, c, h, w)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::ShapeMismatch {
                op: "dims4",
                expected: vec![0, 0, 0, 0],
                got: self.shape.clone(),
            }),
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Mean of all elements, accumulated in f64.
    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&x| f64::from(x)).sum::<f64>() / self.data.len() as f64
    }

    /// Mean absolute difference against another tensor of the same shape.
    pub fn l1_distance(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "l1_distance",
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f64::from((a - b).abs()))
            .sum();
        Ok(sum / self.data.len().max(1) as f64)
    }

    /// Stack `[C,H,W]` items into one `[N,C,H,W]` batch.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for item in items {
            if item.shape != first.shape {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    expected: first.shape.clone(),
                    got: item.shape.clone(),
                });
            }
            data.extend_from_slice(&item.data);
        }
        let mut shape = Vec::with_capacity(first.shape.len() + 1);
        shape.push(items.len());
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }

    /// Split a `[N,...]` batch back into `N` items of the remaining shape.
    pub fn unstack(&self) -> Result<Vec<Tensor>> {
        let n = *self
            .shape
            .first()
            .ok_or_else(|| Error::invalid("unstack of scalar"))?;
        let item_shape: Vec<usize> = self.shape[1..].to_vec();
        let stride: usize = item_shape.iter().product();
        Ok((0..n)
            .map(|i| Tensor {
                shape: item_shape.clone(),
                data: self.data[i * stride..(i + 1) * stride].to_vec(),
            })
            .collect())
    }
}
