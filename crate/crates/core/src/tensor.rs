//! Dense row-major tensors of `f64`.

use thiserror::Error;

/// Errors raised by tensor construction and the differentiable kernels.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch on axis `{axis}`: expected {expected}, found {found}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{op}: expected rank {expected}, found rank {found}")]
    Rank {
        op: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("data length {data} does not match shape {shape:?}")]
    Length { shape: Vec<usize>, data: usize },
    #[error("shape {0:?} has a zero extent")]
    ZeroExtent(Vec<usize>),
    #[error("batchnorm in train mode needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("backward called on a tensor that was not recorded on this tape")]
    ForeignVar,
    #[error("backward needs a scalar loss, found shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A dense tensor with an optional gradient slot.
///
/// Feature maps use `(N, C, H, W)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::ZeroExtent(shape));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::Length {
                shape,
                data: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(TensorError::Length {
                shape: self.shape.clone(),
                data: grad.len(),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element at `(n, c, h, w)` of a rank-4 tensor.
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        let [_, cc, hh, ww] = dims4(&self.shape);
        self.data[((n * cc + c) * hh + h) * ww + w]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(TensorError::Length {
                shape,
                data: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }
}

pub(crate) fn dims4(shape: &[usize]) -> [usize; 4] {
    [shape[0], shape[1], shape[2], shape[3]]
}

pub(crate) fn expect_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(TensorError::Rank {
            op,
            expected: rank,
            found: shape.len(),
        });
    }
    Ok(())
}
