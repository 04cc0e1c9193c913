//! Dense tensors and the reverse-mode differentiation tape.
//!
//! [`Tensor`] is a plain value: a shape plus a flat row-major `f64` buffer.
//! All differentiable computation happens through a [`Tape`], which records
//! every operation and replays it in exact reverse order on
//! [`Tape::backward`]. Tapes are rebuilt from scratch each forward pass
//! (define-by-run), which keeps ragged, data-dependent graph shapes simple.
//!
//! Broadcasting follows trailing-axis alignment: shapes are right-aligned
//! and an axis of size 1 stretches to match its partner. No other implicit
//! shape adjustment happens anywhere in the engine.

mod tape;

pub use tape::{Tape, TensorId};

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

/// Dense n-dimensional value, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and flat data; the lengths must agree.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidData {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Identity matrix of side `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a scalar (or single-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Returns the same data under a new shape of equal element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(TensorError::InvalidData {
                shape,
                len: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn iter(&self) -> core::slice::Iter<'_, f64> {
        self.data.iter()
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.ndim(), 2);
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Errors raised by tensor construction and tape operations.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorError {
    /// Flat data length does not match the requested shape.
    InvalidData { shape: Vec<usize>, len: usize },
    /// Two operand shapes are incompatible for the named operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Axis index outside the tensor rank.
    InvalidAxis { axis: usize, ndim: usize },
    /// Gather/scatter index outside the token range.
    IndexOutOfRange { index: usize, len: usize },
    /// Scatter received the same target row twice.
    DuplicateScatterIndex { index: usize },
    /// `backward` requires a single-element loss.
    NonScalarLoss { shape: Vec<usize> },
    /// `backward` was called twice on the same tape.
    BackwardAlreadyRun,
    /// An operation that requires finite input saw NaN or infinity.
    NonFiniteInput { op: &'static str },
    /// A sequence operation received zero time steps.
    EmptySequence { op: &'static str },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::InvalidData { shape, len } => {
                write!(f, "shape {shape:?} does not match data length {len}")
            }
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            TensorError::InvalidAxis { axis, ndim } => {
                write!(f, "axis {axis} out of range for rank {ndim}")
            }
            TensorError::IndexOutOfRange { index, len } => {
                write!(f, "index {index} out of range for length {len}")
            }
            TensorError::DuplicateScatterIndex { index } => {
                write!(f, "scatter target row {index} appears more than once")
            }
            TensorError::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            TensorError::BackwardAlreadyRun => {
                write!(f, "backward already ran on this tape; build a new tape")
            }
            TensorError::NonFiniteInput { op } => {
                write!(f, "{op}: input contains NaN or infinity")
            }
            TensorError::EmptySequence { op } => {
                write!(f, "{op}: sequence length must be at least 1")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for TensorError {}

/// Result of right-aligned broadcasting, or `None` when incompatible.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let da = dim_from_right(a, ndim - 1 - i);
        let db = dim_from_right(b, ndim - 1 - i);
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return None;
        };
    }
    Some(out)
}

fn dim_from_right(shape: &[usize], from_right: usize) -> usize {
    if from_right < shape.len() {
        shape[shape.len() - 1 - from_right]
    } else {
        1
    }
}

/// Row-major strides with 0 on axes the operand broadcasts over.
pub(crate) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let ndim = out_shape.len();
    let mut strides = vec![0usize; ndim];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[ndim - shape.len() + i] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// Walks a broadcast output shape in flat order, yielding the flat offset
/// into an operand laid out with the given broadcast strides.
pub(crate) struct StrideWalker<'a> {
    out_shape: &'a [usize],
    strides: Vec<usize>,
    coords: Vec<usize>,
    offset: usize,
}

impl<'a> StrideWalker<'a> {
    pub fn new(out_shape: &'a [usize], strides: Vec<usize>) -> Self {
        Self {
            coords: vec![0; out_shape.len()],
            out_shape,
            strides,
            offset: 0,
        }
    }

    #[inline]
    pub fn offset(&self) -> usize {
        self.offset
    }

    /// Odometer step to the next flat position.
    #[inline]
    pub fn advance(&mut self) {
        for axis in (0..self.out_shape.len()).rev() {
            self.coords[axis] += 1;
            self.offset += self.strides[axis];
            if self.coords[axis] < self.out_shape[axis] {
                return;
            }
            self.offset -= self.strides[axis] * self.out_shape[axis];
            self.coords[axis] = 0;
        }
    }
}
