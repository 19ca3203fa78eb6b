//! Dense-tensor kernel with reverse-mode gradients.
//!
//! Everything learned in this crate is expressed over [`Tensor`] values and
//! differentiated by recording primitive applications on a [`Tape`]. The
//! kernel is generic over the scalar type; the crate root pins the concrete
//! `f64` aliases used by the models.

mod optim;
mod params;
mod tape;

pub use optim::{Optimizer, OptimizerConfig, OptimizerMethod};
pub use params::{read_checkpoint, write_checkpoint, Binder, ParamStore};
pub use tape::{ElementwiseKind, Tape, VarId};

use num_traits::{Float, FromPrimitive};
use std::fmt;

/// Scalar type the kernel is generic over: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + fmt::Debug + fmt::Display + Default + std::iter::Sum + 'static
{
    /// Lossy conversion from `f64`, the type all configuration is stated in.
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 converts to any Scalar")
    }
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch: lhs={lhs:?}, rhs={rhs:?}")]
    ShapeMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("inner extents do not match for matmul: lhs={lhs:?}, rhs={rhs:?}")]
    MatmulMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("shape {shape:?} holds {expected} values but {got} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape extents must be positive, got {shape:?}")]
    EmptyExtent { shape: Vec<usize> },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("operation requires a rank-2 tensor, got shape {shape:?}")]
    NotMatrix { shape: Vec<usize> },
    #[error("width {width} must equal stride {stride} (non-overlapping windows)")]
    WindowStride { width: usize, stride: usize },
    #[error("width {w} not divisible by window stride {stride}")]
    WindowIndivisible { w: usize, stride: usize },
    #[error("kernel shape {kernel:?} incompatible with {rows} rows and width {width}")]
    KernelShape {
        kernel: Vec<usize>,
        rows: usize,
        width: usize,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("slice {start}..{end} out of bounds for extent {extent}")]
    SliceOutOfBounds {
        start: usize,
        end: usize,
        extent: usize,
    },
    #[error("token id {id} out of range for table with {rows} rows")]
    IndexOutOfRange { id: usize, rows: usize },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("routing requires at least one iteration")]
    NoIterations,
    #[error("checkpoint is malformed: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major tensor. `grad` is present exactly when the tensor is a
/// trainable parameter; it accumulates across backward passes until cleared.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Option<Vec<F>>,
}

impl<F: Scalar> Tensor<F> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::EmptyExtent { shape });
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::from_vec(shape, vec![F::zero(); n])
    }

    pub fn filled(shape: Vec<usize>, value: F) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::from_vec(shape, vec![value; n])
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![value],
            grad: None,
        }
    }

    /// 2-D tensor from row slices; rows must be equal length.
    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(TensorError::ShapeMismatch {
                lhs: vec![r, c],
                rhs: vec![r, rows.iter().map(|row| row.len()).max().unwrap_or(0)],
            });
        }
        Self::from_vec(vec![r, c], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> F {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    /// Turn this tensor into a trainable parameter with a zeroed accumulator.
    pub fn with_grad(mut self) -> Self {
        self.grad = Some(vec![F::zero(); self.data.len()]);
        self
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = F::zero());
        }
    }

    pub fn accumulate_grad(&mut self, delta: &[F]) {
        let g = self
            .grad
            .get_or_insert_with(|| vec![F::zero(); self.data.len()]);
        debug_assert_eq!(g.len(), delta.len());
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi = *gi + *di;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
            && self
                .grad
                .as_ref()
                .is_none_or(|g| g.iter().all(|v| v.is_finite()))
    }

    /// Euclidean norm of the whole tensor.
    pub fn norm(&self) -> F {
        self.data
            .iter()
            .map(|&v| v * v)
            .fold(F::zero(), |a, b| a + b)
            .sqrt()
    }
}

pub(crate) fn ensure_matrix<F: Scalar>(t: &Tensor<F>) -> Result<(usize, usize)> {
    if !t.is_matrix() {
        return Err(TensorError::NotMatrix {
            shape: t.shape().to_vec(),
        });
    }
    Ok((t.rows(), t.cols()))
}
