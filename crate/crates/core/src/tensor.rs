//! Dense row-major f64 tensors.
//!
//! `Tensor` is the universal value carrier: network parameters, image
//! volumes, deformation fields and every intermediate on the autodiff tape
//! are stored this way. Data is always 64-bit; the volumes in play are small
//! enough that precision wins over footprint, and gradient checking needs it.

use std::fmt;

use crate::rng::Rng;

/// Errors raised by tensor and tape operations.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Two operands whose shapes cannot be combined.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A single argument outside its documented domain.
    InvalidArgument(String),
    /// Non-finite values where finite ones are required.
    Numeric(String),
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            TensorError::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            TensorError::Numeric(msg) => write!(f, "numeric error: {msg}"),
        }
    }
}

impl std::error::Error for TensorError {}

pub type TensorResult<T> = Result<T, TensorError>;

/// Dense N-dimensional array of f64 in row-major order.
///
/// `requires_grad` and `grad` are only meaningful on leaf tensors
/// (parameters): the tape copies leaf values in at the start of a pass and
/// writes the accumulated gradient back into `grad` after `backward`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value])
    }

    pub fn from_slice(shape: &[usize], data: &[f64]) -> Self {
        Tensor::new(shape.to_vec(), data.to_vec())
    }

    /// i.i.d. normal entries scaled by `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| std * rng.normal()).collect();
        Tensor::new(shape.to_vec(), data)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn item(&self) -> f64 {
        assert!(
            self.is_scalar(),
            "item() on non-scalar tensor {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Row-major flat offset of a multi-index.
    pub fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, (&b, &d)) in self.shape.iter().zip(idx).enumerate() {
            debug_assert!(d < b, "index {d} out of bound {b} at axis {i}");
            off = off * b + d;
        }
        off
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Indices and values of the `k` largest entries of a vector.
///
/// Ties break toward the lowest index, so permuting equal values never
/// changes the selected set; the returned indices are sorted ascending.
pub fn topk(values: &[f64], k: usize) -> TensorResult<(Vec<usize>, Vec<f64>)> {
    let n = values.len();
    if k == 0 || k > n {
        return Err(TensorError::InvalidArgument(format!(
            "topk: k={k} outside 1..={n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut idx: Vec<usize> = order[..k].to_vec();
    idx.sort_unstable();
    let vals = idx.iter().map(|&i| values[i]).collect();
    Ok((idx, vals))
}
