//! Dense f64 tensors with a dynamic reverse-mode gradient tape.
//!
//! Everything here is at most two-dimensional. Vectors have shape `[n]`,
//! matrices `[rows, cols]`, and scalars `[1]`. The [`Tape`] is rebuilt for
//! every forward pass; trainable values live in a [`ParamStore`] and are
//! pulled onto a tape with [`Tape::param`].

mod params;
mod tape;

pub use params::{load_checkpoint, read_checkpoint_header, save_checkpoint, Checkpoint, Optimizer, ParamStore, TensorRecord};
pub use tape::{Gradients, Tape, Var};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("index {index} out of range for {what} of size {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(TensorError::Shape {
        op,
        detail: detail.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(skip)]
    pub requires_grad: bool,
    #[serde(skip)]
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 2 || shape.iter().any(|&s| s == 0) {
            return shape_err("new", format!("unsupported shape {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(
                "new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            );
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(vec![1], vec![v]).expect("scalar shape")
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; n])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("from_rows", "ragged rows");
        }
        Self::matrix(rows.len(), cols, rows.concat())
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

    /// Row count, treating a vector as a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }
}
