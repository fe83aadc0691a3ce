//! Dense row-major 2-D tensors of 64-bit floats.

use crate::error::{Error, Result};
use crate::grad::tape::NodeId;
use crate::rng::SplitMix64;

/// A dense rows x cols matrix. Column vectors are `n x 1`, scalars `1 x 1`.
///
/// A tensor optionally carries the id of the tape node that produced it;
/// tensors without a node are plain immutable values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    pub(crate) node: Option<NodeId>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Input(format!(
                "tensor data length {} does not match shape {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Self {
            rows,
            cols,
            data,
            node: None,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            node: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
            node: None,
        }
    }

    /// Column vector from a slice.
    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
            node: None,
        }
    }

    /// Entries i.i.d. uniform in [-scale, scale] from the given stream.
    pub fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut SplitMix64) -> Self {
        let data = (0..rows * cols).map(|_| rng.uniform(-scale, scale)).collect();
        Self {
            rows,
            cols,
            data,
            node: None,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    /// Whether this is a row or column vector (scalars included).
    pub fn is_vector(&self) -> bool {
        self.rows == 1 || self.cols == 1
    }

    /// Value of a 1x1 tensor.
    pub fn value(&self) -> f64 {
        debug_assert!(self.is_scalar(), "value() on a {}x{} tensor", self.rows, self.cols);
        self.data[0]
    }

    /// The tape node that produced this tensor, if it is tracked.
    pub fn node_id(&self) -> Option<NodeId> {
        self.node
    }

    /// Untracked copy of this tensor.
    pub fn detach(&self) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.clone(),
            node: None,
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }
}
