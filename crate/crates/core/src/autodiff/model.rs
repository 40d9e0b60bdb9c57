use std::sync::Arc;

use super::params::ParamLayout;
use super::scalar::Scalar;
use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Inputs `[n, d]` with one integer label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    inputs: Tensor,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.shape().len() != 2 || inputs.rows() != labels.len() {
            return Err(Error::config(format!(
                "batch inputs {:?} do not match {} labels",
                inputs.shape(),
                labels.len()
            )));
        }
        Ok(Batch { inputs, labels })
    }

    /// Builds a batch from `(features, label)` pairs.
    pub fn from_pairs<'a, I>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a [f64], usize)>,
    {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (x, y) in pairs {
            rows.push(x);
            labels.push(y);
        }
        if rows.is_empty() {
            return Batch::new(Tensor::zeros(vec![0, 0]), labels);
        }
        Batch::new(Tensor::from_rows(&rows)?, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Single-example batch.
    pub fn example(&self, i: usize) -> Batch {
        Batch {
            inputs: Tensor::new(vec![1, self.dim()], self.inputs.row(i).to_vec())
                .expect("row of a valid tensor"),
            labels: vec![self.labels[i]],
        }
    }

    /// Rows at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Result<Batch> {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(Error::config(format!("row {i} out of range for a batch of {}", self.len())));
            }
            data.extend_from_slice(self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        Batch::new(Tensor::new(vec![idx.len(), d], data)?, labels)
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Batch) -> Result<Batch> {
        if self.is_empty() {
            return Ok(other.clone());
        }
        if other.is_empty() {
            return Ok(self.clone());
        }
        if self.dim() != other.dim() {
            return Err(Error::config(format!(
                "cannot concatenate batches of width {} and {}",
                self.dim(),
                other.dim()
            )));
        }
        let mut data = self.inputs.data().to_vec();
        data.extend_from_slice(other.inputs.data());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Batch::new(Tensor::new(vec![labels.len(), self.dim()], data)?, labels)
    }
}

/// A differentiable per-example loss `ℓ(x_i, θ)`.
pub trait Model: Sync {
    fn layout(&self) -> Arc<ParamLayout>;

    fn num_params(&self) -> usize {
        self.layout().len()
    }

    /// Records the per-example losses of `batch` on `tape`, reading the
    /// parameters from the flat node `params`. Returns a node of shape `[n]`.
    fn record_losses<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        params: NodeId,
        batch: &Batch,
    ) -> Result<NodeId>;
}
