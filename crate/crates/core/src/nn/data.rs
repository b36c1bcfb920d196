use serde::{Deserialize, Serialize};

use super::NnError;

/// A labelled set of samples stored row-major: `inputs[i * sample_len..]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub sample_shape: Vec<usize>,
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn new(sample_shape: Vec<usize>, inputs: Vec<f64>, labels: Vec<usize>) -> Result<Self, NnError> {
        let sample_len: usize = sample_shape.iter().product();
        if sample_len == 0 || inputs.len() != sample_len * labels.len() {
            return Err(NnError::ShapeMismatch(format!(
                "{} input values for {} samples of shape {sample_shape:?}",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(Self { sample_shape, inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.inputs[i * n..(i + 1) * n]
    }

    /// Copy the listed samples into a contiguous batch.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut xs = Vec::with_capacity(indices.len() * self.sample_len());
        let mut ys = Vec::with_capacity(indices.len());
        for &i in indices {
            xs.extend_from_slice(self.sample(i));
            ys.push(self.labels[i]);
        }
        (xs, ys)
    }

    /// New split holding the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Split {
        let (inputs, labels) = self.gather(indices);
        Split { sample_shape: self.sample_shape.clone(), inputs, labels }
    }
}

/// Train / validation / test partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplits {
    pub train: Split,
    pub val: Split,
    pub test: Split,
}
