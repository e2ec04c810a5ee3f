use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Samples (leading axis) with one label each.
///
/// Binary synthetic labels are `±1`; image labels are class ids `0..K`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub x: Tensor,
    pub y: Vec<f64>,
}

impl LabeledDataset {
    pub fn new(x: Tensor, y: Vec<f64>) -> Result<Self> {
        let rows = x.shape().first().copied().unwrap_or(0);
        if rows != y.len() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                lhs: x.shape().to_vec(),
                rhs: vec![y.len()],
            });
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Shape of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.x.shape()[1..]
    }

    pub fn sample_numel(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Class index per sample: `-1 → 0`, `+1 → 1`, otherwise the label itself.
    pub fn class_indices(&self) -> Result<Vec<usize>> {
        self.y.iter().map(|&v| class_index(v)).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

pub fn class_index(label: f64) -> Result<usize> {
    if label == -1.0 {
        Ok(0)
    } else if label >= 0.0 && label.fract() == 0.0 {
        Ok(label as usize)
    } else {
        Err(invalid("class_index", format!("label {label} is not -1 or a class id")))
    }
}
