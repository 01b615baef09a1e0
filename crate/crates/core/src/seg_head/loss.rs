use ndarray::{Array2, ArrayView2};

use super::decoder::MaskLogits;
use crate::error::{Error, Result};
use crate::nn::sigmoid;
use crate::Scalar;

const PROB_CLAMP: f64 = 1e-7;

/// Binary ground-truth mask, entries in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthMask {
    values: Array2<u8>,
}

impl GroundTruthMask {
    pub fn new(values: Array2<u8>) -> Result<Self> {
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::Contract(format!("mask value {v} is not binary")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> ArrayView2<'_, u8> {
        self.values.view()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn area(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            values: self.values.mapv(|v| 1 - v),
        }
    }

    pub fn into_inner(self) -> Array2<u8> {
        self.values
    }
}

/// Mean per-pixel binary cross-entropy with probabilities clamped to
/// `[1e-7, 1 - 1e-7]`. Terms are summed in `f64` whatever `T` is.
pub fn bce_loss<T: Scalar>(m: &MaskLogits<T>, y: &GroundTruthMask) -> Result<T> {
    if m.values.dim() != y.shape() {
        return Err(Error::Shape(format!(
            "logits {:?} vs mask {:?}",
            m.values.dim(),
            y.shape()
        )));
    }
    let lo = T::of(PROB_CLAMP);
    let hi = T::one() - lo;
    let total = m
        .values
        .iter()
        .zip(y.values.iter())
        .map(|(&logit, &label)| {
            let p = sigmoid(logit).max(lo).min(hi);
            if label == 1 {
                -p.ln()
            } else {
                -(T::one() - p).ln()
            }
            .as_f64()
        })
        .sum::<f64>();
    Ok(T::of(total / m.values.len() as f64))
}

/// `dL/dm = (σ(m) − y) / N`, the derivative of the unclamped objective.
pub fn bce_loss_grad<T: Scalar>(m: &MaskLogits<T>, y: &GroundTruthMask) -> Result<Array2<T>> {
    if m.values.dim() != y.shape() {
        return Err(Error::Shape(format!(
            "logits {:?} vs mask {:?}",
            m.values.dim(),
            y.shape()
        )));
    }
    let n = T::of(m.values.len() as f64);
    Ok(ndarray::Zip::from(&m.values)
        .and(&y.values)
        .map_collect(|&logit, &label| (sigmoid(logit) - T::of(label as f64)) / n))
}
