//! Small dense building blocks shared by the heads and the second stage.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::weights::WeightStore;

/// Fully connected layer, `y = x W + b` with `W: in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weight.ncols() != bias.len() {
            return Err(Error::config(format!(
                "linear layer weight is {}x{} but bias has {} entries",
                weight.nrows(),
                weight.ncols(),
                bias.len()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Self { weight: Array2::zeros((in_features, out_features)), bias: Array1::zeros(out_features) }
    }

    pub fn in_features(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_features(&self) -> usize {
        self.weight.ncols()
    }

    /// Loads `{prefix}.weight` (`[in, out]`) and `{prefix}.bias` (`[out]`).
    pub fn from_store(ws: &WeightStore, prefix: &str, in_features: usize, out_features: usize) -> Result<Self> {
        let w = ws.get_shaped(&format!("{prefix}.weight"), &[in_features, out_features])?;
        let b = ws.get_shaped(&format!("{prefix}.bias"), &[out_features])?;
        let weight = Array2::from_shape_vec((in_features, out_features), w.to_f64())
            .map_err(|e| Error::internal(e.to_string()))?;
        Linear::new(weight, Array1::from(b.to_f64()))
    }

    pub fn forward_row(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.in_features() {
            return Err(Error::config(format!(
                "linear layer expects {} inputs, got {}",
                self.in_features(),
                x.len()
            )));
        }
        Ok(x.dot(&self.weight) + &self.bias)
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.in_features() {
            return Err(Error::config(format!(
                "linear layer expects {} inputs, got {}",
                self.in_features(),
                x.ncols()
            )));
        }
        Ok(x.dot(&self.weight) + &self.bias)
    }
}

pub fn relu_inplace(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable softmax of one row.
pub fn softmax(row: ArrayView1<f64>) -> Array1<f64> {
    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = row.mapv(|v| (v - m).exp());
    let s = e.sum();
    e / s
}

pub fn softmax_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    for (mut o, r) in out.axis_iter_mut(Axis(0)).zip(x.axis_iter(Axis(0))) {
        o.assign(&softmax(r));
    }
    out
}

/// Index of the maximum entry; ties go to the lowest index.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_is_shift_invariant_and_normalized() {
        let a = softmax(array![1.0, 2.0, 3.0].view());
        let b = softmax(array![101.0, 102.0, 103.0].view());
        assert!((a.sum() - 1.0).abs() < 1e-12);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_prefers_lowest_on_tie() {
        assert_eq!(argmax(array![0.2, 0.4, 0.4].view()), 1);
        assert_eq!(argmax(array![0.0, 0.0].view()), 0);
    }

    #[test]
    fn linear_shape_errors() {
        let l = Linear::zeros(3, 2);
        assert!(l.forward_row(array![1.0, 2.0].view()).is_err());
        assert!(Linear::new(Array2::zeros((3, 2)), Array1::zeros(3)).is_err());
    }
}
