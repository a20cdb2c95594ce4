use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Keys and values of one attention layer, `n x d` each.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionFeatures {
    pub keys: DMatrix<f64>,
    pub values: DMatrix<f64>,
}

impl AttentionFeatures {
    pub fn new(keys: DMatrix<f64>, values: DMatrix<f64>) -> Result<Self> {
        if keys.nrows() != values.nrows() || keys.ncols() != values.ncols() {
            return Err(Error::invalid(format!(
                "keys {}x{} and values {}x{} differ in shape",
                keys.nrows(),
                keys.ncols(),
                values.nrows(),
                values.ncols()
            )));
        }
        if keys.nrows() == 0 {
            return Err(Error::invalid("attention needs at least one key"));
        }
        Ok(Self { keys, values })
    }

    pub fn width(&self) -> usize {
        self.keys.ncols()
    }
}

/// Row-wise `softmax(Q K^T / sqrt(d)) V`.
pub fn attention(queries: &DMatrix<f64>, feats: &AttentionFeatures) -> Result<DMatrix<f64>> {
    let d = feats.width();
    if queries.ncols() != d {
        return Err(Error::invalid(format!(
            "query width {} does not match key width {d}",
            queries.ncols()
        )));
    }
    let mut logits = queries * feats.keys.transpose() / (d as f64).sqrt();
    for mut row in logits.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    Ok(logits * &feats.values)
}
