//! Scaled dot-product attention shared by every level of the model.

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

/// Logit assigned to masked key columns before the softmax.
pub const MASKED_LOGIT: f64 = -1e9;

pub struct Attended {
    pub out: Var,
    /// Row-stochastic weights, captured before dropout.
    pub weights: Var,
}

/// `softmax(q k^T * scale + mask) v`, with dropout on the weights.
///
/// `masked[j] == true` removes key column `j`.
pub fn attend(g: &mut Graph, q: Var, k: Var, v: Var, scale: f64, masked: Option<&[bool]>, dropout: f64) -> Result<Attended> {
    let raw = g.matmul_nt(q, k)?;
    let mut logits = g.scale(raw, scale)?;
    if let Some(mask) = masked.filter(|m| m.iter().any(|&x| x)) {
        let rows = g.shape(logits)[0];
        let cols = mask.len();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for (c, &m) in mask.iter().enumerate() {
                if m {
                    data[r * cols + c] = MASKED_LOGIT;
                }
            }
        }
        let m = g.constant(Tensor::matrix(rows, cols, data)?);
        logits = g.add(logits, m)?;
    }
    let weights = g.softmax_rows(logits)?;
    let dropped = g.dropout(weights, dropout)?;
    let out = g.matmul(dropped, v)?;
    Ok(Attended { out, weights })
}
