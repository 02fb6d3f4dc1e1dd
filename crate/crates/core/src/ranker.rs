//! History summarization, click prediction and the training loss.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};
use crate::time_sequence::{transformer_block, BlockParams};

/// `W1: 5d x 2d`, `b1: [2d]`, `W2: 2d x 1`, `b2: [1]`.
#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub struct Summary {
    /// `n x d`, one row per stacked sequence.
    pub p: Var,
    /// Attention of the first summarizer block, `[sequence][head]`.
    pub first_block_weights: Vec<Vec<Var>>,
}

/// Two stacked Transformer blocks over `n` sequences of `seq_len` rows,
/// then the mean over each sequence.
pub fn summarize_history(g: &mut Graph, e: Var, seq_len: usize, blocks: &[BlockParams; 2], heads: usize, dropout: f64) -> Result<Summary> {
    if g.shape(e).len() != 2 || g.shape(e)[0] == 0 {
        return Err(Error::dim("summarize_history", format!("empty or malformed history {:?}", g.shape(e))));
    }
    let first = transformer_block(g, e, seq_len, heads, &blocks[0], dropout)?;
    let second = transformer_block(g, first.out, seq_len, heads, &blocks[1], dropout)?;
    let p = g.mean_row_groups(second.out, seq_len)?;
    Ok(Summary {
        p,
        first_block_weights: first.weights,
    })
}

/// `relu([p, x*, u] W1 + b1) W2 + b2` for each of `n` stacked rows of `p`
/// and `x_cand`; `user` is shared. Returns `n` raw logits.
pub fn predict_click(g: &mut Graph, p: Var, x_cand: Var, user: Var, head: &HeadParams) -> Result<Var> {
    let n = match g.shape(p) {
        [_] => 1,
        [n, _] => *n,
        other => return Err(Error::dim("predict_click", format!("p {other:?}"))),
    };
    let xn = match g.shape(x_cand) {
        [_] => 1,
        [r, _] => *r,
        other => return Err(Error::dim("predict_click", format!("x* {other:?}"))),
    };
    if xn != n {
        return Err(Error::dim("predict_click", format!("{n} summaries for {xn} candidates")));
    }
    let d = g.data(user).len();
    let width = g.data(p).len() / n + g.data(x_cand).len() / n + d;
    if g.shape(head.w1).first() != Some(&width) || width != 5 * d {
        return Err(Error::dim("predict_click", format!("[p, x*, u] has width {width}, W1 is {:?}", g.shape(head.w1))));
    }
    let u = if n == 1 { user } else { g.tile_rows(user, n)? };
    let z = g.concat_cols(&[p, x_cand, u])?;
    let h = g.matmul(z, head.w1)?;
    let h = g.add_row(h, head.b1)?;
    let h = g.relu(h)?;
    let y = g.matmul(h, head.w2)?;
    let y = g.add_row(y, head.b2)?;
    g.reshape(y, vec![n])
}

/// Summed binary cross-entropy of the logits (stable log-sigmoid form).
pub fn bce_loss(g: &mut Graph, logits: Var, labels: &[f64]) -> Result<Var> {
    g.bce_with_logits(logits, labels)
}

/// Rank of the positive among `scores` (1 = best). Ties are broken in
/// favour of the lower index.
pub fn rank_of(scores: &[f64], positive: usize) -> usize {
    let s = scores[positive];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < positive))
        .count()
}
