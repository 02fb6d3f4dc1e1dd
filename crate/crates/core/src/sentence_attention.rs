//! Sentence-level self-attention over `[u; sentences; candidate]`.
//!
//! The stacked block `S` has `K + 2` rows: the user embedding, the `K`
//! (zero-padded) sentence vectors of one history article, and the
//! candidate's content vector. Weights are
//! `softmax((S W1)(W2 S^T) / sqrt(d))` with padded sentence columns masked,
//! and the output is `weights * (S W3)`. No biases.

use crate::attention::attend;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub struct SentenceBlockInput {
    /// `[d]`
    pub user: Var,
    /// `K x d`, padded rows zero.
    pub sentences: Var,
    /// `[d]`
    pub candidate: Var,
    /// `K` flags; `true` marks a padding sentence.
    pub pad_mask: Vec<bool>,
}

/// `W1`, `W2`, `W3`, each `d x d`.
#[derive(Debug, Clone, Copy)]
pub struct SentenceParams {
    pub w1: Var,
    pub w2: Var,
    pub w3: Var,
}

/// The `K + 2` column mask: user and candidate are never masked.
pub fn block_mask(pad_mask: &[bool]) -> Vec<bool> {
    let mut m = Vec::with_capacity(pad_mask.len() + 2);
    m.push(false);
    m.extend_from_slice(pad_mask);
    m.push(false);
    m
}

/// Returns `(attended (K+2) x d, weights (K+2) x (K+2))`.
pub fn sentence_attend(g: &mut Graph, input: &SentenceBlockInput, params: &SentenceParams) -> Result<(Var, Var)> {
    let (k, d) = match g.shape(input.sentences) {
        [k, d] => (*k, *d),
        other => return Err(Error::dim("sentence_attend", format!("sentences {other:?}"))),
    };
    if input.pad_mask.len() != k {
        return Err(Error::dim("sentence_attend", format!("{} mask flags for {k} sentences", input.pad_mask.len())));
    }
    for (what, v) in [("user", input.user), ("candidate", input.candidate)] {
        if g.data(v).len() != d {
            return Err(Error::dim("sentence_attend", format!("{what} {:?} vs d = {d}", g.shape(v))));
        }
    }
    for w in [params.w1, params.w2, params.w3] {
        if g.shape(w) != [d, d] {
            return Err(Error::dim("sentence_attend", format!("weight {:?} vs d = {d}", g.shape(w))));
        }
    }
    let s = g.stack_rows(&[input.user, input.sentences, input.candidate])?;
    let q = g.matmul(s, params.w1)?;
    // (W2 S^T)^T = S W2^T
    let kt = g.matmul_nt(s, params.w2)?;
    let v = g.matmul(s, params.w3)?;
    let mask = block_mask(&input.pad_mask);
    let a = attend(g, q, kt, v, 1.0 / (d as f64).sqrt(), Some(&mask), 0.0)?;
    Ok((a.out, a.weights))
}

/// Mean over the unmasked rows of the attended block (user and candidate
/// rows included).
pub fn pool_news_content(g: &mut Graph, attended: Var, pad_mask: &[bool]) -> Result<Var> {
    let rows = g.shape(attended)[0];
    if rows != pad_mask.len() + 2 {
        return Err(Error::dim("pool_news_content", format!("{rows} rows for {} mask flags", pad_mask.len())));
    }
    let keep: Vec<usize> = block_mask(pad_mask)
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| (!m).then_some(i))
        .collect();
    let picked = if keep.len() == rows { attended } else { g.select_rows(attended, &keep)? };
    g.mean_axis(picked, 0)
}

/// Expands weights computed on the unpadded block `[u; real sentences; c*]`
/// to the full `(K+2) x (K+2)` matrix the padded block would produce:
/// padded columns get zero, and a padded (all-zero) row has zero logits, so
/// it spreads uniformly over the unmasked columns.
pub fn expand_weights(compact: &Tensor, pad_mask: &[bool]) -> Result<Tensor> {
    let mask = block_mask(pad_mask);
    let full = mask.len();
    let kept: Vec<usize> = (0..full).filter(|&i| !mask[i]).collect();
    if compact.shape() != [kept.len(), kept.len()] {
        return Err(Error::dim(
            "expand_weights",
            format!("{:?} for {} unmasked rows", compact.shape(), kept.len()),
        ));
    }
    let uniform = 1.0 / kept.len() as f64;
    let mut out = vec![0.0; full * full];
    let mut compact_row = 0;
    for (i, &mi) in mask.iter().enumerate() {
        if mi {
            for &j in &kept {
                out[i * full + j] = uniform;
            }
        } else {
            for (cj, &j) in kept.iter().enumerate() {
                out[i * full + j] = compact.get(compact_row, cj);
            }
            compact_row += 1;
        }
    }
    Tensor::matrix(full, full, out)
}
