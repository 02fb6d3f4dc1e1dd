//! Time fusion and the time-aware Transformer block.
//!
//! Each history article is represented by `x' = [content, element, id]`
//! (`3d`). Time enters by concatenation, then `[z_i, z*, u] W_c` maps every
//! position to `d`, and a Transformer block without positional encodings
//! mixes the positions.

use std::fmt;
use std::str::FromStr;

use crate::attention::attend;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TimeMode {
    Relative,
    Absolute,
    Both,
    None,
}

impl TimeMode {
    pub const ALL: [TimeMode; 4] = [TimeMode::Both, TimeMode::Relative, TimeMode::Absolute, TimeMode::None];

    pub fn uses_relative(self) -> bool {
        matches!(self, TimeMode::Relative | TimeMode::Both)
    }

    pub fn uses_absolute(self) -> bool {
        matches!(self, TimeMode::Absolute | TimeMode::Both)
    }

    /// Width of each fused history row.
    pub fn dim_z(self, d: usize) -> usize {
        match self {
            TimeMode::Relative => 7 * d,
            TimeMode::Absolute => 4 * d,
            TimeMode::Both => 5 * d,
            TimeMode::None => 3 * d,
        }
    }

    /// Width of the fused candidate vector.
    pub fn dim_z_cand(self, d: usize) -> usize {
        if self.uses_absolute() {
            4 * d
        } else {
            3 * d
        }
    }

    /// Rows of `W_c`.
    pub fn wc_rows(self, d: usize) -> usize {
        self.dim_z(d) + self.dim_z_cand(d) + d
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TimeMode::Relative => "relative",
            TimeMode::Absolute => "absolute",
            TimeMode::Both => "both",
            TimeMode::None => "none",
        }
    }
}

impl fmt::Display for TimeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TimeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relative" => Ok(TimeMode::Relative),
            "absolute" => Ok(TimeMode::Absolute),
            "both" => Ok(TimeMode::Both),
            "none" => Ok(TimeMode::None),
            other => Err(Error::Config(format!("unknown time mode `{other}` (expected both, relative, absolute or none)"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FusedSequence {
    /// `L x dim_z`
    pub z_seq: Var,
    /// `[dim_z*]`
    pub z_cand: Var,
    pub mode: TimeMode,
}

/// Concatenates time embeddings onto the news representations.
///
/// `abs_emb` is `(L+1) x d` (history clicks then the candidate), `rel_emb`
/// is `L x d`. Either may be `None` when the mode does not use it.
pub fn fuse_time(g: &mut Graph, x_seq: Var, abs_emb: Option<Var>, rel_emb: Option<Var>, x_cand: Var, mode: TimeMode) -> Result<FusedSequence> {
    let (l, w) = match g.shape(x_seq) {
        [l, w] if w % 3 == 0 && *l > 0 => (*l, *w),
        other => return Err(Error::dim("fuse_time", format!("x' sequence {other:?}"))),
    };
    let d = w / 3;
    if g.shape(x_cand) != [3 * d] {
        return Err(Error::dim("fuse_time", format!("candidate {:?} vs 3d = {}", g.shape(x_cand), 3 * d)));
    }
    let abs = if mode.uses_absolute() {
        let a = abs_emb.ok_or_else(|| Error::dim("fuse_time", "absolute embeddings required"))?;
        if g.shape(a) != [l + 1, d] {
            return Err(Error::dim("fuse_time", format!("absolute {:?} vs {}x{d}", g.shape(a), l + 1)));
        }
        Some(a)
    } else {
        None
    };
    let rel = if mode.uses_relative() {
        let r = rel_emb.ok_or_else(|| Error::dim("fuse_time", "relative embeddings required"))?;
        if g.shape(r) != [l, d] {
            return Err(Error::dim("fuse_time", format!("relative {:?} vs {l}x{d}", g.shape(r))));
        }
        Some(r)
    } else {
        None
    };

    let (z_seq, z_cand) = match mode {
        TimeMode::None => (x_seq, x_cand),
        TimeMode::Relative => {
            let tiled = g.tile_rows(x_cand, l)?;
            (g.concat_cols(&[x_seq, rel.unwrap(), tiled])?, x_cand)
        }
        TimeMode::Absolute | TimeMode::Both => {
            let a = abs.unwrap();
            let hist_abs = g.slice_rows(a, 0, l)?;
            let cand_abs = g.slice_rows(a, l, l + 1)?;
            let cand_abs = g.reshape(cand_abs, vec![d])?;
            let z = match rel {
                Some(r) => g.concat_cols(&[x_seq, hist_abs, r])?,
                None => g.concat_cols(&[x_seq, hist_abs])?,
            };
            (z, g.concat_cols(&[x_cand, cand_abs])?)
        }
    };
    Ok(FusedSequence { z_seq, z_cand, mode })
}

/// `[z_i, z*, u] W_c` for every row `z_i` of the fused sequence (`L x d`).
pub fn time_aware_transform(g: &mut Graph, fused: &FusedSequence, user: Var, wc: Var) -> Result<Var> {
    let (l, dz) = match g.shape(fused.z_seq) {
        [l, dz] => (*l, *dz),
        other => return Err(Error::dim("time_aware_transform", format!("z {other:?}"))),
    };
    let dzc = g.data(fused.z_cand).len();
    let d = g.data(user).len();
    let want = [fused.mode.dim_z(d), fused.mode.dim_z_cand(d)];
    if [dz, dzc] != want {
        return Err(Error::Config(format!(
            "fused widths ({dz}, {dzc}) do not match {} mode with d = {d} (expected {want:?})",
            fused.mode
        )));
    }
    if g.shape(wc) != [dz + dzc + d, d] {
        return Err(Error::Config(format!(
            "W_c is {:?}, {} mode needs {}x{d}",
            g.shape(wc),
            fused.mode,
            dz + dzc + d
        )));
    }
    let cand = g.concat_cols(&[fused.z_cand, user])?;
    let cand = g.tile_rows(cand, l)?;
    let full = g.concat_cols(&[fused.z_seq, cand])?;
    g.matmul(full, wc)
}

/// Parameters of one Transformer block. No biases.
#[derive(Debug, Clone, Copy)]
pub struct BlockParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    /// `d x d'`
    pub wa: Var,
    /// `d' x d`
    pub wb: Var,
    pub ln_gamma: Var,
    pub ln_beta: Var,
}

pub struct BlockOutput {
    /// Same shape as the input.
    pub out: Var,
    /// `weights[s][h]`: `L x L` attention of head `h` on sequence `s`.
    pub weights: Vec<Vec<Var>>,
}

/// Applies the block independently to `n` sequences of length `seq_len`
/// stacked into an `(n * seq_len) x d` matrix.
///
/// Attention splits `d` evenly across `heads` and concatenates head
/// outputs; then `x = relu(a W_a)` and `LN(dropout(x W_b) + a)`.
pub fn transformer_block(g: &mut Graph, t: Var, seq_len: usize, heads: usize, params: &BlockParams, dropout: f64) -> Result<BlockOutput> {
    let (rows, d) = match g.shape(t) {
        [r, d] => (*r, *d),
        other => return Err(Error::dim("transformer_block", format!("input {other:?}"))),
    };
    if seq_len == 0 || rows % seq_len != 0 || rows == 0 {
        return Err(Error::dim("transformer_block", format!("{rows} rows are not a multiple of sequence length {seq_len}")));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::dim("transformer_block", format!("d = {d} not divisible into {heads} heads")));
    }
    for w in [params.wq, params.wk, params.wv] {
        if g.shape(w) != [d, d] {
            return Err(Error::dim("transformer_block", format!("attention map {:?} vs d = {d}", g.shape(w))));
        }
    }
    let dff = g.shape(params.wa).get(1).copied().unwrap_or(0);
    if g.shape(params.wa) != [d, dff] || g.shape(params.wb) != [dff, d] {
        return Err(Error::dim(
            "transformer_block",
            format!("feed-forward {:?} / {:?} vs d = {d}", g.shape(params.wa), g.shape(params.wb)),
        ));
    }

    let q = g.matmul(t, params.wq)?;
    let k = g.matmul(t, params.wk)?;
    let v = g.matmul(t, params.wv)?;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let n = rows / seq_len;
    let mut outs = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for s in 0..n {
        let (lo, hi) = (s * seq_len, (s + 1) * seq_len);
        let (qs, ks, vs) = if n == 1 {
            (q, k, v)
        } else {
            (g.slice_rows(q, lo, hi)?, g.slice_rows(k, lo, hi)?, g.slice_rows(v, lo, hi)?)
        };
        let mut head_outs = Vec::with_capacity(heads);
        let mut head_weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (qs, ks, vs)
            } else {
                let (c0, c1) = (h * dh, (h + 1) * dh);
                (g.slice_cols(qs, c0, c1)?, g.slice_cols(ks, c0, c1)?, g.slice_cols(vs, c0, c1)?)
            };
            let a = attend(g, qh, kh, vh, scale, None, dropout)?;
            head_outs.push(a.out);
            head_weights.push(a.weights);
        }
        outs.push(if heads == 1 { head_outs[0] } else { g.concat_cols(&head_outs)? });
        weights.push(head_weights);
    }
    let a = if n == 1 { outs[0] } else { g.stack_rows(&outs)? };
    let hidden = g.matmul(a, params.wa)?;
    let hidden = g.relu(hidden)?;
    let ff = g.matmul(hidden, params.wb)?;
    let ff = g.dropout(ff, dropout)?;
    let res = g.add(ff, a)?;
    let out = g.layer_norm(res, params.ln_gamma, params.ln_beta, LAYER_NORM_EPS)?;
    Ok(BlockOutput { out, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::init_uniform;
    use crate::tensor::{grad_check, GradCheckOptions, ParamStore, Tensor};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block_store(s: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize, dff: usize) {
        for name in ["wq", "wk", "wv"] {
            s.insert(format!("{prefix}.{name}"), init_uniform(rng, d, d, 0.6), true).unwrap();
        }
        s.insert(format!("{prefix}.wa"), init_uniform(rng, d, dff, 0.6), true).unwrap();
        s.insert(format!("{prefix}.wb"), init_uniform(rng, dff, d, 0.6), true).unwrap();
        s.insert(format!("{prefix}.ln_gamma"), Tensor::full(&[d], 1.0), true).unwrap();
        s.insert(format!("{prefix}.ln_beta"), Tensor::zeros(&[d]), true).unwrap();
    }

    fn block_params(g: &mut Graph, prefix: &str) -> BlockParams {
        let mut p = |n: &str| g.param_named(&format!("{prefix}.{n}")).unwrap();
        BlockParams {
            wq: p("wq"),
            wk: p("wk"),
            wv: p("wv"),
            wa: p("wa"),
            wb: p("wb"),
            ln_gamma: p("ln_gamma"),
            ln_beta: p("ln_beta"),
        }
    }

    fn random(g: &mut Graph, rng: &mut ChaCha8Rng, r: usize, c: usize) -> Var {
        g.constant(init_uniform(rng, r, c, 1.0))
    }

    #[test]
    fn dimension_table() {
        let d = 64;
        let expect = [
            (TimeMode::Both, 320, 256),
            (TimeMode::Relative, 448, 192),
            (TimeMode::Absolute, 256, 256),
            (TimeMode::None, 192, 192),
        ];
        for (mode, dz, dzc) in expect {
            let s = ParamStore::new();
            let mut g = Graph::eval(&s);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let x = random(&mut g, &mut rng, 10, 3 * d);
            let a = random(&mut g, &mut rng, 11, d);
            let r = random(&mut g, &mut rng, 10, d);
            let xc = g.constant(Tensor::vector(vec![0.1; 3 * d]));
            let f = fuse_time(&mut g, x, Some(a), Some(r), xc, mode).unwrap();
            assert_eq!(g.shape(f.z_seq), &[10, dz], "{mode}");
            assert_eq!(g.shape(f.z_cand), &[dzc], "{mode}");
            assert_eq!((mode.dim_z(d), mode.dim_z_cand(d)), (dz, dzc));
        }
        assert_eq!(TimeMode::Both.wc_rows(64), 640);
    }

    #[test]
    fn none_mode_passes_through() {
        let s = ParamStore::new();
        let mut g = Graph::eval(&s);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut g, &mut rng, 3, 6);
        let xc = g.constant(Tensor::vector(vec![0.5; 6]));
        let f = fuse_time(&mut g, x, None, None, xc, TimeMode::None).unwrap();
        assert_eq!(g.data(f.z_seq), g.data(x));
        assert_eq!(g.data(f.z_cand), g.data(xc));
    }

    #[test]
    fn fusion_layout_is_exact() {
        let s = ParamStore::new();
        let mut g = Graph::eval(&s);
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap());
        let a = g.constant(Tensor::from_rows(&[vec![10.0], vec![20.0], vec![30.0]]).unwrap());
        let r = g.constant(Tensor::from_rows(&[vec![-1.0], vec![-2.0]]).unwrap());
        let xc = g.constant(Tensor::vector(vec![7.0, 8.0, 9.0]));
        let both = fuse_time(&mut g, x, Some(a), Some(r), xc, TimeMode::Both).unwrap();
        assert_eq!(g.data(both.z_seq), &[1.0, 2.0, 3.0, 10.0, -1.0, 4.0, 5.0, 6.0, 20.0, -2.0]);
        assert_eq!(g.data(both.z_cand), &[7.0, 8.0, 9.0, 30.0]);
        let rel = fuse_time(&mut g, x, None, Some(r), xc, TimeMode::Relative).unwrap();
        assert_eq!(g.tensor(rel.z_seq).row(1), &[4.0, 5.0, 6.0, -2.0, 7.0, 8.0, 9.0]);
        assert_eq!(g.data(rel.z_cand), &[7.0, 8.0, 9.0]);
    }

    #[test]
    fn missing_time_embedding_is_an_error() {
        let s = ParamStore::new();
        let mut g = Graph::eval(&s);
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let xc = g.constant(Tensor::zeros(&[3]));
        assert!(fuse_time(&mut g, x, None, None, xc, TimeMode::Absolute).is_err());
        let bad = g.constant(Tensor::zeros(&[2, 1]));
        assert!(fuse_time(&mut g, x, Some(bad), None, xc, TimeMode::Absolute).is_err());
    }

    #[test]
    fn transform_shapes_and_trivial_cases() {
        let d = 64;
        let s = ParamStore::new();
        let mut g = Graph::eval(&s);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut g, &mut rng, 10, 3 * d);
        let a = random(&mut g, &mut rng, 11, d);
        let r = random(&mut g, &mut rng, 10, d);
        let xc = g.constant(Tensor::vector(vec![0.1; 3 * d]));
        let u = g.constant(Tensor::vector(vec![0.2; d]));
        let f = fuse_time(&mut g, x, Some(a), Some(r), xc, TimeMode::Both).unwrap();
        let wc = random(&mut g, &mut rng, 640, d);
        let t = time_aware_transform(&mut g, &f, u, wc).unwrap();
        assert_eq!(g.shape(t), &[10, 64]);
        let zero = g.constant(Tensor::zeros(&[640, d]));
        let t0 = time_aware_transform(&mut g, &f, u, zero).unwrap();
        assert!(g.data(t0).iter().all(|&v| v == 0.0));
        let wrong = g.constant(Tensor::zeros(&[192, d]));
        assert!(matches!(time_aware_transform(&mut g, &f, u, wrong), Err(Error::Config(_))));
    }

    #[test]
    fn transform_is_linear_in_user() {
        let d = 4;
        let s = ParamStore::new();
        let mut g = Graph::eval(&s);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut g, &mut rng, 2, 3 * d);
        let xc = g.constant(Tensor::vector(vec![0.3; 3 * d]));
        let f = fuse_time(&mut g, x, None, None, xc, TimeMode::None).unwrap();
        // only the user block of W_c is non-zero
        let mut w = Tensor::zeros(&[7 * d, d]);
        let block = init_uniform(&mut rng, d, d, 1.0);
        w.data_mut()[6 * d * d..].copy_from_slice(block.data());
        let wc = g.constant(w);
        let u = g.constant(Tensor::vector(vec![0.5, -1.0, 2.0, 0.25]));
        let u3 = g.scale(u, 3.0).unwrap();
        let t1 = time_aware_transform(&mut g, &f, u, wc).unwrap();
        let t3 = time_aware_transform(&mut g, &f, u3, wc).unwrap();
        for (a, b) in g.data(t1).iter().zip(g.data(t3)) {
            assert!((3.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn block_shapes_and_singleton() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = ParamStore::new();
        block_store(&mut s, &mut rng, "b", 64, 256);
        let mut g = Graph::eval(&s);
        let p = block_params(&mut g, "b");
        let t = random(&mut g, &mut rng, 10, 64);
        let out = transformer_block(&mut g, t, 10, 1, &p, 0.2).unwrap();
        assert_eq!(g.shape(out.out), &[10, 64]);
        let one = random(&mut g, &mut rng, 1, 64);
        let out = transformer_block(&mut g, one, 1, 1, &p, 0.0).unwrap();
        assert_eq!(g.data(out.weights[0][0]), &[1.0]);
    }

    #[test]
    fn stacked_sequences_match_separate_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = ParamStore::new();
        block_store(&mut s, &mut rng, "b", 8, 16);
        let mut g = Graph::eval(&s);
        let p = block_params(&mut g, "b");
        let a = random(&mut g, &mut rng, 3, 8);
        let b = random(&mut g, &mut rng, 3, 8);
        let ab = g.stack_rows(&[a, b]).unwrap();
        for heads in [1, 2, 4] {
            let joint = transformer_block(&mut g, ab, 3, heads, &p, 0.0).unwrap();
            let ja = transformer_block(&mut g, a, 3, heads, &p, 0.0).unwrap();
            let jb = transformer_block(&mut g, b, 3, heads, &p, 0.0).unwrap();
            let sep: Vec<f64> = g.data(ja.out).iter().chain(g.data(jb.out)).copied().collect();
            for (x, y) in g.data(joint.out).iter().zip(&sep) {
                assert!((x - y).abs() < 1e-12);
            }
            assert_eq!(joint.weights.len(), 2);
            assert_eq!(joint.weights[1].len(), heads);
        }
    }

    #[test]
    fn gradient_check_fuse_transform_block() {
        let (d, l) = (8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut s = ParamStore::new();
        block_store(&mut s, &mut rng, "b", d, 16);
        s.insert("wc", init_uniform(&mut rng, TimeMode::Both.wc_rows(d), d, 0.3), true).unwrap();
        s.insert("x", init_uniform(&mut rng, l, 3 * d, 1.0), true).unwrap();
        s.insert("abs", init_uniform(&mut rng, l + 1, d, 1.0), true).unwrap();
        s.insert("rel", init_uniform(&mut rng, l, d, 1.0), true).unwrap();
        s.insert("xc", init_uniform(&mut rng, 1, 3 * d, 1.0).reshape(vec![3 * d]).unwrap(), true).unwrap();
        s.insert("u", init_uniform(&mut rng, 1, d, 1.0).reshape(vec![d]).unwrap(), true).unwrap();
        for heads in [1, 2] {
            let report = grad_check(&s, GradCheckOptions::default(), |g| {
                let x = g.param_named("x")?;
                let a = g.param_named("abs")?;
                let r = g.param_named("rel")?;
                let xc = g.param_named("xc")?;
                let u = g.param_named("u")?;
                let wc = g.param_named("wc")?;
                let f = fuse_time(g, x, Some(a), Some(r), xc, TimeMode::Both)?;
                let t = time_aware_transform(g, &f, u, wc)?;
                let p = block_params(g, "b");
                let out = transformer_block(g, t, l, heads, &p, 0.2)?;
                let m = g.mean_axis(out.out, 0)?;
                g.bce_with_logits(m, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0])
            })
            .unwrap();
            assert!(report.max_rel_err < 1e-4, "heads {heads}: {report:?}");
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for m in TimeMode::ALL {
            assert_eq!(m.as_str().parse::<TimeMode>().unwrap(), m);
        }
        assert!("sometimes".parse::<TimeMode>().is_err());
    }

    proptest! {
        #[test]
        fn block_is_permutation_equivariant(seed in 0u64..200, perm in Just(vec![0usize, 1, 2, 3, 4]).prop_shuffle(), heads in prop_oneof![Just(1usize), Just(2)]) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = ParamStore::new();
            block_store(&mut s, &mut rng, "b", 4, 8);
            let mut g = Graph::eval(&s);
            let p = block_params(&mut g, "b");
            let t = random(&mut g, &mut rng, 5, 4);
            let tp = g.select_rows(t, &perm).unwrap();
            let o = transformer_block(&mut g, t, 5, heads, &p, 0.0).unwrap().out;
            let op = transformer_block(&mut g, tp, 5, heads, &p, 0.0).unwrap().out;
            let (o, op) = (g.tensor(o), g.tensor(op));
            for (i, &src) in perm.iter().enumerate() {
                for j in 0..4 {
                    prop_assert!((op.get(i, j) - o.get(src, j)).abs() < 1e-10);
                }
            }
        }
    }
}
