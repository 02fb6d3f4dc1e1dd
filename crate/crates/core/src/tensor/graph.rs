//! Dynamic tape for reverse-mode differentiation.
//!
//! A [`Graph`] borrows a [`ParamStore`] for the duration of one forward and
//! backward pass. Every operation appends a node whose value is computed
//! eagerly; [`Graph::backward`] walks the tape in reverse and returns
//! gradients for every trainable parameter.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{dims2, Gradients, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value {
    Owned(Vec<f64>),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    Gather { table: ParamId, rows: Vec<usize> },
    BagMean { table: ParamId, groups: Vec<Vec<usize>> },
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Concat { parts: Vec<Var>, axis: usize },
    SliceRows { src: Var, start: usize },
    SliceCols { src: Var, start: usize },
    SelectRows { src: Var, rows: Vec<usize> },
    Reshape(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Relu(Var),
    Sigmoid(Var),
    MeanRows { src: Var, group: usize },
    MeanCols(Var),
    Dropout { src: Var, mask: Vec<f64> },
    BceLogits { logits: Var, labels: Vec<f64> },
}

struct Node {
    shape: Vec<usize>,
    value: Value,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    training: bool,
    rng: ChaCha8Rng,
}

impl<'a> Graph<'a> {
    /// A graph in training mode; `seed` drives dropout masks.
    pub fn new(store: &'a ParamStore, training: bool, seed: u64) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// An inference graph: dropout is the identity.
    pub fn eval(store: &'a ParamStore) -> Self {
        Graph::new(store, false, 0)
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        dims2(&self.nodes[v.0].shape)
    }

    pub fn data(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self.store.get(*id).data(),
        }
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.data(v).to_vec()).expect("node shapes are valid")
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.data(v)[0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            shape,
            value: Value::Owned(data),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Value::Owned(t.into_data()),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A parameter leaf. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = self.store.get(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad: self.store.is_trainable(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let id = self.store.require(name)?;
        Ok(self.param(id))
    }

    /// Rows `rows` of embedding table `table`, as an `n x d` matrix.
    pub fn gather(&mut self, table: ParamId, rows: &[usize]) -> Result<Var> {
        let t = self.store.get(table);
        let (vocab, d) = t.dims2();
        if rows.is_empty() {
            return Err(Error::dim("gather", "no rows requested"));
        }
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= vocab {
                return Err(Error::OutOfRange {
                    what: "embedding lookup",
                    index: r,
                    size: vocab,
                });
            }
            out.extend_from_slice(t.row(r));
        }
        let rg = self.store.is_trainable(table);
        self.push(
            vec![rows.len(), d],
            out,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            rg,
            "gather",
        )
    }

    /// One row per group: the mean of the group's embedding rows, or zeros
    /// for an empty group.
    pub fn bag_mean(&mut self, table: ParamId, groups: &[Vec<usize>]) -> Result<Var> {
        let t = self.store.get(table);
        let (vocab, d) = t.dims2();
        if groups.is_empty() {
            return Err(Error::dim("bag_mean", "no groups"));
        }
        let mut out = vec![0.0; groups.len() * d];
        for (gi, group) in groups.iter().enumerate() {
            let row = &mut out[gi * d..(gi + 1) * d];
            for &r in group {
                if r >= vocab {
                    return Err(Error::OutOfRange {
                        what: "embedding lookup",
                        index: r,
                        size: vocab,
                    });
                }
                row.iter_mut().zip(t.row(r)).for_each(|(o, x)| *o += x);
            }
            if !group.is_empty() {
                let inv = 1.0 / group.len() as f64;
                row.iter_mut().for_each(|o| *o *= inv);
            }
        }
        let rg = self.store.is_trainable(table);
        self.push(
            vec![groups.len(), d],
            out,
            Op::BagMean {
                table,
                groups: groups.to_vec(),
            },
            rg,
            "bag_mean",
        )
    }

    /// `a (m x k) * b (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, self.data(a), self.data(b), &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        self.push(vec![m, n], out, Op::MatMul(a, b), rg, "matmul")
    }

    /// `a (m x k) * b^T` where `b` is `n x k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::dim(
                "matmul_nt",
                format!("{:?} x {:?}^T", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(m, k, n, self.data(a), self.data(b), &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        self.push(vec![m, n], out, Op::MatMulNT(a, b), rg, "matmul_nt")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                "add",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg, "add")
    }

    /// Adds the row vector `row` to every row of `m`.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(m);
        let (r2, c2) = self.dims(row);
        if r2 != 1 || c != c2 {
            return Err(Error::dim(
                "add_row",
                format!("{:?} + row {:?}", self.shape(m), self.shape(row)),
            ));
        }
        let b = self.data(row);
        let mut out = self.data(m).to_vec();
        for i in 0..r {
            out[i * c..(i + 1) * c].iter_mut().zip(b).for_each(|(o, x)| *o += x);
        }
        let rg = self.rg(m) || self.rg(row);
        self.push(self.shape(m).to_vec(), out, Op::AddRow(m, row), rg, "add_row")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.data(a).iter().map(|x| x * s).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, s), rg, "scale")
    }

    /// Concatenation along `axis` (0 = rows, 1 = columns). Rank-1 inputs
    /// are rows. Column concatenation of rank-1 inputs stays rank 1.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat", "no inputs"));
        }
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| self.dims(p)).collect();
        let rg = parts.iter().any(|&p| self.rg(p));
        match axis {
            0 => {
                let c = dims[0].1;
                if dims.iter().any(|d| d.1 != c) {
                    return Err(Error::dim("concat", format!("row concat of {dims:?}")));
                }
                let r: usize = dims.iter().map(|d| d.0).sum();
                let mut out = Vec::with_capacity(r * c);
                for &p in parts {
                    out.extend_from_slice(self.data(p));
                }
                self.push(
                    vec![r, c],
                    out,
                    Op::Concat {
                        parts: parts.to_vec(),
                        axis,
                    },
                    rg,
                    "concat",
                )
            }
            1 => {
                let r = dims[0].0;
                if dims.iter().any(|d| d.0 != r) {
                    return Err(Error::dim("concat", format!("column concat of {dims:?}")));
                }
                let c: usize = dims.iter().map(|d| d.1).sum();
                let mut out = Vec::with_capacity(r * c);
                for i in 0..r {
                    for (&p, &(_, pc)) in parts.iter().zip(&dims) {
                        out.extend_from_slice(&self.data(p)[i * pc..(i + 1) * pc]);
                    }
                }
                let all_rank1 = parts.iter().all(|&p| self.shape(p).len() == 1);
                let shape = if all_rank1 { vec![c] } else { vec![r, c] };
                self.push(
                    shape,
                    out,
                    Op::Concat {
                        parts: parts.to_vec(),
                        axis,
                    },
                    rg,
                    "concat",
                )
            }
            _ => Err(Error::dim("concat", format!("axis {axis}"))),
        }
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, 0)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, 1)
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(src);
        if start >= end || end > r {
            return Err(Error::dim("slice_rows", format!("{start}..{end} of {r} rows")));
        }
        let out = self.data(src)[start * c..end * c].to_vec();
        let rg = self.rg(src);
        self.push(vec![end - start, c], out, Op::SliceRows { src, start }, rg, "slice_rows")
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(src);
        if start >= end || end > c {
            return Err(Error::dim("slice_cols", format!("{start}..{end} of {c} cols")));
        }
        let w = end - start;
        let data = self.data(src);
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&data[i * c + start..i * c + end]);
        }
        let shape = if self.shape(src).len() == 1 { vec![w] } else { vec![r, w] };
        let rg = self.rg(src);
        self.push(shape, out, Op::SliceCols { src, start }, rg, "slice_cols")
    }

    /// Gathers rows of a node (indices may repeat).
    pub fn select_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(src);
        if rows.is_empty() {
            return Err(Error::dim("select_rows", "no rows requested"));
        }
        let data = self.data(src);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::OutOfRange {
                    what: "row selection",
                    index: i,
                    size: r,
                });
            }
            out.extend_from_slice(&data[i * c..(i + 1) * c]);
        }
        let rg = self.rg(src);
        self.push(
            vec![rows.len(), c],
            out,
            Op::SelectRows {
                src,
                rows: rows.to_vec(),
            },
            rg,
            "select_rows",
        )
    }

    /// Repeats a single row `n` times.
    pub fn tile_rows(&mut self, row: Var, n: usize) -> Result<Var> {
        self.select_rows(row, &vec![0; n])
    }

    pub fn reshape(&mut self, src: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.data(src).len() || shape.is_empty() || shape.len() > 2 {
            return Err(Error::dim("reshape", format!("{:?} -> {shape:?}", self.shape(src))));
        }
        let out = self.data(src).to_vec();
        let rg = self.rg(src);
        self.push(shape, out, Op::Reshape(src), rg, "reshape")
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, src: Var) -> Result<Var> {
        let (r, c) = self.dims(src);
        let mut out = self.data(src).to_vec();
        for row in out.chunks_mut(c).take(r) {
            softmax_in_place(row);
        }
        let rg = self.rg(src);
        self.push(self.shape(src).to_vec(), out, Op::Softmax(src), rg, "softmax_rows")
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gamma * x + beta` (both of length `d`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, d) = self.dims(x);
        if self.data(gamma).len() != d || self.data(beta).len() != d {
            return Err(Error::dim(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", self.shape(x), self.shape(gamma), self.shape(beta)),
            ));
        }
        let xs = self.data(x);
        let gs = self.data(gamma);
        let bs = self.data(beta);
        let mut xhat = vec![0.0; r * d];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = gs[j] * h + bs[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
            "layer_norm",
        )
    }

    pub fn relu(&mut self, src: Var) -> Result<Var> {
        let out = self.data(src).iter().map(|&x| x.max(0.0)).collect();
        let rg = self.rg(src);
        self.push(self.shape(src).to_vec(), out, Op::Relu(src), rg, "relu")
    }

    pub fn sigmoid(&mut self, src: Var) -> Result<Var> {
        let out = self.data(src).iter().map(|&x| sigmoid(x)).collect();
        let rg = self.rg(src);
        self.push(self.shape(src).to_vec(), out, Op::Sigmoid(src), rg, "sigmoid")
    }

    /// Mean over `axis` (0 = over rows, 1 = over columns); the result is
    /// rank 1.
    pub fn mean_axis(&mut self, src: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.dims(src);
        match axis {
            0 => {
                let m = self.mean_row_groups(src, r)?;
                self.reshape(m, vec![c])
            }
            1 => {
                let data = self.data(src);
                let out = (0..r).map(|i| data[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64).collect();
                let rg = self.rg(src);
                self.push(vec![r], out, Op::MeanCols(src), rg, "mean_axis")
            }
            _ => Err(Error::dim("mean_axis", format!("axis {axis}"))),
        }
    }

    /// Averages consecutive groups of `group` rows: `(n*group x c) -> (n x c)`.
    pub fn mean_row_groups(&mut self, src: Var, group: usize) -> Result<Var> {
        let (r, c) = self.dims(src);
        if group == 0 || r % group != 0 {
            return Err(Error::dim("mean_row_groups", format!("{r} rows in groups of {group}")));
        }
        let n = r / group;
        let data = self.data(src);
        let inv = 1.0 / group as f64;
        let mut out = vec![0.0; n * c];
        for g in 0..n {
            let o = &mut out[g * c..(g + 1) * c];
            for i in 0..group {
                let row = &data[(g * group + i) * c..(g * group + i + 1) * c];
                o.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            o.iter_mut().for_each(|a| *a *= inv);
        }
        let rg = self.rg(src);
        self.push(vec![n, c], out, Op::MeanRows { src, group }, rg, "mean_row_groups")
    }

    /// Inverted dropout; the identity outside training or at rate 0.
    pub fn dropout(&mut self, src: Var, rate: f64) -> Result<Var> {
        if !self.training || rate <= 0.0 {
            return Ok(src);
        }
        if rate >= 1.0 {
            return Err(Error::Config(format!("dropout rate {rate} must be < 1")));
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.data(src).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = self.data(src).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let rg = self.rg(src);
        self.push(self.shape(src).to_vec(), out, Op::Dropout { src, mask }, rg, "dropout")
    }

    /// Sum over elements of the binary cross-entropy of `sigmoid(logits)`
    /// against `labels`, in the stable `softplus` form. Labels must be 0 or 1.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let z = self.data(logits);
        if z.len() != labels.len() {
            return Err(Error::dim("bce_with_logits", format!("{} logits, {} labels", z.len(), labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::Data(format!("label {bad} is not 0 or 1")));
        }
        let loss: f64 = z.iter().zip(labels).map(|(&z, &y)| bce_term(z, y)).sum();
        let rg = self.rg(logits);
        self.push(
            vec![1],
            vec![loss],
            Op::BceLogits {
                logits,
                labels: labels.to_vec(),
            },
            rg,
            "bce_with_logits",
        )
    }

    /// Backpropagates from a single-element node. Every trainable
    /// parameter gets a buffer; unused ones stay zero.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let mut pgrads = Gradients::zeros_for_trainable(self.store);
        self.backward_into(out, &mut pgrads)?;
        Ok(pgrads)
    }

    /// Like [`Graph::backward`], adding into existing buffers.
    pub fn backward_into(&self, out: Var, pgrads: &mut Gradients) -> Result<()> {
        if self.data(out).len() != 1 {
            return Err(Error::dim("backward", format!("output shape {:?} is not scalar", self.shape(out))));
        }
        if pgrads.len() != self.store.len() {
            return Err(Error::dim("backward", "gradient buffers do not match the parameter store"));
        }
        if !self.rg(out) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(out.0 + 1, || None);
        grads[out.0] = Some(vec![1.0]);

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let slot = pgrads.slot(*id, g.len());
                    slot.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                Op::Gather { table, rows } => {
                    let (_, d) = self.store.get(*table).dims2();
                    let len = self.store.get(*table).len();
                    let slot = pgrads.slot(*table, len);
                    for (k, &r) in rows.iter().enumerate() {
                        slot[r * d..(r + 1) * d].iter_mut().zip(&g[k * d..(k + 1) * d]).for_each(|(a, b)| *a += b);
                    }
                }
                Op::BagMean { table, groups } => {
                    let (_, d) = self.store.get(*table).dims2();
                    let len = self.store.get(*table).len();
                    let slot = pgrads.slot(*table, len);
                    for (k, group) in groups.iter().enumerate() {
                        if group.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / group.len() as f64;
                        let gr = &g[k * d..(k + 1) * d];
                        for &r in group {
                            slot[r * d..(r + 1) * d].iter_mut().zip(gr).for_each(|(a, b)| *a += b * inv);
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims(*a);
                    let n = self.dims(*b).1;
                    if self.rg(*a) {
                        let ga = acc(&mut grads, *a, m * k);
                        gemm_nt(m, n, k, &g, self.data(*b), ga, 1.0);
                    }
                    if self.rg(*b) {
                        let gb = acc(&mut grads, *b, k * n);
                        gemm_tn(k, m, n, self.data(*a), &g, gb, 1.0);
                    }
                }
                Op::MatMulNT(a, b) => {
                    let (m, k) = self.dims(*a);
                    let n = self.dims(*b).0;
                    if self.rg(*a) {
                        let ga = acc(&mut grads, *a, m * k);
                        gemm_nn(m, n, k, &g, self.data(*b), ga, 1.0);
                    }
                    if self.rg(*b) {
                        let gb = acc(&mut grads, *b, n * k);
                        gemm_tn(n, m, k, &g, self.data(*a), gb, 1.0);
                    }
                }
                Op::Add(a, b) => {
                    for p in [*a, *b] {
                        if self.rg(p) {
                            add_into(acc(&mut grads, p, g.len()), &g);
                        }
                    }
                }
                Op::AddRow(m, row) => {
                    if self.rg(*m) {
                        add_into(acc(&mut grads, *m, g.len()), &g);
                    }
                    if self.rg(*row) {
                        let c = self.dims(*row).1;
                        let gr = acc(&mut grads, *row, c);
                        for chunk in g.chunks(c) {
                            add_into(gr, chunk);
                        }
                    }
                }
                Op::Scale(a, s) => {
                    if self.rg(*a) {
                        let ga = acc(&mut grads, *a, g.len());
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += s * y);
                    }
                }
                Op::Concat { parts, axis } => {
                    let (r, c) = dims2(&node.shape);
                    if *axis == 0 {
                        let mut off = 0;
                        for &p in parts {
                            let n = self.data(p).len();
                            if self.rg(p) {
                                add_into(acc(&mut grads, p, n), &g[off..off + n]);
                            }
                            off += n;
                        }
                    } else {
                        let mut col = 0;
                        for &p in parts {
                            let pc = self.dims(p).1;
                            if self.rg(p) {
                                let gp = acc(&mut grads, p, r * pc);
                                for i in 0..r {
                                    add_into(&mut gp[i * pc..(i + 1) * pc], &g[i * c + col..i * c + col + pc]);
                                }
                            }
                            col += pc;
                        }
                    }
                }
                Op::SliceRows { src, start } => {
                    if self.rg(*src) {
                        let (r, c) = self.dims(*src);
                        let gs = acc(&mut grads, *src, r * c);
                        add_into(&mut gs[start * c..start * c + g.len()], &g);
                    }
                }
                Op::SliceCols { src, start } => {
                    if self.rg(*src) {
                        let (r, c) = self.dims(*src);
                        let w = dims2(&node.shape).1;
                        let gs = acc(&mut grads, *src, r * c);
                        for i in 0..r {
                            add_into(&mut gs[i * c + start..i * c + start + w], &g[i * w..(i + 1) * w]);
                        }
                    }
                }
                Op::SelectRows { src, rows } => {
                    if self.rg(*src) {
                        let (r, c) = self.dims(*src);
                        let gs = acc(&mut grads, *src, r * c);
                        for (k, &row) in rows.iter().enumerate() {
                            add_into(&mut gs[row * c..(row + 1) * c], &g[k * c..(k + 1) * c]);
                        }
                    }
                }
                Op::Reshape(src) => {
                    if self.rg(*src) {
                        add_into(acc(&mut grads, *src, g.len()), &g);
                    }
                }
                Op::Softmax(src) => {
                    if self.rg(*src) {
                        let c = dims2(&node.shape).1;
                        let y = self.data(Var(i));
                        let gs = acc(&mut grads, *src, g.len());
                        for ((gr, yr), out) in g.chunks(c).zip(y.chunks(c)).zip(gs.chunks_mut(c)) {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                out[j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (r, d) = self.dims(*x);
                    let gam = self.data(*gamma);
                    if self.rg(*gamma) {
                        let gg = acc(&mut grads, *gamma, d);
                        for i in 0..r {
                            for j in 0..d {
                                gg[j] += g[i * d + j] * xhat[i * d + j];
                            }
                        }
                    }
                    if self.rg(*beta) {
                        let gb = acc(&mut grads, *beta, d);
                        for chunk in g.chunks(d) {
                            add_into(gb, chunk);
                        }
                    }
                    if self.rg(*x) {
                        let gx = acc(&mut grads, *x, r * d);
                        let mut dxhat = vec![0.0; d];
                        for i in 0..r {
                            for j in 0..d {
                                dxhat[j] = g[i * d + j] * gam[j];
                            }
                            let h = &xhat[i * d..(i + 1) * d];
                            let sum: f64 = dxhat.iter().sum();
                            let dot: f64 = dxhat.iter().zip(h).map(|(a, b)| a * b).sum();
                            let scale = inv_std[i] / d as f64;
                            for j in 0..d {
                                gx[i * d + j] += scale * (d as f64 * dxhat[j] - sum - h[j] * dot);
                            }
                        }
                    }
                }
                Op::Relu(src) => {
                    if self.rg(*src) {
                        let xs = self.data(*src);
                        let gs = acc(&mut grads, *src, g.len());
                        for ((o, gv), x) in gs.iter_mut().zip(&g).zip(xs) {
                            if *x > 0.0 {
                                *o += gv;
                            }
                        }
                    }
                }
                Op::Sigmoid(src) => {
                    if self.rg(*src) {
                        let y = self.data(Var(i));
                        let gs = acc(&mut grads, *src, g.len());
                        for ((o, gv), yv) in gs.iter_mut().zip(&g).zip(y) {
                            *o += gv * yv * (1.0 - yv);
                        }
                    }
                }
                Op::MeanRows { src, group } => {
                    if self.rg(*src) {
                        let (r, c) = self.dims(*src);
                        let inv = 1.0 / *group as f64;
                        let gs = acc(&mut grads, *src, r * c);
                        for row in 0..r {
                            let gi = row / group;
                            for j in 0..c {
                                gs[row * c + j] += g[gi * c + j] * inv;
                            }
                        }
                    }
                }
                Op::MeanCols(src) => {
                    if self.rg(*src) {
                        let (r, c) = self.dims(*src);
                        let inv = 1.0 / c as f64;
                        let gs = acc(&mut grads, *src, r * c);
                        for row in 0..r {
                            gs[row * c..(row + 1) * c].iter_mut().for_each(|x| *x += g[row] * inv);
                        }
                    }
                }
                Op::Dropout { src, mask } => {
                    if self.rg(*src) {
                        let gs = acc(&mut grads, *src, g.len());
                        for ((o, gv), m) in gs.iter_mut().zip(&g).zip(mask) {
                            *o += gv * m;
                        }
                    }
                }
                Op::BceLogits { logits, labels } => {
                    if self.rg(*logits) {
                        let z = self.data(*logits);
                        let gs = acc(&mut grads, *logits, z.len());
                        for ((o, &zv), &y) in gs.iter_mut().zip(z).zip(labels) {
                            *o += g[0] * (sigmoid(zv) - y);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-[y ln s(z) + (1-y) ln(1 - s(z))]` without overflow.
pub(crate) fn bce_term(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(entries: &[(&str, Tensor)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, t) in entries {
            s.insert(*n, t.clone(), true).unwrap();
        }
        s
    }

    #[test]
    fn matmul_examples() {
        let s = ParamStore::new();
        let mut g = Graph::eval(&s);
        let eye = g.constant(Tensor::eye(2));
        let m = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let p = g.matmul(eye, m).unwrap();
        assert_eq!(g.data(p), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let b = g.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.data(p), &[11.0]);

        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_examples() {
        let s = ParamStore::new();
        let mut g = Graph::eval(&s);
        let x = g.constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![3f64.ln(), 0.0], vec![1000.0, 0.0]]).unwrap());
        let y = g.softmax_rows(x).unwrap();
        let d = g.data(y);
        assert!((d[0] - 0.5).abs() < 1e-15 && (d[1] - 0.5).abs() < 1e-15);
        assert!((d[2] - 0.75).abs() < 1e-12 && (d[3] - 0.25).abs() < 1e-12);
        assert!((d[4] - 1.0).abs() < 1e-12 && d[5].abs() < 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let s = ParamStore::new();
        let mut g = Graph::eval(&s);
        let ones = g.constant(Tensor::full(&[2], 1.0));
        let zeros = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(Tensor::from_rows(&[vec![4.0, 4.0], vec![1.0, 3.0]]).unwrap());
        let y = g.layer_norm(x, ones, zeros, 1e-12).unwrap();
        let d = g.data(y);
        assert_eq!(&d[..2], &[0.0, 0.0]);
        assert!((d[2] + 1.0).abs() < 1e-9 && (d[3] - 1.0).abs() < 1e-9);

        let fives = g.constant(Tensor::full(&[2], 5.0));
        let y = g.layer_norm(x, zeros, fives, 1e-5).unwrap();
        assert!(g.data(y).iter().all(|&v| v == 5.0));
    }

    #[test]
    fn bce_examples() {
        assert!((bce_term(0.0, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert!(bce_term(30.0, 1.0) < 1e-12);
        assert!(bce_term(-30.0, 0.0) < 1e-12);
        assert!(bce_term(-800.0, 1.0).is_finite());
        let s = ParamStore::new();
        let mut g = Graph::eval(&s);
        let z = g.constant(Tensor::vector(vec![0.0]));
        assert!(g.bce_with_logits(z, &[2.0]).is_err());
    }

    #[test]
    fn non_finite_is_an_error() {
        let s = ParamStore::new();
        let mut g = Graph::eval(&s);
        let x = g.constant(Tensor::vector(vec![1e300]));
        assert!(matches!(g.scale(x, 1e300), Err(Error::NonFinite(_))));
    }

    #[test]
    fn gather_scatters_only_into_looked_up_rows() {
        let table = Tensor::matrix(4, 2, (0..8).map(f64::from).collect()).unwrap();
        let s = store_with(&[("emb", table)]);
        let id = s.id("emb").unwrap();
        let mut g = Graph::eval(&s);
        let rows = g.gather(id, &[1, 1, 3]).unwrap();
        let m = g.mean_axis(rows, 0).unwrap();
        let m = g.mean_axis(m, 1).unwrap();
        let grads = g.backward(m).unwrap();
        let gr = grads.get(id).unwrap();
        assert_eq!(&gr[0..2], &[0.0, 0.0]);
        assert_eq!(&gr[4..6], &[0.0, 0.0]);
        assert!((gr[2] - 2.0 / 6.0).abs() < 1e-15);
        assert!((gr[6] - 1.0 / 6.0).abs() < 1e-15);
        assert!(g.gather(id, &[4]).is_err());
    }

    #[test]
    fn bag_mean_of_empty_group_is_zero() {
        let table = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let s = store_with(&[("emb", table)]);
        let id = s.id("emb").unwrap();
        let mut g = Graph::eval(&s);
        let b = g.bag_mean(id, &[vec![0, 2], vec![], vec![1]]).unwrap();
        assert_eq!(g.data(b), &[3.0, 4.0, 0.0, 0.0, 3.0, 4.0]);
    }

    #[test]
    fn dropout_is_identity_in_eval_and_seeded_in_training() {
        let s = ParamStore::new();
        let mut g = Graph::eval(&s);
        let x = g.constant(Tensor::full(&[100], 1.0));
        assert_eq!(g.dropout(x, 0.2).unwrap(), x);

        let run = |seed| {
            let mut g = Graph::new(&s, true, seed);
            let x = g.constant(Tensor::full(&[100], 1.0));
            let y = g.dropout(x, 0.5).unwrap();
            g.data(y).to_vec()
        };
        let a = run(3);
        assert_eq!(a, run(3));
        assert!(a.iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(a.contains(&0.0) && a.contains(&2.0));
    }
}
