//! Self-attention over the five (history, candidate) element pairs.

use crate::attention::attend;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

pub const ELEMENT_COUNT: usize = 5;

/// Element facets in row order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ElementKind {
    Person,
    Organization,
    Time,
    Location,
    Keywords,
}

impl ElementKind {
    pub const ALL: [ElementKind; ELEMENT_COUNT] = [
        ElementKind::Person,
        ElementKind::Organization,
        ElementKind::Time,
        ElementKind::Location,
        ElementKind::Keywords,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ElementKind::Person => "person",
            ElementKind::Organization => "organization",
            ElementKind::Time => "time",
            ElementKind::Location => "location",
            ElementKind::Keywords => "keywords",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Five element rows of one article; absent elements are zero rows.
#[derive(Debug, Clone, Copy)]
pub struct ElementMatrix {
    /// `5 x d`
    pub rows: Var,
    pub present: [bool; ELEMENT_COUNT],
}

/// `W4`, `W5`, `W6`, each `2d x d`.
#[derive(Debug, Clone, Copy)]
pub struct ElementParams {
    pub w4: Var,
    pub w5: Var,
    pub w6: Var,
}

/// Returns `(attended 5 x d, gamma 5 x 5)`. Gamma is reported before
/// dropout; in training mode dropout is applied to it before it weights
/// the values.
pub fn element_attend(g: &mut Graph, hist: &ElementMatrix, cand: &ElementMatrix, params: &ElementParams, dropout: f64) -> Result<(Var, Var)> {
    let d = match (g.shape(hist.rows), g.shape(cand.rows)) {
        ([ELEMENT_COUNT, d], [ELEMENT_COUNT, d2]) if d == d2 => *d,
        (a, b) => return Err(Error::dim("element_attend", format!("history {a:?}, candidate {b:?}"))),
    };
    for w in [params.w4, params.w5, params.w6] {
        if g.shape(w) != [2 * d, d] {
            return Err(Error::dim("element_attend", format!("weight {:?} vs 2d x d = {}x{d}", g.shape(w), 2 * d)));
        }
    }
    let p = g.concat_cols(&[hist.rows, cand.rows])?;
    let q = g.matmul(p, params.w4)?;
    let k = g.matmul(p, params.w5)?;
    let v = g.matmul(p, params.w6)?;
    let a = attend(g, q, k, v, 1.0 / (d as f64).sqrt(), None, dropout)?;
    Ok((a.out, a.weights))
}

/// Mean of the five attended rows.
pub fn pool_elements(g: &mut Graph, attended: Var) -> Result<Var> {
    if g.shape(attended).first() != Some(&ELEMENT_COUNT) || g.shape(attended).len() != 2 {
        return Err(Error::dim("pool_elements", format!("{:?}", g.shape(attended))));
    }
    g.mean_axis(attended, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::init_uniform;
    use crate::tensor::{grad_check, GradCheckOptions, ParamStore, Tensor};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(d: usize, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        for name in ["w4", "w5", "w6"] {
            s.insert(name, init_uniform(&mut rng, 2 * d, d, 0.5), true).unwrap();
        }
        s.insert("hist", init_uniform(&mut rng, 5, d, 1.0), true).unwrap();
        s.insert("cand", init_uniform(&mut rng, 5, d, 1.0), true).unwrap();
        s
    }

    fn params(g: &mut Graph) -> ElementParams {
        ElementParams {
            w4: g.param_named("w4").unwrap(),
            w5: g.param_named("w5").unwrap(),
            w6: g.param_named("w6").unwrap(),
        }
    }

    fn matrix(v: Var) -> ElementMatrix {
        ElementMatrix { rows: v, present: [true; 5] }
    }

    #[test]
    fn shapes_at_d64() {
        let s = store(64, 1);
        let mut g = Graph::eval(&s);
        let (h, c) = (g.param_named("hist").unwrap(), g.param_named("cand").unwrap());
        let p = params(&mut g);
        let (att, gamma) = element_attend(&mut g, &matrix(h), &matrix(c), &p, 0.2).unwrap();
        assert_eq!(g.shape(att), &[5, 64]);
        assert_eq!(g.shape(gamma), &[5, 5]);
        for r in 0..5 {
            let sum: f64 = g.tensor(gamma).row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        let pooled = pool_elements(&mut g, att).unwrap();
        assert_eq!(g.shape(pooled), &[64]);
    }

    #[test]
    fn zero_query_map_is_uniform() {
        let s = store(6, 2);
        let mut g = Graph::eval(&s);
        let (h, c) = (g.param_named("hist").unwrap(), g.param_named("cand").unwrap());
        let mut p = params(&mut g);
        p.w4 = g.constant(Tensor::zeros(&[12, 6]));
        let (_, gamma) = element_attend(&mut g, &matrix(h), &matrix(c), &p, 0.0).unwrap();
        assert!(g.data(gamma).iter().all(|&x| (x - 0.2).abs() < 1e-12));
    }

    #[test]
    fn identical_rows_give_identical_gamma_rows() {
        let s = store(4, 3);
        let mut g = Graph::eval(&s);
        let row = Tensor::from_rows(&vec![vec![0.3, -0.2, 0.9, 0.1]; 5]).unwrap();
        let h = g.constant(row.clone());
        let c = g.constant(row);
        let p = params(&mut g);
        let (_, gamma) = element_attend(&mut g, &matrix(h), &matrix(c), &p, 0.0).unwrap();
        let gm = g.tensor(gamma);
        for r in 1..5 {
            assert_eq!(gm.row(r), gm.row(0));
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let s = store(4, 4);
        let mut g = Graph::eval(&s);
        let h = g.constant(Tensor::zeros(&[4, 4]));
        let c = g.param_named("cand").unwrap();
        let p = params(&mut g);
        assert!(element_attend(&mut g, &matrix(h), &matrix(c), &p, 0.0).is_err());
    }

    #[test]
    fn pooling_examples() {
        let s = ParamStore::new();
        let mut g = Graph::eval(&s);
        let same = g.constant(Tensor::from_rows(&vec![vec![1.0, -4.0]; 5]).unwrap());
        let p = pool_elements(&mut g, same).unwrap();
        assert_eq!(g.data(p), &[1.0, -4.0]);
        let eye = g.constant(Tensor::eye(5));
        let p = pool_elements(&mut g, eye).unwrap();
        assert!(g.data(p).iter().all(|&x| (x - 0.2).abs() < 1e-15));
    }

    #[test]
    fn gradient_check_d8() {
        let s = store(8, 5);
        let report = grad_check(&s, GradCheckOptions::default(), |g| {
            let (h, c) = (g.param_named("hist")?, g.param_named("cand")?);
            let p = ElementParams {
                w4: g.param_named("w4")?,
                w5: g.param_named("w5")?,
                w6: g.param_named("w6")?,
            };
            let (att, _) = element_attend(g, &matrix(h), &matrix(c), &p, 0.2)?;
            let pooled = pool_elements(g, att)?;
            g.bce_with_logits(pooled, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0])
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    proptest! {
        #[test]
        fn permuting_elements_permutes_output(seed in 0u64..500, perm in Just([0usize, 1, 2, 3, 4]).prop_shuffle()) {
            let s = store(4, seed);
            let mut g = Graph::eval(&s);
            let (h, c) = (g.param_named("hist").unwrap(), g.param_named("cand").unwrap());
            let p = params(&mut g);
            let (att, _) = element_attend(&mut g, &matrix(h), &matrix(c), &p, 0.0).unwrap();
            let hp = g.select_rows(h, &perm).unwrap();
            let cp = g.select_rows(c, &perm).unwrap();
            let (att_p, _) = element_attend(&mut g, &matrix(hp), &matrix(cp), &p, 0.0).unwrap();
            let (a, b) = (g.tensor(att), g.tensor(att_p));
            for (i, &src) in perm.iter().enumerate() {
                for j in 0..4 {
                    prop_assert!((b.get(i, j) - a.get(src, j)).abs() < 1e-12);
                }
            }
        }
    }
}
