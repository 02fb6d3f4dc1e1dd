//! Negative sampling: uniform draws and dynamic (hardest-first) selection.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weights of the pool scorer `f(y, X) = W (X^T y) + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DnsParams {
    /// `N x N`
    pub w: Tensor,
    /// `[N]`
    pub b: Tensor,
}

impl DnsParams {
    /// `W = I`, `b = 0`: pool items are scored by their dot product with `y`.
    pub fn identity(pool: usize) -> Self {
        DnsParams {
            w: Tensor::eye(pool),
            b: Tensor::zeros(&[pool]),
        }
    }

    pub fn pool_size(&self) -> usize {
        self.b.len()
    }
}

/// Scores every pool column of `x` (`d x N`) against `y` (`[d]`).
pub fn dns_score(y: &[f64], x: &Tensor, params: &DnsParams) -> Result<Vec<f64>> {
    let (d, n) = match x.shape() {
        [d, n] => (*d, *n),
        other => return Err(Error::dim("dns_score", format!("X {other:?}"))),
    };
    if y.len() != d {
        return Err(Error::dim("dns_score", format!("y has {} entries, X has {d} rows", y.len())));
    }
    if params.w.shape() != [n, n] || params.b.len() != n {
        return Err(Error::dim(
            "dns_score",
            format!("W {:?}, b {:?} for a pool of {n}", params.w.shape(), params.b.shape()),
        ));
    }
    // X^T y
    let mut sims = vec![0.0; n];
    for (i, &yi) in y.iter().enumerate() {
        for (s, &xij) in sims.iter_mut().zip(x.row(i)) {
            *s += xij * yi;
        }
    }
    let w = params.w.data();
    Ok((0..n)
        .map(|r| w[r * n..(r + 1) * n].iter().zip(&sims).map(|(a, b)| a * b).sum::<f64>() + params.b.data()[r])
        .collect())
}

/// Indices of the `k` highest scores outside `excluded`, best first; ties
/// go to the lower index.
pub fn dns_select(scores: &[f64], k: usize, excluded: &BTreeSet<usize>) -> Result<Vec<usize>> {
    let mut open: Vec<usize> = (0..scores.len()).filter(|i| !excluded.contains(i)).collect();
    if k > open.len() {
        return Err(Error::Infeasible(format!("{k} negatives requested from {} eligible pool items", open.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("dns_select"));
    }
    open.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    open.truncate(k);
    Ok(open)
}

/// `k` distinct indices from `0..corpus_size` outside `excluded`, uniformly
/// without replacement. Deterministic in `seed`; returned in draw order.
pub fn uniform_sample(corpus_size: usize, excluded: &BTreeSet<usize>, k: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    uniform_sample_with(&mut rng, corpus_size, excluded, k)
}

/// [`uniform_sample`] drawing from a caller-owned generator.
pub fn uniform_sample_with<R: rand::Rng>(rng: &mut R, corpus_size: usize, excluded: &BTreeSet<usize>, k: usize) -> Result<Vec<usize>> {
    let blocked = excluded.iter().filter(|&&i| i < corpus_size).count();
    let open = corpus_size - blocked;
    if k > open {
        return Err(Error::Infeasible(format!(
            "{k} samples requested but only {open} of {corpus_size} items are eligible"
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    if blocked == 0 {
        return Ok(sample(rng, corpus_size, k).into_vec());
    }
    // Sample ranks among the eligible items and map them back to indices,
    // which keeps the draw uniform without rejection loops.
    let mut ranks = sample(rng, open, k).into_vec();
    let order: Vec<usize> = {
        let mut idx: Vec<usize> = (0..k).collect();
        idx.sort_by_key(|&i| ranks[i]);
        idx
    };
    let mut blocked_iter = excluded.iter().copied().filter(|&i| i < corpus_size).peekable();
    let mut skipped = 0;
    for &i in &order {
        let r = ranks[i];
        // smallest index with exactly r eligible items before it
        let mut cand = r + skipped;
        while let Some(&b) = blocked_iter.peek() {
            if b <= cand {
                skipped += 1;
                cand += 1;
                blocked_iter.next();
            } else {
                break;
            }
        }
        ranks[i] = cand;
    }
    Ok(ranks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(items: &[usize]) -> BTreeSet<usize> {
        items.iter().copied().collect()
    }

    #[test]
    fn score_examples() {
        let x = Tensor::from_rows(&[vec![1.0, 0.0, 0.5], vec![0.0, 1.0, 0.5]]).unwrap();
        let s = dns_score(&[1.0, 0.0], &x, &DnsParams::identity(3)).unwrap();
        assert_eq!(s, vec![1.0, 0.0, 0.5]);
        assert_eq!(dns_select(&s, 1, &set(&[])).unwrap(), vec![0]);

        let zero = DnsParams {
            w: Tensor::zeros(&[3, 3]),
            b: Tensor::vector(vec![0.1, 0.2, 0.3]),
        };
        assert_eq!(dns_score(&[9.0, -4.0], &x, &zero).unwrap(), vec![0.1, 0.2, 0.3]);

        let one = DnsParams {
            w: Tensor::matrix(1, 1, vec![2.0]).unwrap(),
            b: Tensor::vector(vec![0.5]),
        };
        let x1 = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(dns_score(&[1.0, 1.0], &x1, &one).unwrap(), vec![2.0 * 7.0 + 0.5]);
    }

    #[test]
    fn select_examples() {
        assert_eq!(dns_select(&[2.0; 4], 2, &set(&[])).unwrap(), vec![0, 1]);
        assert_eq!(dns_select(&[3.0, 9.0, 9.0], 2, &set(&[1])).unwrap(), vec![2, 0]);
        assert!(matches!(dns_select(&[1.0, 2.0], 2, &set(&[0])), Err(Error::Infeasible(_))));
    }

    #[test]
    fn score_shape_mismatch() {
        let x = Tensor::zeros(&[2, 3]);
        assert!(dns_score(&[1.0], &x, &DnsParams::identity(3)).is_err());
        assert!(dns_score(&[1.0, 2.0], &x, &DnsParams::identity(2)).is_err());
    }

    #[test]
    fn uniform_examples() {
        let got = uniform_sample(100, &set(&[42]), 99, 7).unwrap();
        let got_set: BTreeSet<usize> = got.iter().copied().collect();
        assert_eq!(got_set, (0..100).filter(|&i| i != 42).collect());
        assert_eq!(uniform_sample(1000, &set(&[1, 2]), 10, 3).unwrap(), uniform_sample(1000, &set(&[1, 2]), 10, 3).unwrap());
        assert!(uniform_sample(10, &set(&[]), 0, 1).unwrap().is_empty());
        assert!(uniform_sample(3, &set(&[0]), 3, 1).is_err());
    }

    #[test]
    fn uniform_is_roughly_uniform() {
        let excluded = set(&[0, 3, 4, 9]);
        let mut counts = [0usize; 10];
        for seed in 0..4000 {
            for i in uniform_sample(10, &excluded, 2, seed).unwrap() {
                counts[i] += 1;
            }
        }
        for (i, &c) in counts.iter().enumerate() {
            if excluded.contains(&i) {
                assert_eq!(c, 0);
            } else {
                // expected 8000 / 6 = 1333
                assert!((1150..1520).contains(&c), "{i}: {c}");
            }
        }
    }

    #[test]
    fn selected_negatives_beat_uniform_on_average() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (pool, k) = (64, 4);
        let mut dns_mean = 0.0;
        let mut uni_mean = 0.0;
        for trial in 0..100 {
            let scores: Vec<f64> = (0..pool).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let excl = set(&[trial % pool]);
            let hard = dns_select(&scores, k, &excl).unwrap();
            let easy = uniform_sample(pool, &excl, k, trial as u64).unwrap();
            dns_mean += hard.iter().map(|&i| scores[i]).sum::<f64>() / k as f64;
            uni_mean += easy.iter().map(|&i| scores[i]).sum::<f64>() / k as f64;
        }
        assert!(dns_mean >= uni_mean);
    }

    proptest! {
        #[test]
        fn select_matches_brute_force(
            scores in proptest::collection::vec(prop_oneof![(-3i32..3).prop_map(f64::from), -3.0f64..3.0], 1..64),
            k_frac in 0.0f64..1.0,
            excl in proptest::collection::btree_set(0usize..64, 0..8),
        ) {
            let n = scores.len();
            let excl: BTreeSet<usize> = excl.into_iter().filter(|&i| i < n).collect();
            let open = n - excl.len();
            let k = ((open as f64) * k_frac) as usize;
            let got = dns_select(&scores, k, &excl).unwrap();
            let mut brute: Vec<(f64, usize)> = (0..n).filter(|i| !excl.contains(i)).map(|i| (scores[i], i)).collect();
            brute.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<usize> = brute.into_iter().take(k).map(|(_, i)| i).collect();
            prop_assert_eq!(got, want);
        }

        #[test]
        fn uniform_respects_exclusions(n in 1usize..200, excl in proptest::collection::btree_set(0usize..250, 0..20), seed in 0u64..1000, k_frac in 0.0f64..=1.0) {
            let open = n - excl.iter().filter(|&&i| i < n).count();
            let k = ((open as f64) * k_frac) as usize;
            let got = uniform_sample(n, &excl, k, seed).unwrap();
            prop_assert_eq!(got.len(), k);
            let uniq: BTreeSet<usize> = got.iter().copied().collect();
            prop_assert_eq!(uniq.len(), k);
            prop_assert!(got.iter().all(|i| *i < n && !excl.contains(i)));
        }
    }
}
