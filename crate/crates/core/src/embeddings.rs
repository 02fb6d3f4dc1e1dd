//! Lookup tables and featurizers: users, news ids, words, calendar time,
//! and bucketed inter-click intervals.

use chrono::{DateTime, Datelike, Timelike};
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Number of log2 buckets for relative intervals.
pub const RELATIVE_BUCKETS: usize = 32;

/// Calendar decomposition of a UTC timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeFeatures {
    pub year: i32,
    pub month: u32,
    /// ISO week number, 1..=53.
    pub week: u32,
    pub day: u32,
    pub hour: u32,
    pub minute: u32,
}

impl TimeFeatures {
    pub fn from_epoch(ts: i64) -> Result<Self> {
        if ts < 0 {
            return Err(Error::Data(format!("negative timestamp {ts}")));
        }
        let dt = DateTime::from_timestamp(ts, 0).ok_or_else(|| Error::Data(format!("timestamp {ts} out of range")))?;
        Ok(TimeFeatures {
            year: dt.year(),
            month: dt.month(),
            week: dt.iso_week().week(),
            day: dt.day(),
            hour: dt.hour(),
            minute: dt.minute(),
        })
    }
}

/// `min(floor(log2(dt + 1)), buckets - 1)`; monotone in `dt`.
pub fn relative_bucket(dt: i64, buckets: usize) -> Result<usize> {
    if dt < 0 {
        return Err(Error::Data(format!(
            "negative interval {dt}s: timestamps must be non-decreasing per user"
        )));
    }
    let v = dt as u64 + 1;
    let log = (63 - v.leading_zeros()) as usize;
    Ok(log.min(buckets - 1))
}

/// Uniform(-1/sqrt(d), 1/sqrt(d)) initialization.
pub fn init_embedding<R: Rng>(rng: &mut R, rows: usize, dim: usize) -> Tensor {
    let bound = 1.0 / (dim as f64).sqrt();
    init_uniform(rng, rows, dim, bound)
}

pub(crate) fn init_uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, data).expect("positive shape")
}

/// A trainable `vocab x dim` table living in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingTable {
    pub id: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn register<R: Rng>(store: &mut ParamStore, name: &str, vocab_size: usize, dim: usize, rng: &mut R) -> Result<Self> {
        let id = store.insert(name, init_embedding(rng, vocab_size, dim), true)?;
        Ok(EmbeddingTable { id, vocab_size, dim })
    }

    pub fn attach(store: &ParamStore, name: &str) -> Result<Self> {
        let id = store.require(name)?;
        let (vocab_size, dim) = store.get(id).dims2();
        Ok(EmbeddingTable { id, vocab_size, dim })
    }

    /// Rows for `indices`, as an `n x dim` matrix.
    pub fn lookup(&self, g: &mut Graph, indices: &[usize]) -> Result<Var> {
        g.gather(self.id, indices)
    }

    /// Mean row of each token list (zero for an empty list).
    pub fn bag_mean(&self, g: &mut Graph, groups: &[Vec<usize>]) -> Result<Var> {
        g.bag_mean(self.id, groups)
    }
}

fn to_indices(tokens: &[u32]) -> Vec<usize> {
    tokens.iter().map(|&t| t as usize).collect()
}

/// Mean of the word rows of one sentence; zeros for an empty sentence.
pub fn encode_sentence(g: &mut Graph, words: &EmbeddingTable, tokens: &[u32]) -> Result<Var> {
    let m = words.bag_mean(g, &[to_indices(tokens)])?;
    g.reshape(m, vec![words.dim])
}

/// One row per sentence.
pub fn encode_sentences(g: &mut Graph, words: &EmbeddingTable, sentences: &[Vec<u32>]) -> Result<Var> {
    let groups: Vec<Vec<usize>> = sentences.iter().map(|s| to_indices(s)).collect();
    words.bag_mean(g, &groups)
}

/// Mean of the sentence vectors; zeros when there are no sentences.
pub fn encode_candidate_content(g: &mut Graph, words: &EmbeddingTable, sentences: &[Vec<u32>]) -> Result<Var> {
    if sentences.is_empty() {
        return Ok(g.constant(Tensor::zeros(&[words.dim])));
    }
    let rows = encode_sentences(g, words, sentences)?;
    g.mean_axis(rows, 0)
}

/// Same contract as [`encode_sentence`]; a missing element is the zero vector.
pub fn encode_element(g: &mut Graph, words: &EmbeddingTable, tokens: &[u32]) -> Result<Var> {
    encode_sentence(g, words, tokens)
}

/// Six per-field calendar tables whose rows are summed.
#[derive(Debug, Clone, Copy)]
pub struct AbsoluteTimeTables {
    pub year: EmbeddingTable,
    pub month: EmbeddingTable,
    pub week: EmbeddingTable,
    pub day: EmbeddingTable,
    pub hour: EmbeddingTable,
    pub minute: EmbeddingTable,
    pub min_year: i32,
}

impl AbsoluteTimeTables {
    pub const NAMES: [&'static str; 6] = [
        "time.year",
        "time.month",
        "time.week",
        "time.day",
        "time.hour",
        "time.minute",
    ];

    pub fn register<R: Rng>(store: &mut ParamStore, dim: usize, min_year: i32, max_year: i32, rng: &mut R) -> Result<Self> {
        if max_year < min_year {
            return Err(Error::Config(format!("max_year {max_year} < min_year {min_year}")));
        }
        let years = (max_year - min_year + 1) as usize;
        let sizes = [years, 12, 53, 31, 24, 60];
        let mut t = Vec::with_capacity(6);
        for (name, size) in Self::NAMES.iter().zip(sizes) {
            t.push(EmbeddingTable::register(store, name, size, dim, rng)?);
        }
        Ok(AbsoluteTimeTables {
            year: t[0],
            month: t[1],
            week: t[2],
            day: t[3],
            hour: t[4],
            minute: t[5],
            min_year,
        })
    }

    pub fn attach(store: &ParamStore, min_year: i32) -> Result<Self> {
        let t: Vec<EmbeddingTable> = Self::NAMES
            .iter()
            .map(|n| EmbeddingTable::attach(store, n))
            .collect::<Result<_>>()?;
        Ok(AbsoluteTimeTables {
            year: t[0],
            month: t[1],
            week: t[2],
            day: t[3],
            hour: t[4],
            minute: t[5],
            min_year,
        })
    }

    /// Row indices into the six tables; years outside the table clamp.
    pub fn indices(&self, f: &TimeFeatures) -> [usize; 6] {
        let max_idx = self.year.vocab_size as i64 - 1;
        let y = (f.year as i64 - self.min_year as i64).clamp(0, max_idx) as usize;
        [
            y,
            (f.month - 1) as usize,
            (f.week - 1) as usize,
            (f.day - 1) as usize,
            f.hour as usize,
            f.minute as usize,
        ]
    }
}

/// Absolute-time embeddings of `timestamps`, one row each.
pub fn absolute_time_embed(g: &mut Graph, tables: &AbsoluteTimeTables, timestamps: &[i64]) -> Result<Var> {
    let feats: Vec<[usize; 6]> = timestamps
        .iter()
        .map(|&ts| TimeFeatures::from_epoch(ts).map(|f| tables.indices(&f)))
        .collect::<Result<_>>()?;
    let all = [
        tables.year,
        tables.month,
        tables.week,
        tables.day,
        tables.hour,
        tables.minute,
    ];
    let mut acc: Option<Var> = None;
    for (field, table) in all.iter().enumerate() {
        let idx: Vec<usize> = feats.iter().map(|f| f[field]).collect();
        let rows = table.lookup(g, &idx)?;
        acc = Some(match acc {
            None => rows,
            Some(a) => g.add(a, rows)?,
        });
    }
    Ok(acc.expect("six fields"))
}

/// Relative-interval embeddings of `intervals` (seconds), one row each.
pub fn relative_time_embed(g: &mut Graph, table: &EmbeddingTable, intervals: &[i64]) -> Result<Var> {
    let idx: Vec<usize> = intervals
        .iter()
        .map(|&dt| relative_bucket(dt, table.vocab_size))
        .collect::<Result<_>>()?;
    table.lookup(g, &idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn words_store() -> (ParamStore, EmbeddingTable) {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = EmbeddingTable::register(&mut s, "word_emb", 10, 4, &mut rng).unwrap();
        (s, t)
    }

    #[test]
    fn epoch_zero_features() {
        let f = TimeFeatures::from_epoch(0).unwrap();
        assert_eq!(
            f,
            TimeFeatures {
                year: 1970,
                month: 1,
                week: 1,
                day: 1,
                hour: 0,
                minute: 0
            }
        );
        assert!(TimeFeatures::from_epoch(-1).is_err());
    }

    #[test]
    fn bucket_examples() {
        assert_eq!(relative_bucket(0, 32).unwrap(), 0);
        assert_eq!(relative_bucket(1, 32).unwrap(), 1);
        assert_eq!(relative_bucket(1_000_000_000, 32).unwrap(), 29);
        assert_eq!(relative_bucket(i64::MAX, 32).unwrap(), 31);
        assert!(relative_bucket(-5, 32).is_err());
    }

    #[test]
    fn sentence_encoding_examples() {
        let (s, words) = words_store();
        let table = s.get(words.id).clone();
        let mut g = Graph::eval(&s);

        let one = encode_sentence(&mut g, &words, &[3]).unwrap();
        assert_eq!(g.data(one), table.row(3));

        let two = encode_sentence(&mut g, &words, &[3, 7]).unwrap();
        for j in 0..4 {
            assert!((g.data(two)[j] - (table.get(3, j) + table.get(7, j)) / 2.0).abs() < 1e-15);
        }

        let empty = encode_sentence(&mut g, &words, &[]).unwrap();
        assert_eq!(g.data(empty), &[0.0; 4]);
        assert_eq!(g.shape(empty), &[4]);

        assert!(encode_sentence(&mut g, &words, &[10]).is_err());
    }

    #[test]
    fn candidate_content_examples() {
        let (s, words) = words_store();
        let mut g = Graph::eval(&s);
        let single = encode_sentence(&mut g, &words, &[1, 2]).unwrap();
        let twice = encode_candidate_content(&mut g, &words, &[vec![1, 2], vec![1, 2]]).unwrap();
        for (a, b) in g.data(single).iter().zip(g.data(twice)) {
            assert!((a - b).abs() < 1e-15);
        }
        let a = encode_sentence(&mut g, &words, &[4]).unwrap();
        let b = encode_sentence(&mut g, &words, &[5, 6]).unwrap();
        let both = encode_candidate_content(&mut g, &words, &[vec![4], vec![5, 6]]).unwrap();
        for j in 0..4 {
            assert!((g.data(both)[j] - (g.data(a)[j] + g.data(b)[j]) / 2.0).abs() < 1e-15);
        }
        let none = encode_candidate_content(&mut g, &words, &[]).unwrap();
        assert_eq!(g.data(none), &[0.0; 4]);
    }

    #[test]
    fn element_encoding_examples() {
        let (s, words) = words_store();
        let table = s.get(words.id).clone();
        let mut g = Graph::eval(&s);
        let e = encode_element(&mut g, &words, &[2, 4, 9]).unwrap();
        for j in 0..4 {
            let want = (table.get(2, j) + table.get(4, j) + table.get(9, j)) / 3.0;
            assert!((g.data(e)[j] - want).abs() < 1e-15);
        }
        let missing = encode_element(&mut g, &words, &[]).unwrap();
        assert_eq!(g.data(missing), &[0.0; 4]);
    }

    #[test]
    fn absolute_time_is_a_function_of_the_minute() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tables = AbsoluteTimeTables::register(&mut s, 4, 2000, 2030, &mut rng).unwrap();
        let mut g = Graph::eval(&s);
        let ts = 1_483_228_800 + 3 * 3600 + 17 * 60;
        let e = absolute_time_embed(&mut g, &tables, &[ts, ts + 59, ts + 60, ts]).unwrap();
        let d = g.data(e);
        assert_eq!(&d[0..4], &d[4..8]);
        assert_ne!(&d[0..4], &d[8..12]);
        assert_eq!(&d[0..4], &d[12..16]);

        // year 1970 clamps to the first row
        let f = TimeFeatures::from_epoch(0).unwrap();
        assert_eq!(tables.indices(&f), [0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn relative_embedding_rows_come_from_buckets() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rel = EmbeddingTable::register(&mut s, "time.relative", RELATIVE_BUCKETS, 3, &mut rng).unwrap();
        let table = s.get(rel.id).clone();
        let mut g = Graph::eval(&s);
        let e = relative_time_embed(&mut g, &rel, &[0, 1, 1_000_000_000]).unwrap();
        assert_eq!(&g.data(e)[0..3], table.row(0));
        assert_eq!(&g.data(e)[3..6], table.row(1));
        assert_eq!(&g.data(e)[6..9], table.row(29));
        assert!(relative_time_embed(&mut g, &rel, &[-1]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn bucket_is_monotone(a in 0i64..1i64 << 40, b in 0i64..1i64 << 40) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            proptest::prop_assert!(relative_bucket(lo, 32).unwrap() <= relative_bucket(hi, 32).unwrap());
            proptest::prop_assert!(relative_bucket(hi, 32).unwrap() < 32);
        }

        #[test]
        fn sentence_encoding_is_permutation_invariant(mut tokens in proptest::collection::vec(0u32..10, 1..8), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            let (s, words) = words_store();
            let mut g = Graph::eval(&s);
            let a = encode_sentence(&mut g, &words, &tokens).unwrap();
            tokens.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let b = encode_sentence(&mut g, &words, &tokens).unwrap();
            for (x, y) in g.data(a).iter().zip(g.data(b)) {
                proptest::prop_assert!((x - y).abs() < 1e-14);
            }
        }
    }
}
