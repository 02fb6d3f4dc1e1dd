//! Ranking metrics under the 99+1 protocol and attention export.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::BestBy;
use crate::data::{Corpus, Dataset, InstanceWindow};
use crate::element_attention::ElementKind;
use crate::error::{Error, Result};
use crate::model::{AttentionTrace, Model};
use crate::ranker::rank_of;
use crate::sampling::uniform_sample_with;
use crate::tensor::Tensor;

/// Cut-offs reported in every [`MetricsTable`].
pub const CUTOFFS: [usize; 3] = [1, 5, 10];

/// 1 if the positive is within the top `n`.
pub fn hr_at_n(rank: usize, n: usize) -> f64 {
    debug_assert!(rank >= 1 && n >= 1);
    if rank <= n {
        1.0
    } else {
        0.0
    }
}

/// `1 / log2(rank + 1)` within the top `n`, else 0.
pub fn ndcg_at_n(rank: usize, n: usize) -> f64 {
    debug_assert!(rank >= 1 && n >= 1);
    if rank <= n {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// HR and NDCG at 1, 5 and 10, averaged over instances.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricsTable {
    pub hr: [f64; 3],
    pub ndcg: [f64; 3],
    pub instances: usize,
}

impl MetricsTable {
    /// Sums in input order, so equal ranks always give equal bits.
    pub fn from_ranks(ranks: &[usize]) -> Self {
        let mut t = MetricsTable {
            instances: ranks.len(),
            ..Default::default()
        };
        if ranks.is_empty() {
            return t;
        }
        for &r in ranks {
            for (i, &n) in CUTOFFS.iter().enumerate() {
                t.hr[i] += hr_at_n(r, n);
                t.ndcg[i] += ndcg_at_n(r, n);
            }
        }
        let inv = 1.0 / ranks.len() as f64;
        t.hr.iter_mut().chain(t.ndcg.iter_mut()).for_each(|x| *x *= inv);
        t
    }

    fn slot(n: usize) -> usize {
        CUTOFFS.iter().position(|&c| c == n).expect("cut-off is one of 1, 5, 10")
    }

    pub fn hr_at(&self, n: usize) -> f64 {
        self.hr[Self::slot(n)]
    }

    pub fn ndcg_at(&self, n: usize) -> f64 {
        self.ndcg[Self::slot(n)]
    }

    pub fn select(&self, by: BestBy) -> f64 {
        if by.ndcg {
            self.ndcg_at(by.n)
        } else {
            self.hr_at(by.n)
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut m = serde_json::Map::new();
        for (i, n) in CUTOFFS.iter().enumerate() {
            m.insert(format!("hr@{n}"), self.hr[i].into());
        }
        for (i, n) in CUTOFFS.iter().enumerate() {
            m.insert(format!("ndcg@{n}"), self.ndcg[i].into());
        }
        m.insert("instances".into(), self.instances.into());
        serde_json::Value::Object(m)
    }
}

impl fmt::Display for MetricsTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8}{:>8}{:>8}{:>8}", "metric", "@1", "@5", "@10")?;
        writeln!(f, "{:<8}{:>8.4}{:>8.4}{:>8.4}", "HR", self.hr[0], self.hr[1], self.hr[2])?;
        write!(f, "{:<8}{:>8.4}{:>8.4}{:>8.4}", "NDCG", self.ndcg[0], self.ndcg[1], self.ndcg[2])
    }
}

/// Anything that can score candidate articles for an instance.
pub trait Scorer {
    fn score(&self, corpus: &Corpus, inst: &InstanceWindow, candidates: &[usize]) -> Result<Vec<f64>>;
}

impl Scorer for Model {
    fn score(&self, corpus: &Corpus, inst: &InstanceWindow, candidates: &[usize]) -> Result<Vec<f64>> {
        self.scores(corpus, inst, candidates)
    }
}

/// The positive plus `n_negatives` uniform unclicked articles, sorted by
/// article index, and the position of the positive in that list.
pub fn eval_candidates(dataset: &Dataset, inst: &InstanceWindow, n_negatives: usize, seed: u64, index: usize) -> Result<(Vec<usize>, usize)> {
    let mut excluded = dataset.clicked[inst.user].clone();
    excluded.insert(inst.candidate.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let mut list = uniform_sample_with(&mut rng, dataset.corpus.num_news(), &excluded, n_negatives)?;
    list.push(inst.candidate.0);
    list.sort_unstable();
    let pos = list.binary_search(&inst.candidate.0).expect("positive is in the list");
    Ok((list, pos))
}

/// Rank (1 = best) of each instance's positive among itself and
/// `n_negatives` sampled negatives. The negatives of instance `i` depend
/// only on `seed` and `i`.
pub fn rank_instances<S: Scorer + ?Sized>(scorer: &S, instances: &[InstanceWindow], dataset: &Dataset, n_negatives: usize, seed: u64) -> Result<Vec<usize>> {
    instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let (list, pos) = eval_candidates(dataset, inst, n_negatives, seed, i)?;
            let scores = scorer.score(&dataset.corpus, inst, &list)?;
            if scores.len() != list.len() {
                return Err(Error::dim("evaluate", format!("{} scores for {} candidates", scores.len(), list.len())));
            }
            if scores.iter().any(|s| s.is_nan()) {
                return Err(Error::NonFinite("evaluate"));
            }
            Ok(rank_of(&scores, pos))
        })
        .collect()
}

pub fn evaluate<S: Scorer + ?Sized>(scorer: &S, instances: &[InstanceWindow], dataset: &Dataset, n_negatives: usize, seed: u64) -> Result<MetricsTable> {
    Ok(MetricsTable::from_ranks(&rank_instances(scorer, instances, dataset, n_negatives, seed)?))
}

/// File names written by [`export_attention`], in order.
pub const ATTENTION_FILES: [&str; 4] = [
    "sentence_attention.csv",
    "element_attention.csv",
    "sequence_attention.csv",
    "time_aware_attention.csv",
];

/// Element order of the exported element matrices.
pub const EXPORT_ELEMENT_ORDER: [ElementKind; 5] = [
    ElementKind::Time,
    ElementKind::Person,
    ElementKind::Organization,
    ElementKind::Location,
    ElementKind::Keywords,
];

fn write_rows(out: &mut String, t: &Tensor, order: &[usize]) {
    for &r in order {
        let row: Vec<String> = order.iter().map(|&c| t.get(r, c).to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
}

/// CSV bodies for the four trace matrices. Per-article matrices are
/// stacked in history order under one header.
pub fn attention_csvs(trace: &AttentionTrace, max_sentences: usize) -> [String; 4] {
    let mut sentence = String::from("u");
    for i in 1..=max_sentences {
        sentence.push_str(&format!(",s{i}"));
    }
    sentence.push_str(",c\n");
    let identity: Vec<usize> = (0..max_sentences + 2).collect();
    for b in &trace.sentence {
        write_rows(&mut sentence, b, &identity);
    }

    let names: Vec<&str> = EXPORT_ELEMENT_ORDER.iter().map(|k| k.name()).collect();
    let mut element = names.join(",");
    element.push('\n');
    let order: Vec<usize> = EXPORT_ELEMENT_ORDER.iter().map(|k| k.index()).collect();
    for gm in &trace.element {
        write_rows(&mut element, gm, &order);
    }

    let l = trace.sequence.rows();
    let header: Vec<String> = (1..=l).map(|i| format!("h{i}")).collect();
    let seq_order: Vec<usize> = (0..l).collect();
    let mut sequence = header.join(",") + "\n";
    write_rows(&mut sequence, &trace.sequence, &seq_order);
    let mut time_aware = header.join(",") + "\n";
    write_rows(&mut time_aware, &trace.time_aware, &seq_order);
    [sentence, element, sequence, time_aware]
}

/// Writes the four attention CSVs of `inst` into `out_dir` (created if
/// missing). Disabled levels produce a header-only file.
pub fn export_attention(model: &Model, corpus: &Corpus, inst: &InstanceWindow, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let trace = model.trace(corpus, inst)?;
    fs::create_dir_all(out_dir)?;
    let bodies = attention_csvs(&trace, model.config().max_sentences);
    let mut paths = Vec::with_capacity(4);
    for (name, body) in ATTENTION_FILES.iter().zip(bodies) {
        let p = out_dir.join(name);
        fs::write(&p, body)?;
        paths.push(p);
    }
    Ok(paths)
}

/// Picks an instance: a plain index, or `random:<seed>`.
pub fn select_instance(selector: &str, count: usize) -> Result<usize> {
    if count == 0 {
        return Err(Error::Data("there are no instances to select from".into()));
    }
    if let Some(seed) = selector.strip_prefix("random:") {
        let seed: u64 = seed
            .parse()
            .map_err(|_| Error::Config(format!("`{selector}`: seed must be a non-negative integer")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        return Ok(rand::Rng::gen_range(&mut rng, 0..count));
    }
    let idx: usize = selector
        .parse()
        .map_err(|_| Error::Config(format!("instance selector `{selector}` is neither an index nor random:<seed>")))?;
    if idx >= count {
        return Err(Error::Config(format!("instance index {idx} out of range, valid indices are 0..={}", count - 1)));
    }
    Ok(idx)
}
