//! Interaction logs, news content, sliding-window instances and the
//! train/test split.

mod parse;
pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use crate::element_attention::ELEMENT_COUNT;
use crate::error::{Error, Result};

pub use parse::{parse_adressa, parse_interactions, parse_news, write_interactions, write_news};

/// One click.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub user_id: String,
    pub news_id: String,
    pub ts: i64,
}

/// Tokenized article: sentences and the five element word lists, in
/// [`ElementKind`](crate::element_attention::ElementKind) order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NewsArticle {
    pub news_id: String,
    pub sentences: Vec<Vec<u32>>,
    pub elements: [Vec<u32>; ELEMENT_COUNT],
}

/// A click index into [`Corpus::news`] with its timestamp.
pub type Click = (usize, i64);

/// `L` consecutive clicks followed by the clicked candidate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceWindow {
    pub user: usize,
    pub history: Vec<Click>,
    pub candidate: Click,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetSplit {
    pub train: Vec<InstanceWindow>,
    /// One per user, in user order.
    pub test: Vec<InstanceWindow>,
}

/// Articles (indexed in id order) and users (indexed in id order).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub news: Vec<NewsArticle>,
    pub users: Vec<String>,
    pub vocab_size: usize,
    news_index: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(news: BTreeMap<String, NewsArticle>, users: Vec<String>) -> Self {
        let news: Vec<NewsArticle> = news.into_values().collect();
        let news_index = news.iter().enumerate().map(|(i, a)| (a.news_id.clone(), i)).collect();
        let vocab_size = news
            .iter()
            .flat_map(|a| a.sentences.iter().chain(a.elements.iter()))
            .flatten()
            .max()
            .map_or(1, |&m| m as usize + 1);
        Corpus {
            news,
            users,
            vocab_size,
            news_index,
        }
    }

    pub fn news_idx(&self, id: &str) -> Option<usize> {
        self.news_index.get(id).copied()
    }

    pub fn num_news(&self) -> usize {
        self.news.len()
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }
}

/// Parsed, filtered and windowed data ready for training.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub corpus: Corpus,
    /// Per user, chronological clicks.
    pub sequences: Vec<Vec<Click>>,
    /// Per user, every clicked article.
    pub clicked: Vec<BTreeSet<usize>>,
    pub split: DatasetSplit,
}

/// Interaction file layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InteractionFormat {
    /// `user_id<TAB>news_id<TAB>epoch_seconds`
    Tsv,
    /// JSON events with `userId`, `id`, `time`.
    Adressa,
}

impl std::str::FromStr for InteractionFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(InteractionFormat::Tsv),
            "adressa" => Ok(InteractionFormat::Adressa),
            other => Err(Error::Config(format!("unknown interaction format `{other}` (expected tsv or adressa)"))),
        }
    }
}

impl Dataset {
    pub fn load(interactions: &Path, news: &Path, format: InteractionFormat, history_len: usize, min_interactions: usize) -> Result<Self> {
        let events = match format {
            InteractionFormat::Tsv => parse_interactions(interactions)?,
            InteractionFormat::Adressa => parse_adressa(interactions)?,
        };
        let news = parse_news(news)?;
        Self::from_parts(events, news, history_len, min_interactions)
    }

    /// Filters users, checks that every click refers to a known article,
    /// then windows and splits.
    pub fn from_parts(events: Vec<Interaction>, news: BTreeMap<String, NewsArticle>, history_len: usize, min_interactions: usize) -> Result<Self> {
        if history_len == 0 {
            return Err(Error::Config("history length L must be at least 1".into()));
        }
        let events = filter_min_interactions(events, min_interactions);
        let mut by_user: BTreeMap<String, Vec<(String, i64)>> = BTreeMap::new();
        for e in events {
            by_user.entry(e.user_id).or_default().push((e.news_id, e.ts));
        }
        let users: Vec<String> = by_user.keys().cloned().collect();
        let corpus = Corpus::new(news, users);

        let mut sequences = Vec::with_capacity(by_user.len());
        for (user, clicks) in &by_user {
            let mut seq = Vec::with_capacity(clicks.len());
            for (news_id, ts) in clicks {
                let idx = corpus
                    .news_idx(news_id)
                    .ok_or_else(|| Error::Data(format!("user `{user}` clicked unknown article `{news_id}`")))?;
                seq.push((idx, *ts));
            }
            // stable: equal timestamps keep input order
            seq.sort_by_key(|c| c.1);
            sequences.push(seq);
        }
        let clicked = sequences.iter().map(|s| s.iter().map(|c| c.0).collect()).collect();
        let windows: Vec<Vec<InstanceWindow>> = sequences
            .iter()
            .enumerate()
            .map(|(u, s)| build_windows(u, s, history_len))
            .collect();
        let split = split_train_test(windows);
        if split.test.is_empty() {
            return Err(Error::Data(format!(
                "no user has more than {history_len} clicks after filtering; nothing to train on"
            )));
        }
        Ok(Dataset {
            corpus,
            sequences,
            clicked,
            split,
        })
    }
}

/// Drops every interaction of users with fewer than `min_count` clicks.
pub fn filter_min_interactions(events: Vec<Interaction>, min_count: usize) -> Vec<Interaction> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for e in &events {
        *counts.entry(e.user_id.as_str()).or_default() += 1;
    }
    let keep: BTreeSet<String> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_count)
        .map(|(u, _)| u.to_string())
        .collect();
    events.into_iter().filter(|e| keep.contains(&e.user_id)).collect()
}

/// Stride-1 windows of `history_len + 1` clicks; empty when the sequence is
/// too short.
pub fn build_windows(user: usize, seq: &[Click], history_len: usize) -> Vec<InstanceWindow> {
    if seq.len() <= history_len {
        return Vec::new();
    }
    (0..seq.len() - history_len)
        .map(|s| InstanceWindow {
            user,
            history: seq[s..s + history_len].to_vec(),
            candidate: seq[s + history_len],
            label: 1,
        })
        .collect()
}

/// The last window of each user is held out for testing.
pub fn split_train_test(per_user: Vec<Vec<InstanceWindow>>) -> DatasetSplit {
    let mut split = DatasetSplit::default();
    for mut w in per_user {
        if let Some(last) = w.pop() {
            split.train.extend(w);
            split.test.push(last);
        }
    }
    split
}

/// Seconds since the previous history click; the first entry is 0.
pub fn history_intervals(history: &[Click]) -> Result<Vec<i64>> {
    let mut out = Vec::with_capacity(history.len());
    for i in 0..history.len() {
        let dt = if i == 0 { 0 } else { history[i].1 - history[i - 1].1 };
        if dt < 0 {
            return Err(Error::Data("history timestamps are not in click order".into()));
        }
        out.push(dt);
    }
    Ok(out)
}
