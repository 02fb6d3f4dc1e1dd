//! Synthetic click logs with a tunable time-of-day signal.
//!
//! Every article belongs to one topic and draws most of its words from that
//! topic's slice of the vocabulary. Every user has a day topic and a night
//! topic. With probability `alpha` a click at a daytime hour (06:00 to
//! 17:59 UTC) goes to an unread article of the day topic, and a night click
//! to the night topic; otherwise the article is drawn uniformly from the
//! unread ones. With `alpha = 0` the hour of a click carries no information.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_interactions, write_news, Interaction, NewsArticle};
use crate::element_attention::ELEMENT_COUNT;
use crate::error::{Error, Result};

pub const INTERACTIONS_FILE: &str = "interactions.tsv";
pub const NEWS_FILE: &str = "news.jsonl";
pub const TRUTH_FILE: &str = "truth.json";

/// Daytime hours are `DAY_START..DAY_END` (UTC).
pub const DAY_START: u32 = 6;
pub const DAY_END: u32 = 18;

const MIN_GAP: f64 = 60.0;
const MAX_GAP: f64 = 7.0 * 86_400.0;
/// 2020-09-13T12:26:40Z
const EPOCH_BASE: i64 = 1_600_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub users: usize,
    pub news: usize,
    pub interactions_per_user: usize,
    pub vocab: usize,
    pub alpha: f64,
    pub topics: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            users: 50,
            news: 200,
            interactions_per_user: 20,
            vocab: 1000,
            alpha: 0.9,
            topics: 8,
            seed: 1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.users == 0 || self.news == 0 || self.vocab == 0 {
            return bad("users, news and vocab must be positive".into());
        }
        if self.interactions_per_user < 16 {
            return bad(format!("interactions per user must be at least 16, got {}", self.interactions_per_user));
        }
        if self.interactions_per_user > self.news {
            return bad(format!(
                "{} clicks per user cannot be distinct with only {} articles",
                self.interactions_per_user, self.news
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if self.topics < 2 || self.topics > self.news {
            return bad(format!("topics must be in 2..={}, got {}", self.news, self.topics));
        }
        if self.vocab < 8 * (self.topics + 1) {
            return bad(format!("vocab of {} is too small for {} topics", self.vocab, self.topics));
        }
        Ok(())
    }

    fn common_words(&self) -> usize {
        self.vocab / (self.topics + 1)
    }

    /// Word-id range owned by `topic`.
    pub fn topic_words(&self, topic: usize) -> std::ops::Range<usize> {
        let common = self.common_words();
        let per = (self.vocab - common) / self.topics;
        let lo = common + topic * per;
        lo..lo + per
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserTruth {
    pub user_id: String,
    pub day_topic: usize,
    pub night_topic: usize,
}

/// What the generator decided, for checking models against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SyntheticConfig,
    pub day_hours: [u32; 2],
    pub users: Vec<UserTruth>,
    /// Topic of each article, by news id.
    pub news_topics: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub interactions: Vec<Interaction>,
    pub news: BTreeMap<String, NewsArticle>,
    pub truth: GroundTruth,
}

/// Maps whitespace-separated words to dense ids, first come first served.
#[derive(Debug, Clone, Default)]
pub struct Tokenizer {
    ids: HashMap<String, u32>,
    words: Vec<String>,
}

impl Tokenizer {
    pub fn encode(&mut self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| match self.ids.get(w) {
                Some(&id) => id,
                None => {
                    let id = self.words.len() as u32;
                    self.ids.insert(w.to_string(), id);
                    self.words.push(w.to_string());
                    id
                }
            })
            .collect()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

fn id_width(n: usize) -> usize {
    n.to_string().len().max(4)
}

fn is_day(ts: i64) -> bool {
    let hour = (ts.rem_euclid(86_400) / 3600) as u32;
    (DAY_START..DAY_END).contains(&hour)
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tok = Tokenizer::default();
    // register every word up front so ids equal word numbers
    let all_words: String = (0..cfg.vocab).map(|i| format!("w{i} ")).collect();
    tok.encode(&all_words);

    let common = 0..cfg.common_words();
    let nw = id_width(cfg.news);
    let mut news = BTreeMap::new();
    let mut news_topics = BTreeMap::new();
    let mut by_topic: Vec<Vec<usize>> = vec![Vec::new(); cfg.topics];
    let mut ids = Vec::with_capacity(cfg.news);
    for j in 0..cfg.news {
        let topic = j % cfg.topics;
        let own = cfg.topic_words(topic);
        let mut text = |rng: &mut ChaCha8Rng, n: usize, topical: f64| -> Vec<u32> {
            let words: Vec<String> = (0..n)
                .map(|_| {
                    let range = if rng.gen_bool(topical) { own.clone() } else { common.clone() };
                    format!("w{}", rng.gen_range(range))
                })
                .collect();
            tok.encode(&words.join(" "))
        };
        let n_sent = rng.gen_range(3..=6);
        let sentences = (0..n_sent)
            .map(|_| {
                let len = rng.gen_range(5..=10);
                text(&mut rng, len, 0.8)
            })
            .collect();
        let mut elements: [Vec<u32>; ELEMENT_COUNT] = Default::default();
        for (slot, el) in elements.iter_mut().enumerate() {
            // person, organization and location are sometimes not found
            let optional = matches!(slot, 0 | 1 | 3);
            if optional && rng.gen_bool(0.15) {
                continue;
            }
            let len = if slot == 4 { rng.gen_range(2..=3) } else { rng.gen_range(1..=2) };
            *el = text(&mut rng, len, 1.0);
        }
        let id = format!("n{:0nw$}", j + 1);
        news.insert(
            id.clone(),
            NewsArticle {
                news_id: id.clone(),
                sentences,
                elements,
            },
        );
        news_topics.insert(id.clone(), topic);
        by_topic[topic].push(j);
        ids.push(id);
    }

    let uw = id_width(cfg.users);
    let mut users = Vec::with_capacity(cfg.users);
    let mut interactions = Vec::with_capacity(cfg.users * cfg.interactions_per_user);
    for u in 0..cfg.users {
        let user_id = format!("u{:0uw$}", u + 1);
        let day_topic = rng.gen_range(0..cfg.topics);
        let night_topic = (day_topic + rng.gen_range(1..cfg.topics)) % cfg.topics;
        let mut ts = EPOCH_BASE + rng.gen_range(0..14 * 86_400);
        let mut read = vec![false; cfg.news];
        for _ in 0..cfg.interactions_per_user {
            let gap = (MIN_GAP.ln() + rng.gen::<f64>() * (MAX_GAP.ln() - MIN_GAP.ln())).exp();
            ts += gap.round() as i64;
            let mut pick = None;
            if rng.gen_bool(cfg.alpha) {
                let topic = if is_day(ts) { day_topic } else { night_topic };
                let unread: Vec<usize> = by_topic[topic].iter().copied().filter(|&j| !read[j]).collect();
                pick = unread.choose(&mut rng).copied();
            }
            let j = match pick {
                Some(j) => j,
                None => {
                    let unread: Vec<usize> = (0..cfg.news).filter(|&j| !read[j]).collect();
                    *unread.choose(&mut rng).expect("validated: enough articles")
                }
            };
            read[j] = true;
            interactions.push(Interaction {
                user_id: user_id.clone(),
                news_id: ids[j].clone(),
                ts,
            });
        }
        users.push(UserTruth {
            user_id,
            day_topic,
            night_topic,
        });
    }

    Ok(SyntheticData {
        interactions,
        news,
        truth: GroundTruth {
            config: cfg.clone(),
            day_hours: [DAY_START, DAY_END],
            users,
            news_topics,
        },
    })
}

impl SyntheticData {
    /// Writes the interaction TSV, news JSON lines and ground-truth JSON.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_interactions(&dir.join(INTERACTIONS_FILE), &self.interactions)?;
        write_news(&dir.join(NEWS_FILE), self.news.values())?;
        let truth = serde_json::to_string_pretty(&self.truth).map_err(|e| Error::Data(e.to_string()))?;
        fs::write(dir.join(TRUTH_FILE), truth + "\n")?;
        Ok(())
    }
}

pub fn read_truth(path: &Path) -> Result<GroundTruth> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })
}
