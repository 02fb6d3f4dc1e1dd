use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Interaction, NewsArticle};
use crate::error::{Error, Result};

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    let f = File::open(path)?;
    Ok(BufReader::new(f).lines().enumerate().map(|(i, l)| (i + 1, l)))
}

fn sort_events(mut events: Vec<Interaction>) -> Vec<Interaction> {
    // stable, so equal timestamps keep input order
    events.sort_by(|a, b| a.user_id.cmp(&b.user_id).then(a.ts.cmp(&b.ts)));
    events
}

/// Tab-separated `user_id, news_id, epoch_seconds`; blank lines and lines
/// starting with `#` are skipped. Sorted by user, then timestamp.
pub fn parse_interactions(path: &Path) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    for (n, line) in lines(path)? {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(parse_err(path, n, format!("expected 3 tab-separated columns, found {}", cols.len())));
        }
        if cols[0].is_empty() || cols[1].is_empty() {
            return Err(parse_err(path, n, "empty user or news id"));
        }
        let ts: i64 = cols[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, n, format!("timestamp `{}` is not an integer", cols[2])))?;
        if ts < 0 {
            return Err(parse_err(path, n, format!("negative timestamp {ts}")));
        }
        out.push(Interaction {
            user_id: cols[0].to_string(),
            news_id: cols[1].to_string(),
            ts,
        });
    }
    Ok(sort_events(out))
}

#[derive(Deserialize)]
struct AdressaEvent {
    #[serde(rename = "userId")]
    user_id: String,
    id: Option<String>,
    time: i64,
}

/// One JSON event per line with `userId`, `id` and `time` (epoch seconds).
/// Events without an article `id` (front-page views) are skipped.
pub fn parse_adressa(path: &Path) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    for (n, line) in lines(path)? {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: AdressaEvent = serde_json::from_str(&line).map_err(|e| parse_err(path, n, e.to_string()))?;
        let Some(news_id) = ev.id.filter(|s| !s.is_empty()) else {
            continue;
        };
        if ev.time < 0 {
            return Err(parse_err(path, n, format!("negative timestamp {}", ev.time)));
        }
        out.push(Interaction {
            user_id: ev.user_id,
            news_id,
            ts: ev.time,
        });
    }
    Ok(sort_events(out))
}

#[derive(Serialize, Deserialize, Default)]
struct ElementsRecord {
    #[serde(default)]
    person: Vec<u32>,
    #[serde(default)]
    organization: Vec<u32>,
    #[serde(default)]
    time: Vec<u32>,
    #[serde(default)]
    location: Vec<u32>,
    #[serde(default)]
    keywords: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct NewsRecord {
    news_id: String,
    sentences: Vec<Vec<u32>>,
    #[serde(default)]
    elements: ElementsRecord,
}

/// JSON lines: `{"news_id", "sentences": [[ids]], "elements": {...}}`.
pub fn parse_news(path: &Path) -> Result<BTreeMap<String, NewsArticle>> {
    let mut out = BTreeMap::new();
    let mut first_seen: BTreeMap<String, usize> = BTreeMap::new();
    for (n, line) in lines(path)? {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: NewsRecord = serde_json::from_str(&line).map_err(|e| parse_err(path, n, e.to_string()))?;
        if let Some(prev) = first_seen.insert(rec.news_id.clone(), n) {
            return Err(parse_err(path, n, format!("duplicate news_id `{}` (first on line {prev})", rec.news_id)));
        }
        let e = rec.elements;
        out.insert(
            rec.news_id.clone(),
            NewsArticle {
                news_id: rec.news_id,
                sentences: rec.sentences,
                elements: [e.person, e.organization, e.time, e.location, e.keywords],
            },
        );
    }
    Ok(out)
}

pub fn write_interactions(path: &Path, events: &[Interaction]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in events {
        writeln!(w, "{}\t{}\t{}", e.user_id, e.news_id, e.ts)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_news<'a>(path: &Path, news: impl IntoIterator<Item = &'a NewsArticle>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for a in news {
        let [person, organization, time, location, keywords] = a.elements.clone();
        let rec = NewsRecord {
            news_id: a.news_id.clone(),
            sentences: a.sentences.clone(),
            elements: ElementsRecord {
                person,
                organization,
                time,
                location,
                keywords,
            },
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| Error::Data(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
