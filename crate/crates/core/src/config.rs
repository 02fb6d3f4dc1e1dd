//! Flat `key = value` run configuration.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::InteractionFormat;
use crate::error::{Error, Result};
use crate::time_sequence::TimeMode;

/// Environment variable that overrides `seed`.
pub const SEED_ENV: &str = "DHAN_SEED";

/// Which attention levels are enabled: sentence, element, sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Layers {
    pub sentence: bool,
    pub element: bool,
    pub sequence: bool,
}

impl Layers {
    pub const ALL: Layers = Layers {
        sentence: true,
        element: true,
        sequence: true,
    };
}

impl Default for Layers {
    fn default() -> Self {
        Layers::ALL
    }
}

impl fmt::Display for Layers {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (on, c) in [(self.sentence, 'S'), (self.element, 'E'), (self.sequence, 'N')] {
            if on {
                f.write_char(c)?;
            }
        }
        Ok(())
    }
}

impl FromStr for Layers {
    type Err = Error;

    /// Letters `S`, `E`, `N` in any order, optionally separated by `+`, `,`
    /// or spaces.
    fn from_str(s: &str) -> Result<Self> {
        let mut l = Layers {
            sentence: false,
            element: false,
            sequence: false,
        };
        for c in s.chars().filter(|c| !matches!(c, '+' | ',' | ' ')) {
            let slot = match c.to_ascii_uppercase() {
                'S' => &mut l.sentence,
                'E' => &mut l.element,
                'N' => &mut l.sequence,
                _ => return Err(Error::Config(format!("layers `{s}`: unknown layer `{c}` (use S, E, N)"))),
            };
            if *slot {
                return Err(Error::Config(format!("layers `{s}`: `{c}` listed twice")));
            }
            *slot = true;
        }
        if !(l.sentence || l.element || l.sequence) {
            return Err(Error::Config("layers must name at least one of S, E, N".into()));
        }
        Ok(l)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DnsConfig {
    pub enabled: bool,
    pub pool_size: usize,
    /// Negatives per positive, for both dynamic and uniform sampling.
    pub k: usize,
}

/// Metric used to pick the reported checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BestBy {
    pub ndcg: bool,
    pub n: usize,
}

impl fmt::Display for BestBy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", if self.ndcg { "ndcg" } else { "hr" }, self.n)
    }
}

impl FromStr for BestBy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let err = || Error::Config(format!("best_by `{s}`: expected hr@N or ndcg@N with N in 1, 5, 10"));
        let (kind, n) = s.split_once('@').ok_or_else(err)?;
        let ndcg = match kind {
            "ndcg" => true,
            "hr" => false,
            _ => return Err(err()),
        };
        let n: usize = n.parse().map_err(|_| err())?;
        if ![1, 5, 10].contains(&n) {
            return Err(err());
        }
        Ok(BestBy { ndcg, n })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub d: usize,
    pub d_prime: usize,
    /// History length `L`.
    pub history_len: usize,
    /// Sentences per article `K`.
    pub max_sentences: usize,
    pub lr: f64,
    /// Positive instances per optimizer step.
    pub batch_size: usize,
    pub weight_decay: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub seed: u64,
    pub time_mode: TimeMode,
    pub layers: Layers,
    pub heads: usize,
    pub dns: DnsConfig,
    pub interactions: Option<PathBuf>,
    pub news: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub format: InteractionFormat,
    pub min_interactions: usize,
    pub eval_negatives: usize,
    pub min_year: i32,
    pub max_year: i32,
    pub best_by: BestBy,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            d: 64,
            d_prime: 256,
            history_len: 10,
            max_sentences: 20,
            lr: 1e-3,
            batch_size: 256,
            weight_decay: 1e-4,
            dropout: 0.2,
            epochs: 30,
            seed: 1,
            time_mode: TimeMode::Both,
            layers: Layers::ALL,
            heads: 1,
            dns: DnsConfig {
                enabled: true,
                pool_size: 128,
                k: 4,
            },
            interactions: None,
            news: None,
            output: None,
            format: InteractionFormat::Tsv,
            min_interactions: 15,
            eval_negatives: 99,
            min_year: 1970,
            max_year: 2069,
            best_by: BestBy { ndcg: true, n: 10 },
        }
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

impl RunConfig {
    pub const KEYS: [&'static str; 25] = [
        "d",
        "d_prime",
        "L",
        "K",
        "lr",
        "batch_size",
        "weight_decay",
        "dropout",
        "epochs",
        "seed",
        "time_mode",
        "layers",
        "heads",
        "dns.enabled",
        "dns.pool_size",
        "dns.k",
        "interactions",
        "news",
        "output",
        "format",
        "min_interactions",
        "eval_negatives",
        "min_year",
        "max_year",
        "best_by",
    ];

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "d" => self.d = num(key, v)?,
            "d_prime" => self.d_prime = num(key, v)?,
            "L" => self.history_len = num(key, v)?,
            "K" => self.max_sentences = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "weight_decay" => self.weight_decay = num(key, v)?,
            "dropout" => self.dropout = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "time_mode" => self.time_mode = v.parse()?,
            "layers" => self.layers = v.parse()?,
            "heads" => self.heads = num(key, v)?,
            "dns.enabled" => self.dns.enabled = boolean(key, v)?,
            "dns.pool_size" => self.dns.pool_size = num(key, v)?,
            "dns.k" => self.dns.k = num(key, v)?,
            "interactions" => self.interactions = Some(PathBuf::from(v)),
            "news" => self.news = Some(PathBuf::from(v)),
            "output" => self.output = Some(PathBuf::from(v)),
            "format" => self.format = v.parse()?,
            "min_interactions" => self.min_interactions = num(key, v)?,
            "eval_negatives" => self.eval_negatives = num(key, v)?,
            "min_year" => self.min_year = num(key, v)?,
            "max_year" => self.max_year = num(key, v)?,
            "best_by" => self.best_by = v.parse()?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key `{other}` (known keys: {})",
                    Self::KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Parses config text on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, e.to_string().trim_start_matches("config error: "))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Replaces the seed with `DHAN_SEED` when that variable is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.d_prime == 0 {
            return bad("d and d_prime must be positive".into());
        }
        if self.history_len == 0 || self.max_sentences == 0 {
            return bad("L and K must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if ![1, 2, 4, 8].contains(&self.heads) {
            return bad(format!("heads must be 1, 2, 4 or 8, got {}", self.heads));
        }
        if !self.d.is_multiple_of(self.heads) {
            return bad(format!("d = {} is not divisible by heads = {}", self.d, self.heads));
        }
        if self.dns.k == 0 {
            return bad("dns.k must be at least 1".into());
        }
        if self.dns.pool_size < self.dns.k {
            return bad(format!("dns.pool_size ({}) must be at least dns.k ({})", self.dns.pool_size, self.dns.k));
        }
        if self.eval_negatives == 0 {
            return bad("eval_negatives must be positive".into());
        }
        if self.min_year > self.max_year {
            return bad(format!("min_year {} exceeds max_year {}", self.min_year, self.max_year));
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("d", self.d.to_string());
        kv("d_prime", self.d_prime.to_string());
        kv("L", self.history_len.to_string());
        kv("K", self.max_sentences.to_string());
        kv("lr", self.lr.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("dropout", self.dropout.to_string());
        kv("epochs", self.epochs.to_string());
        kv("seed", self.seed.to_string());
        kv("time_mode", self.time_mode.to_string());
        kv("layers", self.layers.to_string());
        kv("heads", self.heads.to_string());
        kv("dns.enabled", self.dns.enabled.to_string());
        kv("dns.pool_size", self.dns.pool_size.to_string());
        kv("dns.k", self.dns.k.to_string());
        for (k, p) in [("interactions", &self.interactions), ("news", &self.news), ("output", &self.output)] {
            if let Some(p) = p {
                kv(k, p.display().to_string());
            }
        }
        kv(
            "format",
            match self.format {
                InteractionFormat::Tsv => "tsv".into(),
                InteractionFormat::Adressa => "adressa".into(),
            },
        );
        kv("min_interactions", self.min_interactions.to_string());
        kv("eval_negatives", self.eval_negatives.to_string());
        kv("min_year", self.min_year.to_string());
        kv("max_year", self.max_year.to_string());
        kv("best_by", self.best_by.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!((c.d, c.d_prime, c.history_len, c.max_sentences), (64, 256, 10, 20));
        assert_eq!((c.lr, c.batch_size, c.weight_decay, c.dropout), (1e-3, 256, 1e-4, 0.2));
        assert_eq!((c.dns.enabled, c.dns.pool_size, c.dns.k), (true, 128, 4));
        assert_eq!((c.time_mode, c.layers, c.heads, c.epochs), (TimeMode::Both, Layers::ALL, 1, 30));
    }

    #[test]
    fn values_and_comments() {
        let c = RunConfig::parse("# tiny\nd = 8 # inline\nlayers = N\ntime_mode=none\n\ndns.enabled = false\nbest_by = hr@5\n").unwrap();
        assert_eq!(c.d, 8);
        assert_eq!(c.layers, Layers { sentence: false, element: false, sequence: true });
        assert_eq!(c.time_mode, TimeMode::None);
        assert!(!c.dns.enabled);
        assert_eq!(c.best_by, BestBy { ndcg: false, n: 5 });
    }

    #[test]
    fn errors() {
        for text in ["colour = blue", "d = -3", "d", "heads = 3", "heads = 8\nd = 12", "layers = SX", "dropout = 1", "dns.k = 200", "time_mode = later"] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
        let msg = RunConfig::parse("\n\nfoo = 1").unwrap_err().to_string();
        assert!(msg.contains("line 3") && msg.contains("foo"), "{msg}");
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.lr = 0.000123456789;
        c.layers = "E+N".parse().unwrap();
        c.interactions = Some("data/x.tsv".into());
        c.format = InteractionFormat::Adressa;
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn layer_spelling() {
        assert_eq!("S+E+N".parse::<Layers>().unwrap(), Layers::ALL);
        assert_eq!("nes".parse::<Layers>().unwrap(), Layers::ALL);
        assert_eq!(Layers::ALL.to_string(), "SEN");
        assert!("".parse::<Layers>().is_err());
        assert!("SS".parse::<Layers>().is_err());
    }
}
