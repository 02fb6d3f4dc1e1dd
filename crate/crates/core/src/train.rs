//! Training loop with dynamic or uniform negatives, per-epoch evaluation,
//! best-checkpoint selection and ablation grids.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, EpochRecord, Hardness};
use crate::config::{Layers, RunConfig};
use crate::data::{Dataset, InstanceWindow};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsTable};
use crate::model::{Model, ModelConfig};
use crate::sampling::{dns_score, dns_select, uniform_sample_with};
use crate::tensor::{adam_step, AdamConfig, AdamState, Gradients, Graph, Tensor};
use crate::time_sequence::TimeMode;

/// splitmix64 finalizer, used to derive independent seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

const EVAL_STREAM: u64 = 0xE7A1;
const SHUFFLE_STREAM: u64 = 0x5107;
const SAMPLE_STREAM: u64 = 0x5A3B;
const DROPOUT_STREAM: u64 = 0xD209;

/// Seed of the evaluation negatives; depends only on the run seed so every
/// variant of an ablation sees the same lists.
pub fn eval_seed(seed: u64) -> u64 {
    mix_seed(&[seed, EVAL_STREAM])
}

/// Loss and negative hardness of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// Mean binary cross-entropy per labeled sample.
    pub loss: f64,
    pub hardness: Option<Hardness>,
}

pub struct Trainer<'d> {
    pub run: RunConfig,
    pub dataset: &'d Dataset,
    pub model: Model,
    adam: AdamState,
    pub epoch: usize,
}

impl<'d> Trainer<'d> {
    pub fn new(run: RunConfig, dataset: &'d Dataset) -> Result<Self> {
        run.validate()?;
        let max_clicked = dataset.clicked.iter().map(|c| c.len()).max().unwrap_or(0);
        let open = dataset.corpus.num_news().saturating_sub(max_clicked);
        let needed = if run.dns.enabled { run.dns.pool_size } else { run.dns.k };
        if needed > open {
            return Err(Error::Config(format!(
                "{needed} negatives per instance requested but some user leaves only {open} unclicked articles"
            )));
        }
        if run.eval_negatives > open {
            return Err(Error::Config(format!(
                "eval_negatives = {} but some user leaves only {open} unclicked articles",
                run.eval_negatives
            )));
        }
        let model = Model::new(ModelConfig::new(&run, &dataset.corpus), run.seed)?;
        let adam = AdamState::new(
            &model.store,
            AdamConfig {
                lr: run.lr,
                weight_decay: run.weight_decay,
                ..Default::default()
            },
        );
        Ok(Trainer {
            run,
            dataset,
            model,
            adam,
            epoch: 0,
        })
    }

    /// Training instances per optimizer step: `batch_size` counts labeled
    /// samples, each instance contributing one positive and `k` negatives.
    pub fn instances_per_step(&self) -> usize {
        (self.run.batch_size / (1 + self.run.dns.k)).max(1)
    }

    /// Negatives for one instance, plus the mean selection score of the
    /// chosen and of uniformly drawn pool items when selection is dynamic.
    fn negatives(&self, inst: &InstanceWindow, rng: &mut ChaCha8Rng, reps: &mut HashMap<usize, Vec<f64>>) -> Result<(Vec<usize>, Option<(f64, f64)>)> {
        let clicked = &self.dataset.clicked[inst.user];
        let n = self.dataset.corpus.num_news();
        let k = self.run.dns.k;
        if !self.run.dns.enabled {
            return Ok((uniform_sample_with(rng, n, clicked, k)?, None));
        }
        let pool = uniform_sample_with(rng, n, clicked, self.run.dns.pool_size)?;
        let model = &self.model;
        let corpus = &self.dataset.corpus;
        let mut project = |j: usize| -> Vec<f64> {
            reps.entry(j)
                .or_insert_with(|| model.dns_project(&model.candidate_rep(&corpus.news[j], j)))
                .clone()
        };
        let y = project(inst.candidate.0);
        let d = y.len();
        let mut x = vec![0.0; d * pool.len()];
        for (c, &j) in pool.iter().enumerate() {
            for (r, v) in project(j).into_iter().enumerate() {
                x[r * pool.len() + c] = v;
            }
        }
        let x = Tensor::matrix(d, pool.len(), x)?;
        let scores = dns_score(&y, &x, &model.dns_params())?;
        let chosen = dns_select(&scores, k, &Default::default())?;
        let uniform = uniform_sample_with(rng, pool.len(), &Default::default(), k)?;
        let mean = |idx: &[usize]| idx.iter().map(|&i| scores[i]).sum::<f64>() / idx.len() as f64;
        let hardness = (mean(&chosen), mean(&uniform));
        Ok((chosen.into_iter().map(|i| pool[i]).collect(), Some(hardness)))
    }

    /// One pass over the shuffled training split.
    pub fn train_epoch(&mut self) -> Result<EpochStats> {
        let epoch = self.epoch as u64 + 1;
        let seed = self.run.seed;
        let train = &self.dataset.split.train;
        if train.is_empty() {
            return Err(Error::Data("the training split is empty".into()));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, SHUFFLE_STREAM, epoch])));
        let per_step = self.instances_per_step();
        let mut loss_sum = 0.0;
        let mut samples = 0usize;
        let mut hard = (0.0, 0.0, 0usize);
        for (step, batch) in order.chunks(per_step).enumerate() {
            let mut grads = Gradients::zeros_for_trainable(&self.model.store);
            let mut reps = HashMap::new();
            for &i in batch {
                let inst = &train[i];
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, SAMPLE_STREAM, epoch, i as u64]));
                let (negs, h) = self.negatives(inst, &mut rng, &mut reps)?;
                if let Some((s, u)) = h {
                    hard.0 += s;
                    hard.1 += u;
                    hard.2 += 1;
                }
                let mut cands = vec![inst.candidate.0];
                cands.extend(negs);
                let mut labels = vec![0.0; cands.len()];
                labels[0] = 1.0;
                let dropout_seed = mix_seed(&[seed, DROPOUT_STREAM, epoch, step as u64, i as u64]);
                let mut g = Graph::new(&self.model.store, true, dropout_seed);
                let logits = self.model.forward(&mut g, &self.dataset.corpus, inst, &cands)?;
                let loss = g.bce_with_logits(logits, &labels)?;
                let value = g.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::NonFinite("training loss"));
                }
                loss_sum += value;
                samples += cands.len();
                g.backward_into(loss, &mut grads)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            adam_step(&mut self.model.store, &grads, &mut self.adam)?;
        }
        self.epoch += 1;
        Ok(EpochStats {
            loss: loss_sum / samples as f64,
            hardness: (hard.2 > 0).then(|| Hardness {
                selected: hard.0 / hard.2 as f64,
                uniform: hard.1 / hard.2 as f64,
            }),
        })
    }

    pub fn evaluate_on(&self, instances: &[InstanceWindow]) -> Result<MetricsTable> {
        evaluate(&self.model, instances, self.dataset, self.run.eval_negatives, eval_seed(self.run.seed))
    }

    pub fn evaluate_test(&self) -> Result<MetricsTable> {
        self.evaluate_on(&self.dataset.split.test)
    }

    pub fn checkpoint(&self, history: Vec<EpochRecord>) -> Checkpoint {
        Checkpoint {
            config: self.run.clone(),
            epoch: self.epoch,
            history,
            store: self.model.store.clone(),
        }
    }
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best epoch (the initialization when no epoch ran).
    pub best: Checkpoint,
    /// Test metrics of the best checkpoint.
    pub metrics: MetricsTable,
    pub history: Vec<EpochRecord>,
}

/// Trains for `run.epochs`, evaluating the test split after every epoch
/// and keeping the parameters with the best `run.best_by` metric (the
/// earliest on ties). Each record is passed to `on_epoch` as it completes.
pub fn train(run: &RunConfig, dataset: &Dataset, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(run.clone(), dataset)?;
    let mut history = Vec::with_capacity(run.epochs);
    let mut best: Option<(f64, Checkpoint, MetricsTable)> = None;
    for _ in 0..run.epochs {
        let stats = trainer.train_epoch()?;
        let test = trainer.evaluate_test()?;
        let record = EpochRecord {
            epoch: trainer.epoch,
            train_loss: stats.loss,
            test,
            hardness: stats.hardness,
        };
        on_epoch(&record);
        history.push(record);
        let score = test.select(run.best_by);
        if best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, trainer.checkpoint(Vec::new()), test));
        }
    }
    let (mut ckpt, metrics) = match best {
        Some((_, c, m)) => (c, m),
        None => (trainer.checkpoint(Vec::new()), trainer.evaluate_test()?),
    };
    ckpt.history = history.clone();
    Ok(TrainOutcome {
        best: ckpt,
        metrics,
        history,
    })
}

/// Loads the dataset named by the config's paths.
pub fn load_dataset(run: &RunConfig) -> Result<Dataset> {
    let need = |p: &Option<PathBuf>, key: &str| -> Result<PathBuf> {
        p.clone().ok_or_else(|| Error::Config(format!("`{key}` path is not set")))
    };
    let interactions = need(&run.interactions, "interactions")?;
    let news = need(&run.news, "news")?;
    Dataset::load(&interactions, &news, run.format, run.history_len, run.min_interactions)
}

/// Metrics log written next to a checkpoint.
pub fn metrics_log_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".metrics.jsonl");
    checkpoint.with_file_name(name)
}

pub fn record_json(r: &EpochRecord) -> serde_json::Value {
    let mut v = serde_json::json!({
        "epoch": r.epoch,
        "train_loss": r.train_loss,
        "test": r.test.to_json(),
    });
    if let Some(h) = r.hardness {
        v["hardness"] = serde_json::json!({"selected": h.selected, "uniform": h.uniform});
    }
    v
}

/// Trains on `dataset`, writes the best checkpoint to `run.output` and
/// the per-epoch metrics log next to it, reporting progress on `log`.
pub fn cmd_train(run: &RunConfig, dataset: &Dataset, log: &mut dyn Write) -> Result<TrainOutcome> {
    run.validate()?;
    let output = run
        .output
        .clone()
        .ok_or_else(|| Error::Config("`output` checkpoint path is not set".into()))?;
    writeln!(
        log,
        "{} users, {} articles, {} train / {} test instances",
        dataset.corpus.num_users(),
        dataset.corpus.num_news(),
        dataset.split.train.len(),
        dataset.split.test.len()
    )?;
    let mut io_err = None;
    let outcome = train(run, dataset, |r| {
        let mut line = format!(
            "epoch {:>3}  loss {:.6}  hr@10 {:.4}  ndcg@10 {:.4}",
            r.epoch,
            r.train_loss,
            r.test.hr_at(10),
            r.test.ndcg_at(10)
        );
        if let Some(h) = r.hardness {
            line.push_str(&format!("  negatives {:.4} vs uniform {:.4}", h.selected, h.uniform));
        }
        if let Err(e) = writeln!(log, "{line}") {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    outcome.best.save(&output)?;
    let mut body = String::new();
    for r in &outcome.history {
        body.push_str(&record_json(r).to_string());
        body.push('\n');
    }
    let log_path = metrics_log_path(&output);
    let tmp = log_path.with_extension("jsonl.tmp");
    std::fs::write(&tmp, body)?;
    std::fs::rename(&tmp, &log_path)?;
    Ok(outcome)
}

/// One configuration of an ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub time_mode: TimeMode,
    pub layers: Layers,
    pub dns: bool,
}

impl Variant {
    pub fn apply(&self, run: &RunConfig) -> RunConfig {
        let mut r = run.clone();
        r.time_mode = self.time_mode;
        r.layers = self.layers;
        r.dns.enabled = self.dns;
        r
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.time_mode, self.layers, if self.dns { "dns" } else { "uniform" })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    /// `time_mode:layers:dns|uniform`, e.g. `both:SEN:dns`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let [mode, layers, dns] = parts[..] else {
            return Err(Error::Config(format!("variant `{s}` is not time_mode:layers:dns|uniform")));
        };
        let dns = match dns {
            "dns" => true,
            "uniform" => false,
            other => return Err(Error::Config(format!("variant `{s}`: `{other}` is neither dns nor uniform"))),
        };
        Ok(Variant {
            time_mode: mode.parse()?,
            layers: layers.parse()?,
            dns,
        })
    }
}

/// Named grids, or a comma-separated list of variants.
pub fn parse_grid(spec: &str, base: &RunConfig) -> Result<Vec<Variant>> {
    let v = |m: TimeMode, l: Layers, d: bool| Variant {
        time_mode: m,
        layers: l,
        dns: d,
    };
    let (mode, layers, dns) = (base.time_mode, base.layers, base.dns.enabled);
    let grid = match spec.trim() {
        "time" => TimeMode::ALL.iter().map(|&m| v(m, layers, dns)).collect(),
        "layers" => ["S", "E", "N", "SEN"]
            .iter()
            .map(|l| Ok(v(mode, l.parse()?, dns)))
            .collect::<Result<Vec<_>>>()?,
        "dns" => vec![v(mode, layers, true), v(mode, layers, false)],
        list => list.split(',').map(str::parse).collect::<Result<Vec<_>>>()?,
    };
    if grid.is_empty() {
        return Err(Error::Config("empty ablation grid".into()));
    }
    Ok(grid)
}

/// Trains every variant on the same data with the same seed.
pub fn cmd_ablate(run: &RunConfig, dataset: &Dataset, grid: &[Variant], log: &mut dyn Write) -> Result<Vec<(Variant, MetricsTable)>> {
    run.validate()?;
    let mut rows = Vec::with_capacity(grid.len());
    for v in grid {
        let cfg = v.apply(run);
        writeln!(log, "variant {v}")?;
        let outcome = train(&cfg, dataset, |_| {})?;
        rows.push((*v, outcome.metrics));
    }
    Ok(rows)
}

/// Comparison table of an ablation run.
pub fn ablation_table(rows: &[(Variant, MetricsTable)]) -> String {
    let mut s = format!(
        "{:<22}{:>8}{:>8}{:>8}{:>9}{:>9}{:>9}\n",
        "variant", "HR@1", "HR@5", "HR@10", "NDCG@1", "NDCG@5", "NDCG@10"
    );
    for (v, m) in rows {
        s.push_str(&format!(
            "{:<22}{:>8.4}{:>8.4}{:>8.4}{:>9.4}{:>9.4}{:>9.4}\n",
            v.to_string(),
            m.hr[0],
            m.hr[1],
            m.hr[2],
            m.ndcg[0],
            m.ndcg[1],
            m.ndcg[2]
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate, SyntheticConfig};

    fn tiny() -> (Dataset, RunConfig) {
        let d = generate(&SyntheticConfig {
            users: 5,
            news: 60,
            interactions_per_user: 16,
            vocab: 150,
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        let run = RunConfig {
            d: 8,
            d_prime: 16,
            history_len: 4,
            max_sentences: 4,
            batch_size: 20,
            epochs: 2,
            eval_negatives: 20,
            dns: crate::config::DnsConfig {
                enabled: true,
                pool_size: 16,
                k: 3,
            },
            ..Default::default()
        };
        let ds = Dataset::from_parts(d.interactions, d.news, run.history_len, 15).unwrap();
        (ds, run)
    }

    #[test]
    fn seeds_are_distinct() {
        assert_ne!(mix_seed(&[1, 2]), mix_seed(&[2, 1]));
        assert_ne!(mix_seed(&[1]), mix_seed(&[1, 0]));
        assert_eq!(mix_seed(&[7, 8]), mix_seed(&[7, 8]));
    }

    #[test]
    fn training_is_deterministic() {
        let (ds, run) = tiny();
        let a = train(&run, &ds, |_| {}).unwrap();
        let b = train(&run, &ds, |_| {}).unwrap();
        assert_eq!(a.best.to_bytes(), b.best.to_bytes());
        assert_eq!(a.history.len(), 2);
        assert!(a.history.iter().all(|r| r.hardness.is_some() && r.train_loss.is_finite()));
    }

    #[test]
    fn zero_epochs_keeps_the_initialization() {
        let (ds, mut run) = tiny();
        run.epochs = 0;
        let out = train(&run, &ds, |_| {}).unwrap();
        let init = Model::new(ModelConfig::new(&run, &ds.corpus), run.seed).unwrap();
        assert_eq!(out.best.store, init.store);
        assert!(out.history.is_empty());
        assert_eq!(out.metrics.instances, ds.split.test.len());
    }

    #[test]
    fn negatives_avoid_clicks() {
        let (ds, run) = tiny();
        for dns in [true, false] {
            let mut r = run.clone();
            r.dns.enabled = dns;
            let t = Trainer::new(r, &ds).unwrap();
            let mut reps = HashMap::new();
            for (i, inst) in ds.split.train.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
                let (negs, h) = t.negatives(inst, &mut rng, &mut reps).unwrap();
                assert_eq!(negs.len(), 3);
                assert!(negs.iter().all(|n| !ds.clicked[inst.user].contains(n)));
                assert_eq!(h.is_some(), dns);
                if let Some((s, u)) = h {
                    assert!(s >= u);
                }
            }
        }
    }

    #[test]
    fn infeasible_pool_is_a_config_error() {
        let (ds, mut run) = tiny();
        run.dns.pool_size = 59;
        assert!(matches!(Trainer::new(run, &ds), Err(Error::Config(_))));
    }

    #[test]
    fn grids() {
        let base = RunConfig::default();
        assert_eq!(parse_grid("time", &base).unwrap().len(), 4);
        assert_eq!(parse_grid("layers", &base).unwrap()[3].layers, Layers::ALL);
        let g = parse_grid("both:SEN:dns, none:SE:uniform", &base).unwrap();
        assert_eq!(g[1].to_string(), "none:SE:uniform");
        assert!(parse_grid("both:SEN", &base).is_err());
        assert!(parse_grid("both:SEN:maybe", &base).is_err());
    }
}
