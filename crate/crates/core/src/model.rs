//! The full hierarchical click model: parameters, forward pass and
//! attention traces.
//!
//! Per (history article, candidate) pair the sentence and element levels
//! produce candidate-aware content and element vectors. Together with the
//! article id embedding they form `x' = [content, element, id]`. Time
//! embeddings are fused in, every position is mapped to `d` by `W_c`, one
//! time-aware Transformer block mixes the positions, two more blocks
//! summarize the history into `p`, and a two-layer head scores
//! `[p, x*, u]`.
//!
//! Several candidates for the same history are scored in one graph: their
//! sequences are stacked row-wise and every projection that does not
//! depend on the candidate is computed once.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::attend;
use crate::config::{Layers, RunConfig};
use crate::data::{history_intervals, Corpus, InstanceWindow, NewsArticle};
use crate::element_attention::ELEMENT_COUNT;
use crate::embeddings::{absolute_time_embed, init_uniform, relative_time_embed, AbsoluteTimeTables, EmbeddingTable, RELATIVE_BUCKETS};
use crate::error::{Error, Result};
use crate::ranker::{predict_click, summarize_history, HeadParams};
use crate::sentence_attention::expand_weights;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::time_sequence::{transformer_block, BlockParams, TimeMode};

/// Candidates scored per graph at inference time.
pub const SCORE_CHUNK: usize = 20;

/// Everything that fixes the parameter shapes and the forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub d_prime: usize,
    pub history_len: usize,
    pub max_sentences: usize,
    pub heads: usize,
    pub dropout: f64,
    pub time_mode: TimeMode,
    pub layers: Layers,
    pub min_year: i32,
    pub max_year: i32,
    pub num_users: usize,
    pub num_news: usize,
    pub vocab_size: usize,
    pub dns_pool: usize,
}

impl ModelConfig {
    pub fn new(run: &RunConfig, corpus: &Corpus) -> Self {
        ModelConfig {
            d: run.d,
            d_prime: run.d_prime,
            history_len: run.history_len,
            max_sentences: run.max_sentences,
            heads: run.heads,
            dropout: run.dropout,
            time_mode: run.time_mode,
            layers: run.layers,
            min_year: run.min_year,
            max_year: run.max_year,
            num_users: corpus.num_users(),
            num_news: corpus.num_news(),
            vocab_size: corpus.vocab_size,
            dns_pool: run.dns.pool_size,
        }
    }

    /// Recovers table sizes from a parameter snapshot.
    pub fn from_store(run: &RunConfig, store: &ParamStore) -> Result<Self> {
        let rows = |name: &str| -> Result<usize> {
            store
                .by_name(name)
                .map(|t| t.shape()[0])
                .ok_or_else(|| Error::Checkpoint(format!("parameter `{name}` missing")))
        };
        Ok(ModelConfig {
            d: run.d,
            d_prime: run.d_prime,
            history_len: run.history_len,
            max_sentences: run.max_sentences,
            heads: run.heads,
            dropout: run.dropout,
            time_mode: run.time_mode,
            layers: run.layers,
            min_year: run.min_year,
            max_year: run.max_year,
            num_users: rows("user_emb")?,
            num_news: rows("news_emb")?,
            vocab_size: rows("word_emb")?,
            dns_pool: rows("dns.b")?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wa: ParamId,
    wb: ParamId,
    ln_gamma: ParamId,
    ln_beta: ParamId,
}

impl BlockIds {
    const PARTS: [&'static str; 7] = ["wq", "wk", "wv", "wa", "wb", "ln_gamma", "ln_beta"];

    fn vars(&self, g: &mut Graph) -> BlockParams {
        BlockParams {
            wq: g.param(self.wq),
            wk: g.param(self.wk),
            wv: g.param(self.wv),
            wa: g.param(self.wa),
            wb: g.param(self.wb),
            ln_gamma: g.param(self.ln_gamma),
            ln_beta: g.param(self.ln_beta),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Ids {
    user: EmbeddingTable,
    news: EmbeddingTable,
    word: EmbeddingTable,
    abs_time: Option<AbsoluteTimeTables>,
    rel_time: Option<EmbeddingTable>,
    sentence: Option<[ParamId; 3]>,
    element: Option<[ParamId; 3]>,
    wc: ParamId,
    seq: Option<BlockIds>,
    summ: [BlockIds; 2],
    head: [ParamId; 4],
    dns_w: ParamId,
    dns_b: ParamId,
}

/// Row-stochastic attention matrices of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    /// Per history article, `(K+2) x (K+2)` over `[u, s1..sK, c*]`.
    pub sentence: Vec<Tensor>,
    /// Per history article, `5 x 5` in element-kind order.
    pub element: Vec<Tensor>,
    /// `L x L` sequence-level weights with time embeddings removed.
    pub sequence: Tensor,
    /// `L x L` sequence-level weights with time embeddings.
    pub time_aware: Tensor,
    pub logit: f64,
}

pub struct Model {
    cfg: ModelConfig,
    pub store: ParamStore,
    ids: Ids,
}

fn xavier<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    init_uniform(rng, fan_in, fan_out, (6.0 / (fan_in + fan_out) as f64).sqrt())
}

fn block_name(prefix: &str, part: &str) -> String {
    format!("{prefix}.{part}")
}

impl Model {
    /// Fresh parameters, deterministic in `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        Self::check_config(&cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let d = cfg.d;
        EmbeddingTable::register(&mut s, "user_emb", cfg.num_users, d, &mut rng)?;
        EmbeddingTable::register(&mut s, "news_emb", cfg.num_news, d, &mut rng)?;
        EmbeddingTable::register(&mut s, "word_emb", cfg.vocab_size, d, &mut rng)?;
        if cfg.time_mode.uses_absolute() {
            AbsoluteTimeTables::register(&mut s, d, cfg.min_year, cfg.max_year, &mut rng)?;
        }
        if cfg.time_mode.uses_relative() {
            EmbeddingTable::register(&mut s, "time.relative", RELATIVE_BUCKETS, d, &mut rng)?;
        }
        if cfg.layers.sentence {
            for n in ["sent.w1", "sent.w2", "sent.w3"] {
                s.insert(n, xavier(&mut rng, d, d), true)?;
            }
        }
        if cfg.layers.element {
            for n in ["elem.w4", "elem.w5", "elem.w6"] {
                s.insert(n, xavier(&mut rng, 2 * d, d), true)?;
            }
        }
        s.insert("seq.wc", xavier(&mut rng, cfg.time_mode.wc_rows(d), d), true)?;
        let mut blocks = vec!["summ1", "summ2"];
        if cfg.layers.sequence {
            blocks.insert(0, "seq");
        }
        for prefix in blocks {
            for part in ["wq", "wk", "wv"] {
                s.insert(block_name(prefix, part), xavier(&mut rng, d, d), true)?;
            }
            s.insert(block_name(prefix, "wa"), xavier(&mut rng, d, cfg.d_prime), true)?;
            s.insert(block_name(prefix, "wb"), xavier(&mut rng, cfg.d_prime, d), true)?;
            s.insert(block_name(prefix, "ln_gamma"), Tensor::full(&[d], 1.0), true)?;
            s.insert(block_name(prefix, "ln_beta"), Tensor::zeros(&[d]), true)?;
        }
        s.insert("head.w1", xavier(&mut rng, 5 * d, 2 * d), true)?;
        s.insert("head.b1", Tensor::zeros(&[2 * d]), true)?;
        s.insert("head.w2", xavier(&mut rng, 2 * d, 1), true)?;
        s.insert("head.b2", Tensor::zeros(&[1]), true)?;
        // Negative selection works on detached representations, so its
        // weights never receive a gradient.
        s.insert("dns.w", Tensor::eye(cfg.dns_pool), false)?;
        s.insert("dns.b", Tensor::zeros(&[cfg.dns_pool]), false)?;
        Self::from_store(cfg, s)
    }

    fn check_config(cfg: &ModelConfig) -> Result<()> {
        if cfg.d == 0 || cfg.d_prime == 0 || cfg.history_len == 0 || cfg.max_sentences == 0 {
            return Err(Error::Config("d, d_prime, L and K must be positive".into()));
        }
        if cfg.heads == 0 || !cfg.d.is_multiple_of(cfg.heads) {
            return Err(Error::Config(format!("d = {} is not divisible by {} heads", cfg.d, cfg.heads)));
        }
        if cfg.num_users == 0 || cfg.num_news == 0 || cfg.vocab_size == 0 || cfg.dns_pool == 0 {
            return Err(Error::Config("empty user, news, vocabulary or sampling pool".into()));
        }
        Ok(())
    }

    /// Wraps an existing parameter set, checking every shape.
    pub fn from_store(cfg: ModelConfig, store: ParamStore) -> Result<Self> {
        Self::check_config(&cfg)?;
        let d = cfg.d;
        let expect = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("parameter `{name}` missing")))?;
            if store.get(id).shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    store.get(id).shape()
                )));
            }
            Ok(id)
        };
        let table = |name: &str, rows: usize| -> Result<EmbeddingTable> {
            expect(name, &[rows, d])?;
            EmbeddingTable::attach(&store, name)
        };
        let block = |prefix: &str| -> Result<BlockIds> {
            let shapes = [vec![d, d], vec![d, d], vec![d, d], vec![d, cfg.d_prime], vec![cfg.d_prime, d], vec![d], vec![d]];
            let mut ids = Vec::with_capacity(7);
            for (part, shape) in BlockIds::PARTS.iter().zip(&shapes) {
                ids.push(expect(&block_name(prefix, part), shape)?);
            }
            Ok(BlockIds {
                wq: ids[0],
                wk: ids[1],
                wv: ids[2],
                wa: ids[3],
                wb: ids[4],
                ln_gamma: ids[5],
                ln_beta: ids[6],
            })
        };
        let years = (cfg.max_year - cfg.min_year + 1) as usize;
        let abs_time = if cfg.time_mode.uses_absolute() {
            for (name, rows) in AbsoluteTimeTables::NAMES.iter().zip([years, 12, 53, 31, 24, 60]) {
                expect(name, &[rows, d])?;
            }
            Some(AbsoluteTimeTables::attach(&store, cfg.min_year)?)
        } else {
            None
        };
        let ids = Ids {
            user: table("user_emb", cfg.num_users)?,
            news: table("news_emb", cfg.num_news)?,
            word: table("word_emb", cfg.vocab_size)?,
            abs_time,
            rel_time: if cfg.time_mode.uses_relative() {
                Some(table("time.relative", RELATIVE_BUCKETS)?)
            } else {
                None
            },
            sentence: if cfg.layers.sentence {
                Some([expect("sent.w1", &[d, d])?, expect("sent.w2", &[d, d])?, expect("sent.w3", &[d, d])?])
            } else {
                None
            },
            element: if cfg.layers.element {
                Some([
                    expect("elem.w4", &[2 * d, d])?,
                    expect("elem.w5", &[2 * d, d])?,
                    expect("elem.w6", &[2 * d, d])?,
                ])
            } else {
                None
            },
            wc: expect("seq.wc", &[cfg.time_mode.wc_rows(d), d])?,
            seq: if cfg.layers.sequence { Some(block("seq")?) } else { None },
            summ: [block("summ1")?, block("summ2")?],
            head: [
                expect("head.w1", &[5 * d, 2 * d])?,
                expect("head.b1", &[2 * d])?,
                expect("head.w2", &[2 * d, 1])?,
                expect("head.b2", &[1])?,
            ],
            dns_w: expect("dns.w", &[cfg.dns_pool, cfg.dns_pool])?,
            dns_b: expect("dns.b", &[cfg.dns_pool])?,
        };
        Ok(Model { cfg, store, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.store
            .entries()
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }

    fn check_instance(&self, corpus: &Corpus, inst: &InstanceWindow, candidates: &[usize]) -> Result<()> {
        if inst.history.len() != self.cfg.history_len {
            return Err(Error::dim(
                "forward",
                format!("history of {} clicks, model expects L = {}", inst.history.len(), self.cfg.history_len),
            ));
        }
        if inst.user >= self.cfg.num_users {
            return Err(Error::OutOfRange {
                what: "user",
                index: inst.user,
                size: self.cfg.num_users,
            });
        }
        if candidates.is_empty() {
            return Err(Error::dim("forward", "no candidates"));
        }
        let limit = self.cfg.num_news.min(corpus.num_news());
        for &n in inst.history.iter().map(|c| &c.0).chain(candidates) {
            if n >= limit {
                return Err(Error::OutOfRange {
                    what: "news",
                    index: n,
                    size: limit,
                });
            }
        }
        Ok(())
    }

    /// Logits (`[n]`) of `candidates` as the next click after `inst.history`,
    /// all at the candidate timestamp of `inst`.
    pub fn forward(&self, g: &mut Graph, corpus: &Corpus, inst: &InstanceWindow, candidates: &[usize]) -> Result<Var> {
        Ok(self.build(g, corpus, inst, candidates, true)?.logits)
    }

    /// Eval-mode scores for any number of candidates.
    pub fn scores(&self, corpus: &Corpus, inst: &InstanceWindow, candidates: &[usize]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(candidates.len());
        for chunk in candidates.chunks(SCORE_CHUNK) {
            let mut g = Graph::eval(&self.store);
            let logits = self.forward(&mut g, corpus, inst, chunk)?;
            out.extend_from_slice(g.data(logits));
        }
        Ok(out)
    }

    /// Attention weights of the positive candidate of `inst` (eval mode).
    pub fn trace(&self, corpus: &Corpus, inst: &InstanceWindow) -> Result<AttentionTrace> {
        let cand = [inst.candidate.0];
        let mut g = Graph::eval(&self.store);
        let with_time = self.build(&mut g, corpus, inst, &cand, true)?;
        let sentence = with_time
            .beta
            .iter()
            .map(|&(w, n)| {
                let mut mask = vec![false; n];
                mask.resize(self.cfg.max_sentences, true);
                expand_weights(&g.tensor(w), &mask)
            })
            .collect::<Result<Vec<_>>>()?;
        let element = with_time.gamma.iter().map(|&w| g.tensor(w)).collect();
        let time_aware = head_mean(&g, &with_time.seq_weights[0]);
        let logit = g.data(with_time.logits)[0];
        let mut g2 = Graph::eval(&self.store);
        let without = self.build(&mut g2, corpus, inst, &cand, false)?;
        let sequence = head_mean(&g2, &without.seq_weights[0]);
        Ok(AttentionTrace {
            sentence,
            element,
            sequence,
            time_aware,
            logit,
        })
    }

    fn news_vars(&self, g: &mut Graph, corpus: &Corpus, key: usize, cache: &mut HashMap<usize, NewsVars>) -> Result<NewsVars> {
        if let Some(v) = cache.get(&key) {
            return Ok(*v);
        }
        let article = &corpus.news[key];
        let d = self.cfg.d;
        let sents = &article.sentences[..article.sentences.len().min(self.cfg.max_sentences)];
        let (sent_rows, content) = if sents.is_empty() {
            (None, g.constant(Tensor::zeros(&[d])))
        } else {
            let groups: Vec<Vec<usize>> = sents.iter().map(|s| s.iter().map(|&t| t as usize).collect()).collect();
            let rows = self.ids.word.bag_mean(g, &groups)?;
            (Some(rows), g.mean_axis(rows, 0)?)
        };
        let groups: Vec<Vec<usize>> = article
            .elements
            .iter()
            .map(|e| e.iter().map(|&t| t as usize).collect())
            .collect();
        let elements = self.ids.word.bag_mean(g, &groups)?;
        let element_mean = g.mean_axis(elements, 0)?;
        let v = NewsVars {
            sent_rows,
            n_sent: sents.len(),
            content,
            elements,
            element_mean,
        };
        cache.insert(key, v);
        Ok(v)
    }

    fn build(&self, g: &mut Graph, corpus: &Corpus, inst: &InstanceWindow, cands: &[usize], time_on: bool) -> Result<Built> {
        self.check_instance(corpus, inst, cands)?;
        let cfg = &self.cfg;
        let (d, l, n) = (cfg.d, cfg.history_len, cands.len());
        let dropout = cfg.dropout;
        let scale = 1.0 / (d as f64).sqrt();
        let mut cache = HashMap::new();

        let u_row = self.ids.user.lookup(g, &[inst.user])?;
        let u = g.reshape(u_row, vec![d])?;

        let hist: Vec<NewsVars> = inst
            .history
            .iter()
            .map(|&(j, _)| self.news_vars(g, corpus, j, &mut cache))
            .collect::<Result<_>>()?;
        let cvars: Vec<NewsVars> = cands
            .iter()
            .map(|&j| self.news_vars(g, corpus, j, &mut cache))
            .collect::<Result<_>>()?;

        let content_c: Vec<Var> = cvars.iter().map(|v| v.content).collect();
        let content_c = g.stack_rows(&content_c)?;
        let elem_mean_c: Vec<Var> = cvars.iter().map(|v| v.element_mean).collect();
        let elem_mean_c = g.stack_rows(&elem_mean_c)?;
        let id_c = self.ids.news.lookup(g, cands)?;
        let x_star = g.concat_cols(&[content_c, elem_mean_c, id_c])?;

        let mut beta = Vec::new();
        let mut gamma = Vec::new();

        // content rows, candidate-major: row c * L + i
        let mut content_rows = Vec::with_capacity(n * l);
        if let Some([w1, w2, w3]) = self.ids.sentence {
            let (w1, w2, w3) = (g.param(w1), g.param(w2), g.param(w3));
            let mut hist_qkv = Vec::with_capacity(l);
            for h in &hist {
                let s = match h.sent_rows {
                    Some(rows) => g.stack_rows(&[u, rows])?,
                    None => u_row,
                };
                hist_qkv.push((g.matmul(s, w1)?, g.matmul_nt(s, w2)?, g.matmul(s, w3)?));
            }
            let qc = g.matmul(content_c, w1)?;
            let kc = g.matmul_nt(content_c, w2)?;
            let vc = g.matmul(content_c, w3)?;
            for c in 0..n {
                let (qr, kr, vr) = if n == 1 {
                    (qc, kc, vc)
                } else {
                    (g.slice_rows(qc, c, c + 1)?, g.slice_rows(kc, c, c + 1)?, g.slice_rows(vc, c, c + 1)?)
                };
                for (i, &(q, k, v)) in hist_qkv.iter().enumerate() {
                    let q = g.stack_rows(&[q, qr])?;
                    let k = g.stack_rows(&[k, kr])?;
                    let v = g.stack_rows(&[v, vr])?;
                    let a = attend(g, q, k, v, scale, None, 0.0)?;
                    content_rows.push(g.mean_axis(a.out, 0)?);
                    if c == 0 {
                        beta.push((a.weights, hist[i].n_sent));
                    }
                }
            }
        } else {
            for _ in 0..n {
                content_rows.extend(hist.iter().map(|h| h.content));
            }
        }

        let mut element_rows = Vec::with_capacity(n * l);
        if let Some([w4, w5, w6]) = self.ids.element {
            let ws = [g.param(w4), g.param(w5), g.param(w6)];
            let mut top = [ws[0]; 3];
            let mut bottom = [ws[0]; 3];
            for (k, &w) in ws.iter().enumerate() {
                top[k] = g.slice_rows(w, 0, d)?;
                bottom[k] = g.slice_rows(w, d, 2 * d)?;
            }
            let mut hist_proj = Vec::with_capacity(l);
            for h in &hist {
                hist_proj.push([g.matmul(h.elements, top[0])?, g.matmul(h.elements, top[1])?, g.matmul(h.elements, top[2])?]);
            }
            let all_c: Vec<Var> = cvars.iter().map(|v| v.elements).collect();
            let all_c = if n == 1 { all_c[0] } else { g.stack_rows(&all_c)? };
            let cand_proj = [g.matmul(all_c, bottom[0])?, g.matmul(all_c, bottom[1])?, g.matmul(all_c, bottom[2])?];
            for c in 0..n {
                let mut cp = cand_proj;
                if n > 1 {
                    for p in cp.iter_mut() {
                        *p = g.slice_rows(*p, ELEMENT_COUNT * c, ELEMENT_COUNT * (c + 1))?;
                    }
                }
                for hp in &hist_proj {
                    let q = g.add(hp[0], cp[0])?;
                    let k = g.add(hp[1], cp[1])?;
                    let v = g.add(hp[2], cp[2])?;
                    let a = attend(g, q, k, v, scale, None, dropout)?;
                    element_rows.push(g.mean_axis(a.out, 0)?);
                    if c == 0 {
                        gamma.push(a.weights);
                    }
                }
            }
        } else {
            for _ in 0..n {
                element_rows.extend(hist.iter().map(|h| h.element_mean));
            }
        }

        let content = g.stack_rows(&content_rows)?;
        let element = g.stack_rows(&element_rows)?;
        let hist_ids: Vec<usize> = (0..n).flat_map(|_| inst.history.iter().map(|c| c.0)).collect();
        let ids = self.ids.news.lookup(g, &hist_ids)?;
        let x_prime = g.concat_cols(&[content, element, ids])?;

        // [z_i, z*, u] W_c, split by the row blocks of W_c
        let mode = cfg.time_mode;
        let wc = g.param(self.ids.wc);
        let wc_x = g.slice_rows(wc, 0, 3 * d)?;
        let mut t = g.matmul(x_prime, wc_x)?;

        let abs = match self.ids.abs_time {
            Some(tables) if time_on => {
                let ts: Vec<i64> = inst.history.iter().map(|c| c.1).chain([inst.candidate.1]).collect();
                Some(absolute_time_embed(g, &tables, &ts)?)
            }
            Some(_) => Some(g.constant(Tensor::zeros(&[l + 1, d]))),
            None => None,
        };
        let rel = match self.ids.rel_time {
            Some(table) if time_on => Some(relative_time_embed(g, &table, &history_intervals(&inst.history)?)?),
            Some(_) => Some(g.constant(Tensor::zeros(&[l, d]))),
            None => None,
        };
        let mut hist_time = Vec::new();
        if let Some(a) = abs {
            hist_time.push(g.slice_rows(a, 0, l)?);
        }
        if let Some(r) = rel {
            hist_time.push(r);
        }
        let mut off = 3 * d;
        if !hist_time.is_empty() {
            let width = hist_time.len() * d;
            let h = if hist_time.len() == 1 { hist_time[0] } else { g.concat_cols(&hist_time)? };
            let w = g.slice_rows(wc, off, off + width)?;
            let th = g.matmul(h, w)?;
            let th = if n == 1 {
                th
            } else {
                let idx: Vec<usize> = (0..n).flat_map(|_| 0..l).collect();
                g.select_rows(th, &idx)?
            };
            t = g.add(t, th)?;
            off += width;
        }
        let u_tiled = g.tile_rows(u, n)?;
        let mut cand_parts = Vec::with_capacity(4);
        if mode == TimeMode::Relative {
            cand_parts.push(x_star);
        }
        cand_parts.push(x_star);
        if let Some(a) = abs {
            let ac = g.slice_rows(a, l, l + 1)?;
            let ac = g.reshape(ac, vec![d])?;
            cand_parts.push(g.tile_rows(ac, n)?);
        }
        cand_parts.push(u_tiled);
        let cand_in = g.concat_cols(&cand_parts)?;
        let w = g.slice_rows(wc, off, mode.wc_rows(d))?;
        let cw = g.matmul(cand_in, w)?;
        let idx: Vec<usize> = (0..n).flat_map(|c| std::iter::repeat_n(c, l)).collect();
        let cw = g.select_rows(cw, &idx)?;
        let mut t = g.add(t, cw)?;

        let mut seq_weights = None;
        if let Some(block) = self.ids.seq {
            let p = block.vars(g);
            let out = transformer_block(g, t, l, cfg.heads, &p, dropout)?;
            seq_weights = Some(out.weights);
            t = out.out;
        }
        let blocks = [self.ids.summ[0].vars(g), self.ids.summ[1].vars(g)];
        let summary = summarize_history(g, t, l, &blocks, cfg.heads, dropout)?;
        let seq_weights = seq_weights.unwrap_or(summary.first_block_weights);

        let [w1, b1, w2, b2] = self.ids.head;
        let head = HeadParams {
            w1: g.param(w1),
            b1: g.param(b1),
            w2: g.param(w2),
            b2: g.param(b2),
        };
        let logits = predict_click(g, summary.p, x_star, u, &head)?;
        Ok(Built {
            logits,
            beta,
            gamma,
            seq_weights,
        })
    }

    /// Detached candidate representation `[content, element, id]` (`3d`),
    /// computed straight from the parameters.
    pub fn candidate_rep(&self, article: &NewsArticle, index: usize) -> Vec<f64> {
        let d = self.cfg.d;
        let words = self.store.get(self.ids.word.id);
        let bag = |tokens: &[u32], out: &mut [f64], weight: f64| {
            if tokens.is_empty() {
                return;
            }
            let w = weight / tokens.len() as f64;
            for &t in tokens {
                for (o, x) in out.iter_mut().zip(words.row(t as usize)) {
                    *o += w * x;
                }
            }
        };
        let mut rep = vec![0.0; 3 * d];
        let sents = &article.sentences[..article.sentences.len().min(self.cfg.max_sentences)];
        for s in sents {
            bag(s, &mut rep[..d], 1.0 / sents.len() as f64);
        }
        for e in &article.elements {
            bag(e, &mut rep[d..2 * d], 1.0 / ELEMENT_COUNT as f64);
        }
        rep[2 * d..].copy_from_slice(self.store.get(self.ids.news.id).row(index));
        rep
    }

    /// `rep` mapped to `d` by the rows of `W_c` that consume `x*`, the
    /// space negatives are selected in.
    pub fn dns_project(&self, rep: &[f64]) -> Vec<f64> {
        let d = self.cfg.d;
        let mode = self.cfg.time_mode;
        let hist_time = (mode.uses_absolute() as usize + mode.uses_relative() as usize) * d;
        let wc = self.store.get(self.ids.wc);
        let mut out = vec![0.0; d];
        for (i, &r) in rep.iter().enumerate() {
            for (o, p) in out.iter_mut().zip(wc.row(3 * d + hist_time + i)) {
                *o += r * p;
            }
        }
        out
    }

    pub fn dns_params(&self) -> crate::sampling::DnsParams {
        crate::sampling::DnsParams {
            w: self.store.get(self.ids.dns_w).clone(),
            b: self.store.get(self.ids.dns_b).clone(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct NewsVars {
    sent_rows: Option<Var>,
    n_sent: usize,
    content: Var,
    elements: Var,
    element_mean: Var,
}

struct Built {
    logits: Var,
    beta: Vec<(Var, usize)>,
    gamma: Vec<Var>,
    seq_weights: Vec<Vec<Var>>,
}

fn head_mean(g: &Graph, heads: &[Var]) -> Tensor {
    let mut acc = g.tensor(heads[0]);
    for &h in &heads[1..] {
        for (a, b) in acc.data_mut().iter_mut().zip(g.data(h)) {
            *a += b;
        }
    }
    let inv = 1.0 / heads.len() as f64;
    acc.data_mut().iter_mut().for_each(|x| *x *= inv);
    acc
}
