//! Synthetic key-value recall corpus, sliding-window perplexity and ablations.
//!
//! A document lists key/value pairs, then filler, then asks for every key
//! again. When the filler is longer than the attention window, predicting
//! the value after a repeated key needs memory beyond attention.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{self, ModelConfig, ModelParams, TargetVariant};
use crate::numerics::SeededRng;
use crate::training::{Corpus, StepMetrics, TrainConfig, Trainer, SEPARATOR};

use super::{ExperimentError, Result};

const KEYS: std::ops::RangeInclusive<u8> = b'a'..=b'z';
const VALUES: std::ops::RangeInclusive<u8> = b'A'..=b'Z';
/// Filler bytes are drawn from `128..128 + FILLER_ALPHABET`.
const FILLER_ALPHABET: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecallSpec {
    /// Pairs per document, at most 26.
    pub pairs: usize,
    /// Filler length between the pairs and the queries, drawn uniformly.
    pub gap_min: usize,
    pub gap_max: usize,
    /// Filler before the pairs, drawn uniformly from `0..=lead_max`.
    pub lead_max: usize,
    /// Filler follows a fixed successor map and jumps to a uniform byte
    /// with this probability; 1 gives independent uniform filler.
    pub filler_noise: f64,
}

impl Default for RecallSpec {
    fn default() -> Self {
        Self {
            pairs: 8,
            gap_min: 264,
            gap_max: 320,
            lead_max: 32,
            filler_noise: 0.1,
        }
    }
}

/// Where a value has to be recalled: the logits at `key_pos` should put
/// mass on `value`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Query {
    pub key_pos: usize,
    pub value: usize,
}

/// Tokens of one document (starting with the separator) and its queries.
#[derive(Clone, Debug, PartialEq)]
pub struct RecallDoc {
    pub tokens: Vec<usize>,
    pub queries: Vec<Query>,
}

impl RecallDoc {
    pub fn bytes(&self) -> Vec<u8> {
        self.tokens[1..].iter().map(|&t| t as u8).collect()
    }
}

fn filler(rng: &mut SeededRng, len: usize, noise: f64, out: &mut Vec<usize>) {
    let mut prev = rng.below(FILLER_ALPHABET);
    for _ in 0..len {
        prev = if rng.uniform() < noise {
            rng.below(FILLER_ALPHABET)
        } else {
            (prev * 5 + 17) % FILLER_ALPHABET
        };
        out.push(128 + prev);
    }
}

fn draw_pairs(rng: &mut SeededRng, n: usize) -> Vec<(usize, usize)> {
    let mut keys: Vec<usize> = KEYS.map(usize::from).collect();
    rng.shuffle(&mut keys);
    let values: Vec<usize> = VALUES.map(usize::from).collect();
    keys.into_iter().take(n).map(|k| (k, values[rng.below(values.len())])).collect()
}

fn push_queries(rng: &mut SeededRng, pairs: &[(usize, usize)], tokens: &mut Vec<usize>, queries: &mut Vec<Query>) {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    rng.shuffle(&mut order);
    for i in order {
        let (k, v) = pairs[i];
        queries.push(Query {
            key_pos: tokens.len(),
            value: v,
        });
        tokens.push(k);
        tokens.push(v);
    }
}

/// Some filler, the pairs, more filler, then every key again in random order.
pub fn recall_document(rng: &mut SeededRng, spec: &RecallSpec) -> RecallDoc {
    let pairs = draw_pairs(rng, spec.pairs.min(26));
    let mut tokens = vec![SEPARATOR];
    let lead = rng.below(spec.lead_max + 1);
    filler(rng, lead, spec.filler_noise, &mut tokens);
    for &(k, v) in &pairs {
        tokens.push(k);
        tokens.push(v);
    }
    let gap = spec.gap_min + rng.below(spec.gap_max.saturating_sub(spec.gap_min) + 1);
    filler(rng, gap, spec.filler_noise, &mut tokens);
    let mut queries = Vec::new();
    push_queries(rng, &pairs, &mut tokens, &mut queries);
    RecallDoc { tokens, queries }
}

/// Groups of pairs whose first token sits `distances[i]` tokens before the
/// final query block, after `lead` filler tokens. Distances must be
/// decreasing and leave room for the group itself.
pub fn recall_eval_document(rng: &mut SeededRng, pairs_per_group: usize, distances: &[usize], lead: usize, filler_noise: f64) -> Result<RecallDoc> {
    let group_len = 2 * pairs_per_group;
    for w in distances.windows(2) {
        if w[1] + group_len > w[0] {
            return Err(ExperimentError::Config(format!("group distances {} and {} overlap", w[0], w[1])));
        }
    }
    if distances.last().is_some_and(|&d| d < group_len) || pairs_per_group * distances.len() > 26 {
        return Err(ExperimentError::Config("distances too small or too many pairs".into()));
    }
    let pairs = draw_pairs(rng, pairs_per_group * distances.len());
    let mut tokens = vec![SEPARATOR];
    let total = lead + distances.first().copied().unwrap_or(0);
    for (g, &dist) in distances.iter().enumerate() {
        let target_start = 1 + total - dist;
        filler(rng, target_start - tokens.len(), filler_noise, &mut tokens);
        for &(k, v) in &pairs[g * pairs_per_group..(g + 1) * pairs_per_group] {
            tokens.push(k);
            tokens.push(v);
        }
    }
    filler(rng, 1 + total - tokens.len(), filler_noise, &mut tokens);
    let mut queries = Vec::new();
    push_queries(rng, &pairs, &mut tokens, &mut queries);
    Ok(RecallDoc { tokens, queries })
}

/// `n_docs` documents drawn from stream `stream` of `seed`.
pub fn recall_documents(spec: &RecallSpec, n_docs: usize, seed: u64, stream: u64) -> Vec<RecallDoc> {
    let mut rng = SeededRng::derive(seed, stream);
    (0..n_docs).map(|_| recall_document(&mut rng, spec)).collect()
}

pub fn recall_corpus(docs: &[RecallDoc]) -> Result<Corpus> {
    let bytes: Vec<Vec<u8>> = docs.iter().map(RecallDoc::bytes).collect();
    Ok(Corpus::from_documents(&bytes)?)
}

/// Everything about the recall experiment except the model and optimizer:
/// training documents, held-out queries and the perplexity probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecallProtocol {
    pub spec: RecallSpec,
    pub train_docs: usize,
    /// Share of training documents whose gap is drawn from the long range.
    pub long_fraction: f64,
    pub long_gap_min: usize,
    pub long_gap_max: usize,
    /// Held-out documents for recall accuracy and eval loss.
    pub eval_docs: usize,
    /// Documents for the perplexity curve. Each ends in a block of queries
    /// whose pairs sit `ppl_distances` tokens back.
    pub ppl_docs: usize,
    pub ppl_pairs_per_group: usize,
    pub ppl_distances: Vec<usize>,
    pub ppl_lead: usize,
    pub prefix_lens: Vec<usize>,
    /// Delta-norm cap applied when evaluating, never during training.
    pub eval_clip_tau: Option<f64>,
    pub data_seed: u64,
}

impl Default for RecallProtocol {
    fn default() -> Self {
        Self {
            spec: RecallSpec::default(),
            train_docs: 4000,
            long_fraction: 0.0,
            long_gap_min: 1200,
            long_gap_max: 2000,
            eval_docs: 16,
            ppl_docs: 8,
            ppl_pairs_per_group: 3,
            ppl_distances: vec![2040, 1000, 500, 300],
            ppl_lead: 64,
            prefix_lens: vec![256, 512, 1024, 2048],
            eval_clip_tau: None,
            data_seed: 1,
        }
    }
}

impl RecallProtocol {
    /// Length of the scored block at the end of each perplexity document.
    pub fn ppl_block(&self) -> usize {
        2 * self.ppl_pairs_per_group * self.ppl_distances.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_docs == 0 || self.eval_docs == 0 || self.ppl_docs == 0 {
            return Err(ExperimentError::Config("train_docs, eval_docs and ppl_docs must be >= 1".into()));
        }
        if self.eval_clip_tau.is_some_and(|t| !(t.is_finite() && t > 0.0)) {
            return Err(ExperimentError::Config("eval_clip_tau must be > 0 when set".into()));
        }
        if !(0.0..=1.0).contains(&self.long_fraction) || !(0.0..=1.0).contains(&self.spec.filler_noise) {
            return Err(ExperimentError::Config("long_fraction and filler_noise must lie in [0, 1]".into()));
        }
        if self.spec.pairs == 0 || self.spec.pairs > 26 || self.spec.gap_min > self.spec.gap_max || self.long_gap_min > self.long_gap_max {
            return Err(ExperimentError::Config("pairs must be in 1..=26 and gap ranges nonempty".into()));
        }
        let len = 1 + self.ppl_lead + self.ppl_distances.first().copied().unwrap_or(0) + self.ppl_block();
        if let Some(&l) = self.prefix_lens.iter().max() {
            if l + self.ppl_block() > len {
                return Err(ExperimentError::Config(format!(
                    "prefix_lens up to {l} need documents of {} tokens, ppl documents have {len}",
                    l + self.ppl_block()
                )));
            }
        }
        Ok(())
    }

    /// `config` as used for evaluation.
    pub fn eval_config(&self, config: &ModelConfig) -> ModelConfig {
        let mut c = config.clone();
        if self.eval_clip_tau.is_some() {
            c.ttt.clip_tau = self.eval_clip_tau;
        }
        c
    }

    /// Training documents with the long-gap ones spread evenly through.
    pub fn train_documents(&self) -> Vec<RecallDoc> {
        let mut docs = recall_documents(&self.spec, self.train_docs, self.data_seed, 1);
        let n_long = (self.train_docs as f64 * self.long_fraction) as usize;
        let long = RecallSpec {
            gap_min: self.long_gap_min,
            gap_max: self.long_gap_max,
            ..self.spec.clone()
        };
        for (i, d) in recall_documents(&long, n_long, self.data_seed, 5).into_iter().enumerate() {
            docs[i * self.train_docs / n_long] = d;
        }
        docs
    }

    pub fn train_corpus(&self) -> Result<Corpus> {
        recall_corpus(&self.train_documents())
    }

    pub fn eval_documents(&self) -> Vec<RecallDoc> {
        recall_documents(&self.spec, self.eval_docs, self.data_seed, 2)
    }

    pub fn ppl_documents(&self) -> Result<Vec<Vec<usize>>> {
        let mut rng = SeededRng::derive(self.data_seed, 3);
        (0..self.ppl_docs)
            .map(|_| {
                recall_eval_document(&mut rng, self.ppl_pairs_per_group, &self.ppl_distances, self.ppl_lead, self.spec.filler_noise)
                    .map(|d| d.tokens)
            })
            .collect()
    }

    pub fn ppl_curve(&self, params: &ModelParams, config: &ModelConfig) -> Result<Vec<PplPoint>> {
        let config = self.eval_config(config);
        sliding_window_ppl_docs(params, &config, &self.ppl_documents()?, self.ppl_block(), &self.prefix_lens, self.ppl_docs)
    }
}

/// Fraction of queries whose value is the argmax of the logits at the key.
pub fn recall_accuracy(params: &ModelParams, config: &ModelConfig, docs: &[RecallDoc]) -> Result<f64> {
    let hits: Vec<(usize, usize)> = docs
        .par_iter()
        .map(|d| -> Result<(usize, usize)> {
            let logits = model::model_forward(&d.tokens, params, config, None)?;
            let mut hit = 0;
            for q in &d.queries {
                let row = logits.row(q.key_pos);
                let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
                hit += usize::from(best == q.value);
            }
            Ok((hit, d.queries.len()))
        })
        .collect::<Result<_>>()?;
    let (h, n) = hits.iter().fold((0, 0), |(a, b), (h, n)| (a + h, b + n));
    Ok(if n == 0 { 0.0 } else { h as f64 / n as f64 })
}

/// Mean next-token loss over whole documents.
pub fn documents_loss(params: &ModelParams, config: &ModelConfig, docs: &[Vec<usize>]) -> Result<f64> {
    let sums: Vec<(f64, usize)> = docs
        .par_iter()
        .map(|d| -> Result<(f64, usize)> {
            let logits = model::model_forward(d, params, config, None)?;
            let mut s = 0.0;
            for t in 0..d.len().saturating_sub(1) {
                s -= model::log_softmax_at(logits.row(t), d[t + 1]);
            }
            Ok((s, d.len().saturating_sub(1)))
        })
        .collect::<Result<_>>()?;
    let (s, n) = sums.iter().fold((0.0, 0), |(a, b), (s, n)| (a + s, b + n));
    Ok(if n == 0 { 0.0 } else { s / n as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PplPoint {
    pub prefix_len: usize,
    pub ppl: f64,
    /// summed negative log-likelihood of the block
    pub nll: f64,
    pub tokens: usize,
}

/// Per-token NLL of the final `block_len` tokens given `prefix_len` tokens
/// of context.
fn block_nll(params: &ModelParams, config: &ModelConfig, tokens: &[usize], block_len: usize, prefix_len: usize) -> Result<(f64, usize)> {
    let n = tokens.len();
    if block_len == 0 || prefix_len + block_len > n {
        return Err(ExperimentError::Config(format!(
            "prefix {prefix_len} + block {block_len} exceeds sequence length {n}"
        )));
    }
    let slice = &tokens[n - block_len - prefix_len..];
    let logits = model::model_forward(slice, params, config, None)?;
    let mut nll = 0.0;
    let mut count = 0;
    for p in prefix_len.max(1)..slice.len() {
        nll -= model::log_softmax_at(logits.row(p - 1), slice[p]);
        count += 1;
    }
    Ok((nll, count))
}

/// Perplexity of the final `block_len` tokens for each preceding-context
/// length.
pub fn sliding_window_ppl(params: &ModelParams, config: &ModelConfig, tokens: &[usize], block_len: usize, prefix_lens: &[usize]) -> Result<Vec<PplPoint>> {
    sliding_window_ppl_docs(params, config, &[tokens.to_vec()], block_len, prefix_lens, 1)
}

/// Pools the block NLL over several sequences. `batch` only sets how many
/// sequences are evaluated together; sums are always taken in sequence order.
pub fn sliding_window_ppl_docs(
    params: &ModelParams,
    config: &ModelConfig,
    docs: &[Vec<usize>],
    block_len: usize,
    prefix_lens: &[usize],
    batch: usize,
) -> Result<Vec<PplPoint>> {
    let mut out = Vec::with_capacity(prefix_lens.len());
    for &l in prefix_lens {
        let mut per_doc = Vec::with_capacity(docs.len());
        for group in docs.chunks(batch.max(1)) {
            let r: Vec<(f64, usize)> = group
                .par_iter()
                .map(|d| block_nll(params, config, d, block_len, l))
                .collect::<Result<_>>()?;
            per_doc.extend(r);
        }
        let (nll, tokens) = per_doc.iter().fold((0.0, 0), |(a, b), (s, n)| (a + s, b + n));
        out.push(PplPoint {
            prefix_len: l,
            ppl: (nll / tokens.max(1) as f64).exp(),
            nll,
            tokens,
        });
    }
    Ok(out)
}

pub fn ppl_csv(rows: &[(String, Vec<PplPoint>)]) -> String {
    let mut s = String::from("model,prefix_len,ppl,nll,tokens\n");
    for (name, curve) in rows {
        for p in curve {
            s.push_str(&format!("{name},{},{},{},{}\n", p.prefix_len, p.ppl, p.nll, p.tokens));
        }
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AblationVariant {
    Target(TargetVariant),
    ChunkSize(usize),
    TttEvery(usize),
}

impl AblationVariant {
    /// `full`, `no-conv`, `no-proj`, `reconstruction`, `chunk=N` or `ttt_every=N`.
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(t) = TargetVariant::parse(s) {
            return Ok(AblationVariant::Target(t));
        }
        let num = |v: &str| v.parse::<usize>().map_err(|_| ExperimentError::UnknownVariant(s.to_string()));
        if let Some(v) = s.strip_prefix("chunk=") {
            return Ok(AblationVariant::ChunkSize(num(v)?));
        }
        if let Some(v) = s.strip_prefix("ttt_every=") {
            return Ok(AblationVariant::TttEvery(num(v)?));
        }
        Err(ExperimentError::UnknownVariant(s.to_string()))
    }

    pub fn label(&self) -> String {
        match self {
            AblationVariant::Target(t) => t.name().to_string(),
            AblationVariant::ChunkSize(c) => format!("chunk={c}"),
            AblationVariant::TttEvery(k) => format!("ttt_every={k}"),
        }
    }

    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        match *self {
            AblationVariant::Target(t) => c.target = t,
            AblationVariant::ChunkSize(n) => c.ttt.chunk_size = n,
            AblationVariant::TttEvery(k) => c.ttt_every = k,
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    /// mean training loss over the last tenth of the steps
    pub final_train_loss: f64,
    /// mean next-token loss on held-out recall documents
    pub eval_loss: f64,
    pub recall_accuracy: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,final_train_loss,eval_loss,recall_accuracy\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.variant, r.final_train_loss, r.eval_loss, r.recall_accuracy));
    }
    s
}

/// A finished training run plus its held-out scores.
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub metrics: Vec<StepMetrics>,
    pub row: AblationRow,
}

/// Trains `config` on `corpus` and scores it on the protocol's held-out
/// documents.
pub fn train_and_score(label: &str, config: ModelConfig, train: &TrainConfig, protocol: &RecallProtocol, corpus: &Corpus) -> Result<TrainedRun> {
    let mut trainer = Trainer::new(config, train.clone())?;
    let metrics = trainer.run(corpus, None, |_| {})?;
    let tail = (metrics.len() / 10).max(1);
    let final_train_loss = metrics[metrics.len() - tail..].iter().map(|m| m.loss).sum::<f64>() / tail as f64;
    let eval = protocol.eval_documents();
    let docs: Vec<Vec<usize>> = eval.iter().map(|d| d.tokens.clone()).collect();
    let eval_config = protocol.eval_config(&trainer.model);
    let row = AblationRow {
        variant: label.to_string(),
        final_train_loss,
        eval_loss: documents_loss(&trainer.params, &eval_config, &docs)?,
        recall_accuracy: recall_accuracy(&trainer.params, &eval_config, &eval)?,
    };
    Ok(TrainedRun {
        config: trainer.model,
        params: trainer.params,
        metrics,
        row,
    })
}

/// Trains every variant with the same seed and budget.
pub fn ablation_run(base: &ModelConfig, train: &TrainConfig, protocol: &RecallProtocol, corpus: &Corpus, variants: &[AblationVariant]) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|v| Ok(train_and_score(&v.label(), v.apply(base), train, protocol, corpus)?.row))
        .collect()
}
