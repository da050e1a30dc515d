//! Byte-level corpus handling, AdamW, the training loop and checkpoints.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::model::{self, InitConfig, ModelConfig, ModelError, ModelParams, ModelVars};
use crate::numerics::{RealMatrix, SeededRng};
use crate::ttt::BoundaryMask;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("token {0} is not a byte")]
    NotAByte(usize),
    #[error("shape mismatch for {name}: {got:?} vs {expected:?}")]
    Shape {
        name: String,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("config json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Token id of the document separator; bytes map to themselves.
pub const SEPARATOR: usize = 256;
pub const BYTE_VOCAB: usize = 257;

pub fn tokenize(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

/// Inverse of [`tokenize`]; the separator and out-of-range ids are rejected.
pub fn detokenize(tokens: &[usize]) -> Result<Vec<u8>> {
    tokens
        .iter()
        .map(|&t| u8::try_from(t).map_err(|_| TrainError::NotAByte(t)))
        .collect()
}

/// Token stream where every document begins with [`SEPARATOR`].
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    tokens: Vec<usize>,
    mask: BoundaryMask,
    starts: Vec<usize>,
}

impl Corpus {
    pub fn from_documents<D: AsRef<[u8]>>(docs: &[D]) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut ids = Vec::new();
        let mut starts = Vec::new();
        for (i, d) in docs.iter().enumerate() {
            starts.push(tokens.len());
            tokens.push(SEPARATOR);
            tokens.extend(tokenize(d.as_ref()));
            ids.resize(tokens.len(), i as u32);
        }
        if tokens.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let mask = BoundaryMask::new(ids).expect("ids are nondecreasing");
        Ok(Self { tokens, mask, starts })
    }

    /// A file is one document; a directory contributes each regular file in
    /// lexicographic filename order.
    pub fn load(path: &Path) -> Result<Self> {
        if path.is_dir() {
            let mut files: Vec<_> = fs::read_dir(path)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.is_file())
                .collect();
            files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
            let docs = files.iter().map(fs::read).collect::<std::io::Result<Vec<_>>>()?;
            Self::from_documents(&docs)
        } else {
            Self::from_documents(&[fs::read(path)?])
        }
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn mask(&self) -> &BoundaryMask {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_documents(&self) -> usize {
        self.starts.len()
    }

    pub fn document_starts(&self) -> &[usize] {
        &self.starts
    }
}

/// Learning-rate decay after warmup.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    /// Cosine from the peak down to a tenth of it at `total_steps`.
    #[default]
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// `None` uses 1% of `total_steps`.
    pub warmup_steps: Option<u64>,
    pub total_steps: u64,
    pub batch_tokens: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub schedule: Schedule,
    /// Start every sampled sequence at a document start.
    pub align_to_documents: bool,
    pub init: InitConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            betas: (0.9, 0.95),
            adam_eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            warmup_steps: None,
            total_steps: 1000,
            batch_tokens: 512,
            seq_len: 256,
            seed: 0,
            schedule: Schedule::Cosine,
            align_to_documents: true,
            init: InitConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be > 0");
        }
        if self.total_steps == 0 || self.seq_len == 0 || self.batch_tokens == 0 {
            return bad("total_steps, seq_len and batch_tokens must be >= 1");
        }
        Ok(())
    }

    pub fn warmup(&self) -> u64 {
        self.warmup_steps.unwrap_or(self.total_steps / 100)
    }

    pub fn sequences_per_step(&self) -> usize {
        (self.batch_tokens / self.seq_len).max(1)
    }

    /// Learning rate at 1-based `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let warm = self.warmup();
        if warm > 0 && step <= warm {
            return self.learning_rate * step as f64 / warm as f64;
        }
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => {
                let span = self.total_steps.saturating_sub(warm).max(1) as f64;
                let progress = ((step - warm) as f64 / span).min(1.0);
                let min = 0.1 * self.learning_rate;
                min + 0.5 * (self.learning_rate - min) * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// First and second moments, one pair per trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<RealMatrix>,
    pub v: Vec<RealMatrix>,
}

impl AdamMoments {
    pub fn zeros_like(params: &[RealMatrix]) -> Self {
        let z: Vec<_> = params.iter().map(|p| RealMatrix::zeros(p.rows(), p.cols())).collect();
        Self { m: z.clone(), v: z }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// One AdamW update at 1-based `step`. Decay is applied as
/// `θ ← θ(1 − lr·wd)` before the moment update.
pub fn adamw_step(params: &mut [RealMatrix], grads: &[RealMatrix], moments: &mut AdamMoments, step: u64, hp: &AdamHyper) -> Result<()> {
    if step == 0 {
        return Err(TrainError::Config("adam step index starts at 1".into()));
    }
    if params.len() != grads.len() || params.len() != moments.m.len() {
        return Err(TrainError::Config(format!(
            "{} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            moments.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != moments.m[i].shape() {
            return Err(TrainError::Shape {
                name: format!("tensor {i}"),
                got: g.shape(),
                expected: p.shape(),
            });
        }
    }
    let bc1 = 1.0 - hp.beta1.powi(step as i32);
    let bc2 = 1.0 - hp.beta2.powi(step as i32);
    let decay = 1.0 - hp.lr * hp.weight_decay;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut moments.m[i], &mut moments.v[i]);
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((w, &gv), (mv, vv)) in it {
            *w *= decay;
            *mv = hp.beta1 * *mv + (1.0 - hp.beta1) * gv;
            *vv = hp.beta2 * *vv + (1.0 - hp.beta2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *w -= hp.lr * mhat / (vhat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// Sequences drawn for one step, concatenated with a mask that keeps them
/// (and the documents inside them) apart.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub mask: BoundaryMask,
}

/// Batch for 1-based `step`; a pure function of `(seed, step)` and the corpus.
pub fn make_batch(corpus: &Corpus, config: &TrainConfig, step: u64) -> Batch {
    let mut rng = SeededRng::derive(config.seed, step);
    let mut tokens = Vec::new();
    let mut ids = Vec::new();
    let mut next_id = 0u32;
    let n = corpus.len();
    let len = config.seq_len.min(n);
    for _ in 0..config.sequences_per_step() {
        let start = if config.align_to_documents {
            let starts = corpus.document_starts();
            starts[rng.below(starts.len())].min(n - len)
        } else {
            rng.below(n - len + 1)
        };
        let src = &corpus.mask().doc_ids()[start..start + len];
        let mut prev = src[0];
        for (t, &d) in src.iter().enumerate() {
            if d != prev {
                next_id += 1;
                prev = d;
            }
            tokens.push(corpus.tokens()[start + t]);
            ids.push(next_id);
        }
        next_id += 1;
    }
    Batch {
        tokens,
        mask: BoundaryMask::new(ids).expect("ids are nondecreasing"),
    }
}

/// Loss and gradients of the trainable tensors on one batch.
pub fn loss_and_grads(params: &ModelParams, config: &ModelConfig, batch: &Batch) -> Result<(f64, Vec<(String, RealMatrix)>)> {
    let mut tape = Tape::new();
    let vars = ModelVars::register(&mut tape, params, config, true);
    let logits = model::forward_tape(&mut tape, &vars, &batch.tokens, config, Some(&batch.mask))?;
    let mut targets: Vec<usize> = batch.tokens[1..].to_vec();
    targets.push(0);
    let weights = model::next_token_weights(&batch.mask);
    let loss = model::cross_entropy(&mut tape, logits, &targets, &weights)?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss).map_err(ModelError::from)?;
    Ok((value, grads.into_params()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "step,loss,grad_norm,lr";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.step, self.loss, self.grad_norm, self.lr)
    }
}

pub fn metrics_csv(metrics: &[StepMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in metrics {
        s.push_str(&m.csv_row());
        s.push('\n');
    }
    s
}

/// Model, optimizer state and step counter of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ModelParams,
    pub moments: AdamMoments,
    /// Completed steps.
    pub step: u64,
}

impl Trainer {
    /// Fresh run; parameters are initialized from the training seed.
    pub fn new(model: ModelConfig, train: TrainConfig) -> Result<Self> {
        model.validate()?;
        train.validate()?;
        let params = ModelParams::init(&model, &train.init, &mut SeededRng::derive(train.seed, 0));
        Self::with_params(model, train, params)
    }

    pub fn with_params(model: ModelConfig, train: TrainConfig, params: ModelParams) -> Result<Self> {
        let trainable: Vec<RealMatrix> = params
            .named()
            .into_iter()
            .filter(|(n, _)| !model.is_frozen(n))
            .map(|(_, m)| m)
            .collect();
        Ok(Self {
            moments: AdamMoments::zeros_like(&trainable),
            model,
            train,
            params,
            step: 0,
        })
    }

    /// Runs step `self.step + 1`.
    pub fn step(&mut self, corpus: &Corpus) -> Result<StepMetrics> {
        let step = self.step + 1;
        let batch = make_batch(corpus, &self.train, step);
        let (loss, grads) = loss_and_grads(&self.params, &self.model, &batch)?;

        let mut named = self.params.named();
        let trainable: Vec<usize> = (0..named.len()).filter(|&i| !self.model.is_frozen(&named[i].0)).collect();
        if trainable.len() != grads.len() {
            return Err(TrainError::Config("gradient set does not match trainable parameters".into()));
        }
        let sq: f64 = grads.iter().map(|(_, g)| g.data().iter().map(|x| x * x).sum::<f64>()).sum();
        let grad_norm = sq.sqrt();
        let scale = if grad_norm > self.train.grad_clip { self.train.grad_clip / grad_norm } else { 1.0 };
        let grads: Vec<RealMatrix> = grads.into_iter().map(|(_, g)| if scale < 1.0 { g.scale(scale) } else { g }).collect();

        let mut ps: Vec<RealMatrix> = trainable.iter().map(|&i| std::mem::replace(&mut named[i].1, RealMatrix::zeros(0, 0))).collect();
        let lr = self.train.lr_at(step);
        let hp = AdamHyper {
            lr,
            beta1: self.train.betas.0,
            beta2: self.train.betas.1,
            eps: self.train.adam_eps,
            weight_decay: self.train.weight_decay,
        };
        adamw_step(&mut ps, &grads, &mut self.moments, step, &hp)?;
        for (&i, p) in trainable.iter().zip(ps) {
            named[i].1 = p;
        }
        self.params = ModelParams::from_named(&self.model, &named)?;
        self.step = step;
        Ok(StepMetrics { step, loss, grad_norm, lr })
    }

    /// Steps until `self.step == until` (or `total_steps` when `None`).
    pub fn run(&mut self, corpus: &Corpus, until: Option<u64>, mut on_step: impl FnMut(&StepMetrics)) -> Result<Vec<StepMetrics>> {
        let until = until.unwrap_or(self.train.total_steps);
        let mut out = Vec::new();
        while self.step < until {
            let m = self.step(corpus)?;
            on_step(&m);
            out.push(m);
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let header = CheckpointHeader {
            model: self.model.clone(),
            train: self.train.clone(),
            step: self.step,
        };
        let mut tensors = self.params.named();
        let names: Vec<String> = tensors.iter().map(|(n, _)| n.clone()).filter(|n| !self.model.is_frozen(n)).collect();
        for (n, m) in names.iter().zip(&self.moments.m) {
            tensors.push((format!("adam.m.{n}"), m.clone()));
        }
        for (n, v) in names.iter().zip(&self.moments.v) {
            tensors.push((format!("adam.v.{n}"), v.clone()));
        }
        Checkpoint {
            config_json: serde_json::to_string(&header).expect("config serializes"),
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let header: CheckpointHeader = serde_json::from_str(&ck.config_json)?;
        header.model.validate()?;
        let n_params = ModelParams::init(&header.model, &InitConfig::default(), &mut SeededRng::new(0)).named().len();
        if ck.tensors.len() < n_params {
            return Err(TrainError::Checkpoint("too few tensors".into()));
        }
        let params = ModelParams::from_named(&header.model, &ck.tensors[..n_params])?;
        let mut t = Self::with_params(header.model, header.train, params)?;
        let k = t.moments.m.len();
        let rest = &ck.tensors[n_params..];
        if rest.len() != 2 * k {
            return Err(TrainError::Checkpoint(format!("expected {} optimizer tensors, found {}", 2 * k, rest.len())));
        }
        for i in 0..k {
            for (slot, (name, value), prefix) in [
                (&mut t.moments.m[i], &rest[i], "adam.m."),
                (&mut t.moments.v[i], &rest[k + i], "adam.v."),
            ] {
                if !name.starts_with(prefix) || value.shape() != slot.shape() {
                    return Err(TrainError::Checkpoint(format!("unexpected optimizer tensor {name}")));
                }
                *slot = value.clone();
            }
        }
        t.step = header.step;
        Ok(t)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    train: TrainConfig,
    step: u64,
}

/// Trains a fresh model for `total_steps`.
pub fn train_loop(model: ModelConfig, train: TrainConfig, corpus: &Corpus) -> Result<(ModelParams, Vec<StepMetrics>)> {
    let mut t = Trainer::new(model, train)?;
    let metrics = t.run(corpus, None, |_| {})?;
    Ok((t.params, metrics))
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IPTT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

/// On-disk layout, all integers little-endian:
///
/// ```text
/// "IPTT" | version u32 | json_len u32 | json bytes | n_tensors u32
/// per tensor: name_len u32 | name bytes | dtype u8 (0 = f64) | rank u32
///             | dims u64 × rank | payload f64 × prod(dims), row-major
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_json: String,
    pub tensors: Vec<(String, RealMatrix)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_json.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, m) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(TrainError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!("unknown format version {version}")));
        }
        let len = r.u32()? as usize;
        let config_json = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| TrainError::Checkpoint("config is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| TrainError::Checkpoint("tensor name is not UTF-8".into()))?;
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(TrainError::Checkpoint(format!("unsupported dtype {dtype} for {name}")));
            }
            let rank = r.u32()?;
            if rank != 2 {
                return Err(TrainError::Checkpoint(format!("unsupported rank {rank} for {name}")));
            }
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let n = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| TrainError::Checkpoint(format!("truncated payload for {name}")))?;
            let raw = r.take(n * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let m = RealMatrix::new(rows, cols, data).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
            tensors.push((name, m));
        }
        if r.pos != bytes.len() {
            return Err(TrainError::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { config_json, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| TrainError::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Loads a checkpoint written by [`Trainer::to_checkpoint`].
pub fn load_model(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let t = Trainer::from_checkpoint(&Checkpoint::load(path)?)?;
    Ok((t.model, t.params))
}
