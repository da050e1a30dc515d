//! Decoder-only host transformer.
//!
//! Pre-norm residual blocks: `x + attn(rms(x))`, then `+ mlp(rms(·))`. Every
//! `ttt_every`-th block uses the in-place TTT MLP, the rest a frozen gated
//! MLP. The same forward graph serves inference (a tape of constants) and
//! training (a tape of parameters), so both see identical arithmetic.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, AutodiffError, GradCheckConfig, GradientReport, Tape, TapeOp, Var};
use crate::numerics::{ConvSpec, NumericsError, RealMatrix, SeededRng};
use crate::ttt::{self, BoundaryMask, ScanMode, TttError, TttLayerConfig, TttLayerParams};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token {token} at position {position} is outside the vocabulary of {vocab}")]
    TokenOutOfRange {
        position: usize,
        token: usize,
        vocab: usize,
    },
    #[error("missing or misshapen parameter {0}")]
    Param(String),
    #[error("sequence length {got} does not match mask length {expected}")]
    Length { got: usize, expected: usize },
    #[error(transparent)]
    Ttt(#[from] TttError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// How the TTT target `V̂ = Conv1D(X0) W_target` is parameterized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetVariant {
    /// Trainable look-ahead conv (zero init) and trainable `W_target`
    /// (sparse diagonal init).
    #[default]
    Full,
    /// Conv replaced by a fixed identity tap at offset 0; `W_target` trainable.
    NoConv,
    /// Trainable conv; `W_target` fixed to the identity.
    NoProj,
    /// Fixed identity tap at offset 0 and trainable `W_target` starting from
    /// the identity, i.e. the current-token reconstruction target.
    Reconstruction,
}

impl TargetVariant {
    pub fn name(self) -> &'static str {
        match self {
            TargetVariant::Full => "full",
            TargetVariant::NoConv => "no-conv",
            TargetVariant::NoProj => "no-proj",
            TargetVariant::Reconstruction => "reconstruction",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "full" => TargetVariant::Full,
            "no-conv" => TargetVariant::NoConv,
            "no-proj" => TargetVariant::NoProj,
            "reconstruction" => TargetVariant::Reconstruction,
            _ => return None,
        })
    }

    fn fixed_tap(self) -> bool {
        matches!(self, TargetVariant::NoConv | TargetVariant::Reconstruction)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Sliding attention window; `None` is full causal attention.
    pub window: Option<usize>,
    pub rope_base: f64,
    /// A TTT MLP at layers `ttt_every-1, 2·ttt_every-1, ..`; 0 disables TTT.
    pub ttt_every: usize,
    pub tie_embeddings: bool,
    pub norm_eps: f64,
    pub target: TargetVariant,
    pub scan_mode: ScanMode,
    pub ttt: TttLayerConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let (d_model, d_ff) = (64, 128);
        Self {
            vocab_size: 257,
            d_model,
            n_layers: 6,
            n_heads: 4,
            d_ff,
            window: None,
            rope_base: 1e6,
            ttt_every: 6,
            tie_embeddings: false,
            norm_eps: 1e-6,
            target: TargetVariant::Full,
            scan_mode: ScanMode::SerialOrder,
            ttt: TttLayerConfig::new(d_model, d_ff, 64),
        }
    }
}

impl ModelConfig {
    /// Keeps the TTT layer dimensions in sync with the model.
    pub fn sync_dims(&mut self) {
        self.ttt.d_model = self.d_model;
        self.ttt.d_ff = self.d_ff;
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.d_ff == 0 || self.n_layers == 0 {
            return bad("vocab_size, d_model, d_ff and n_layers must be >= 1".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if !(self.d_model / self.n_heads).is_multiple_of(2) {
            return bad("head dimension d_model / n_heads must be even for rotary embeddings".into());
        }
        if self.window == Some(0) {
            return bad("window must be >= 1 when set".into());
        }
        if !(self.rope_base.is_finite() && self.rope_base > 1.0) {
            return bad("rope_base must be > 1".into());
        }
        if self.ttt.d_model != self.d_model || self.ttt.d_ff != self.d_ff {
            return bad("ttt dimensions differ from model dimensions".into());
        }
        self.ttt.validate()?;
        Ok(())
    }

    pub fn is_ttt_layer(&self, layer: usize) -> bool {
        self.ttt_every > 0 && (layer + 1).is_multiple_of(self.ttt_every)
    }

    pub fn ttt_layers(&self) -> Vec<usize> {
        (0..self.n_layers).filter(|&l| self.is_ttt_layer(l)).collect()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Layer config with the conv window the target variant actually uses.
    pub fn layer_config(&self) -> TttLayerConfig {
        let mut c = self.ttt.clone();
        if self.target.fixed_tap() {
            c.conv_offsets = vec![0];
        }
        c
    }

    /// Parameters held fixed during training.
    pub fn is_frozen(&self, name: &str) -> bool {
        (self.target.fixed_tap() && name.ends_with(".conv"))
            || (self.target == TargetVariant::NoProj && name.ends_with(".w_target"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetParams {
    /// d_model × d_model
    pub w_target: RealMatrix,
    /// one row per conv offset
    pub conv: RealMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub attn_norm: RealMatrix,
    /// Projections are `out × in`, applied as `x · Wᵀ`.
    pub wq: RealMatrix,
    pub wk: RealMatrix,
    pub wv: RealMatrix,
    pub wo: RealMatrix,
    pub mlp_norm: RealMatrix,
    pub w_up: RealMatrix,
    pub w_gate: RealMatrix,
    pub w_down: RealMatrix,
    /// Present on TTT layers only.
    pub target: Option<TargetParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub embedding: RealMatrix,
    pub layers: Vec<LayerParams>,
    pub final_norm: RealMatrix,
    /// `None` when the readout is tied to the embedding table.
    pub unembedding: Option<RealMatrix>,
}

/// Initialization scales.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    /// Std of the truncated normal used for every dense weight.
    pub std: f64,
    /// σ of the diagonal of `W_target`.
    pub target_sigma: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            std: 0.02,
            target_sigma: 0.02,
        }
    }
}

impl ModelParams {
    /// Truncated-normal weights, unit norm gains, zero conv kernels and a
    /// sparse diagonal `W_target` (per the target variant).
    pub fn init(config: &ModelConfig, init: &InitConfig, rng: &mut SeededRng) -> Self {
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let embedding = rng.truncated_normal_matrix(v, d, init.std);
        let lc = config.layer_config();
        let layers = (0..config.n_layers)
            .map(|l| {
                let mut p = LayerParams {
                    attn_norm: RealMatrix::filled(1, d, 1.0),
                    wq: rng.truncated_normal_matrix(d, d, init.std),
                    wk: rng.truncated_normal_matrix(d, d, init.std),
                    wv: rng.truncated_normal_matrix(d, d, init.std),
                    wo: rng.truncated_normal_matrix(d, d, init.std),
                    mlp_norm: RealMatrix::filled(1, d, 1.0),
                    w_up: rng.truncated_normal_matrix(f, d, init.std),
                    w_gate: rng.truncated_normal_matrix(f, d, init.std),
                    w_down: rng.truncated_normal_matrix(d, f, init.std),
                    target: None,
                };
                if config.is_ttt_layer(l) {
                    let w_target = match config.target {
                        TargetVariant::NoProj | TargetVariant::Reconstruction => RealMatrix::identity(d),
                        TargetVariant::Full | TargetVariant::NoConv => {
                            let mut w = RealMatrix::zeros(d, d);
                            for i in 0..d {
                                w.set(i, i, rng.normal() * init.target_sigma);
                            }
                            w
                        }
                    };
                    let conv = if config.target.fixed_tap() {
                        RealMatrix::filled(1, d, 1.0)
                    } else {
                        RealMatrix::zeros(lc.conv_offsets.len(), d)
                    };
                    p.target = Some(TargetParams { w_target, conv });
                }
                p
            })
            .collect();
        let unembedding = (!config.tie_embeddings).then(|| rng.truncated_normal_matrix(v, d, init.std));
        Self {
            embedding,
            layers,
            final_norm: RealMatrix::filled(1, d, 1.0),
            unembedding,
        }
    }

    /// All tensors with stable names, in a fixed order.
    pub fn named(&self) -> Vec<(String, RealMatrix)> {
        let mut out = vec![("embed".to_string(), self.embedding.clone())];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            out.push((p("attn_norm"), l.attn_norm.clone()));
            out.push((p("wq"), l.wq.clone()));
            out.push((p("wk"), l.wk.clone()));
            out.push((p("wv"), l.wv.clone()));
            out.push((p("wo"), l.wo.clone()));
            out.push((p("mlp_norm"), l.mlp_norm.clone()));
            out.push((p("w_up"), l.w_up.clone()));
            out.push((p("w_gate"), l.w_gate.clone()));
            out.push((p("w_down"), l.w_down.clone()));
            if let Some(t) = &l.target {
                out.push((p("w_target"), t.w_target.clone()));
                out.push((p("conv"), t.conv.clone()));
            }
        }
        out.push(("final_norm".into(), self.final_norm.clone()));
        if let Some(u) = &self.unembedding {
            out.push(("unembed".into(), u.clone()));
        }
        out
    }

    /// Inverse of [`ModelParams::named`]; validates names and shapes against `config`.
    pub fn from_named(config: &ModelConfig, tensors: &[(String, RealMatrix)]) -> Result<Self> {
        let template = ModelParams::init(config, &InitConfig::default(), &mut SeededRng::new(0));
        let expected = template.named();
        if expected.len() != tensors.len() {
            return Err(ModelError::Param(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((en, ev), (n, v)) in expected.iter().zip(tensors) {
            if en != n || ev.shape() != v.shape() {
                return Err(ModelError::Param(format!("{n} {:?} (expected {en} {:?})", v.shape(), ev.shape())));
            }
        }
        let mut it = tensors.iter().map(|(_, v)| v.clone());
        let mut next = || it.next().expect("length checked");
        let embedding = next();
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let mut p = LayerParams {
                attn_norm: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                mlp_norm: next(),
                w_up: next(),
                w_gate: next(),
                w_down: next(),
                target: None,
            };
            if config.is_ttt_layer(l) {
                let w_target = next();
                let conv = next();
                p.target = Some(TargetParams { w_target, conv });
            }
            layers.push(p);
        }
        let final_norm = next();
        let unembedding = (!config.tie_embeddings).then(&mut next);
        Ok(Self {
            embedding,
            layers,
            final_norm,
            unembedding,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }

    /// The TTT-layer view of one block's MLP.
    pub fn ttt_params(&self, config: &ModelConfig, layer: usize) -> Option<TttLayerParams> {
        let l = &self.layers[layer];
        let t = l.target.as_ref()?;
        let lc = config.layer_config();
        Some(TttLayerParams {
            w_up: l.w_up.clone(),
            w_gate: l.w_gate.clone(),
            w_down0: l.w_down.clone(),
            w_target: t.w_target.clone(),
            conv: ConvSpec::new(lc.conv_offsets, t.conv.clone()).ok()?,
        })
    }
}

/// Tape handles for one block.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub mlp_norm: Var,
    pub w_up: Var,
    pub w_gate: Var,
    pub w_down: Var,
    pub target: Option<(Var, Var)>,
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embedding: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
    pub unembedding: Option<Var>,
}

impl ModelVars {
    /// Puts the parameters on `tape`. With `trainable`, every non-frozen
    /// tensor becomes a named parameter; otherwise all are constants.
    pub fn register(tape: &mut Tape, params: &ModelParams, config: &ModelConfig, trainable: bool) -> Self {
        let mut put = |name: String, m: &RealMatrix| {
            if trainable && !config.is_frozen(&name) {
                tape.param(name, m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        let embedding = put("embed".into(), &params.embedding);
        let layers = params
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let mut p = |s: &str, m: &RealMatrix| put(format!("layers.{i}.{s}"), m);
                LayerVars {
                    attn_norm: p("attn_norm", &l.attn_norm),
                    wq: p("wq", &l.wq),
                    wk: p("wk", &l.wk),
                    wv: p("wv", &l.wv),
                    wo: p("wo", &l.wo),
                    mlp_norm: p("mlp_norm", &l.mlp_norm),
                    w_up: p("w_up", &l.w_up),
                    w_gate: p("w_gate", &l.w_gate),
                    w_down: p("w_down", &l.w_down),
                    target: l
                        .target
                        .as_ref()
                        .map(|t| (p("w_target", &t.w_target), p("conv", &t.conv))),
                }
            })
            .collect();
        let final_norm = put("final_norm".into(), &params.final_norm);
        let unembedding = params.unembedding.as_ref().map(|u| put("unembed".into(), u));
        Self {
            embedding,
            layers,
            final_norm,
            unembedding,
        }
    }
}

impl ModelVars {
    /// Rebuilds the structure from handles listed in [`ModelParams::named`] order.
    pub fn from_ordered(vars: &[Var], config: &ModelConfig) -> Self {
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("one handle per tensor");
        let embedding = next();
        let layers = (0..config.n_layers)
            .map(|l| {
                let mut lv = LayerVars {
                    attn_norm: next(),
                    wq: next(),
                    wk: next(),
                    wv: next(),
                    wo: next(),
                    mlp_norm: next(),
                    w_up: next(),
                    w_gate: next(),
                    w_down: next(),
                    target: None,
                };
                if config.is_ttt_layer(l) {
                    let w_target = next();
                    lv.target = Some((w_target, next()));
                }
                lv
            })
            .collect();
        let final_norm = next();
        let unembedding = (!config.tie_embeddings).then(&mut next);
        Self {
            embedding,
            layers,
            final_norm,
            unembedding,
        }
    }
}

/// Row gather from an embedding table.
struct EmbedOp {
    ids: Vec<usize>,
}

impl TapeOp for EmbedOp {
    fn name(&self) -> &'static str {
        "embed"
    }

    fn backward(&self, g: &RealMatrix, inputs: &[&RealMatrix], _: &RealMatrix, _: &[bool]) -> Vec<Option<RealMatrix>> {
        let mut d = RealMatrix::zeros(inputs[0].rows(), inputs[0].cols());
        for (t, &id) in self.ids.iter().enumerate() {
            for (o, &gv) in d.row_mut(id).iter_mut().zip(g.row(t)) {
                *o += gv;
            }
        }
        vec![Some(d)]
    }
}

pub fn embed(tape: &mut Tape, table: Var, ids: &[usize]) -> Var {
    let t = tape.value(table);
    let mut out = RealMatrix::zeros(ids.len(), t.cols());
    for (r, &id) in ids.iter().enumerate() {
        out.row_mut(r).copy_from_slice(t.row(id));
    }
    tape.push_op(&[table], out, Box::new(EmbedOp { ids: ids.to_vec() }))
}

/// `y = x / rms(x) ⊙ gain`, per row.
struct RmsNormOp {
    inv_rms: Vec<f64>,
}

impl TapeOp for RmsNormOp {
    fn name(&self) -> &'static str {
        "rms_norm"
    }

    fn backward(&self, g: &RealMatrix, inputs: &[&RealMatrix], _: &RealMatrix, needs: &[bool]) -> Vec<Option<RealMatrix>> {
        let (x, gain) = (inputs[0], inputs[1]);
        let d = x.cols();
        let mut dx = RealMatrix::zeros(x.rows(), d);
        let mut dgain = RealMatrix::zeros(1, d);
        for t in 0..x.rows() {
            let r = self.inv_rms[t];
            let (xr, gr) = (x.row(t), g.row(t));
            let mut dot = 0.0;
            for i in 0..d {
                dot += gain.data()[i] * gr[i] * xr[i];
            }
            let k = r * r * r * dot / d as f64;
            let dxr = dx.row_mut(t);
            for i in 0..d {
                dxr[i] = r * gain.data()[i] * gr[i] - k * xr[i];
            }
            for i in 0..d {
                dgain.data_mut()[i] += gr[i] * xr[i] * r;
            }
        }
        vec![needs[0].then_some(dx), needs[1].then_some(dgain)]
    }
}

pub fn rms_norm(tape: &mut Tape, x: Var, gain: Var, eps: f64) -> Var {
    let xv = tape.value(x);
    let gv = tape.value(gain);
    let d = xv.cols();
    let mut out = RealMatrix::zeros(xv.rows(), d);
    let mut inv_rms = Vec::with_capacity(xv.rows());
    for t in 0..xv.rows() {
        let row = xv.row(t);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + eps).sqrt();
        inv_rms.push(r);
        for ((o, &v), &g) in out.row_mut(t).iter_mut().zip(row).zip(gv.data()) {
            *o = v * r * g;
        }
    }
    tape.push_op(&[x, gain], out, Box::new(RmsNormOp { inv_rms }))
}

/// Rotary embedding: in each head, dimension `i` pairs with `i + hd/2`.
struct RopeOp {
    cos: Vec<f64>,
    sin: Vec<f64>,
    n_heads: usize,
}

fn rope_tables(positions: &[usize], head_dim: usize, base: f64) -> (Vec<f64>, Vec<f64>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &p in positions {
        for i in 0..half {
            let freq = base.powf(-(2.0 * i as f64) / head_dim as f64);
            let angle = p as f64 * freq;
            cos.push(angle.cos());
            sin.push(angle.sin());
        }
    }
    (cos, sin)
}

fn rotate(x: &RealMatrix, cos: &[f64], sin: &[f64], n_heads: usize, inverse: bool) -> RealMatrix {
    let d = x.cols();
    let hd = d / n_heads;
    let half = hd / 2;
    let mut out = x.clone();
    for t in 0..x.rows() {
        let (c, s) = (&cos[t * half..(t + 1) * half], &sin[t * half..(t + 1) * half]);
        let src = x.row(t);
        let dst = out.row_mut(t);
        for h in 0..n_heads {
            let base = h * hd;
            for i in 0..half {
                let (a, b) = (src[base + i], src[base + i + half]);
                let sn = if inverse { -s[i] } else { s[i] };
                dst[base + i] = a * c[i] - b * sn;
                dst[base + i + half] = a * sn + b * c[i];
            }
        }
    }
    out
}

impl TapeOp for RopeOp {
    fn name(&self) -> &'static str {
        "rope"
    }

    fn backward(&self, g: &RealMatrix, _: &[&RealMatrix], _: &RealMatrix, _: &[bool]) -> Vec<Option<RealMatrix>> {
        vec![Some(rotate(g, &self.cos, &self.sin, self.n_heads, true))]
    }
}

pub fn rope(tape: &mut Tape, x: Var, positions: &[usize], n_heads: usize, base: f64) -> Var {
    let xv = tape.value(x);
    let (cos, sin) = rope_tables(positions, xv.cols() / n_heads, base);
    let out = rotate(xv, &cos, &sin, n_heads, false);
    tape.push_op(&[x], out, Box::new(RopeOp { cos, sin, n_heads }))
}

/// Key range `lo..=t` each query attends to: causal, within its document and
/// within the sliding window.
pub fn attention_spans(mask: &BoundaryMask, window: Option<usize>) -> Vec<Range<usize>> {
    let mut spans = Vec::with_capacity(mask.len());
    for doc in mask.documents() {
        for t in doc.clone() {
            let lo = match window {
                Some(w) => doc.start.max((t + 1).saturating_sub(w)),
                None => doc.start,
            };
            spans.push(lo..t + 1);
        }
    }
    spans
}

/// Multi-head softmax attention over precomputed key spans, inputs `[q, k, v]`.
struct AttentionOp {
    n_heads: usize,
    spans: Vec<Range<usize>>,
    /// probabilities per head, per query, concatenated over the span
    probs: Vec<f64>,
    offsets: Vec<usize>,
}

/// Per-head transposed copy: `out[h][dim][t]`.
fn split_heads_t(x: &RealMatrix, n_heads: usize) -> Vec<RealMatrix> {
    let hd = x.cols() / n_heads;
    (0..n_heads)
        .map(|h| RealMatrix::from_fn(hd, x.rows(), |i, t| x.get(t, h * hd + i)))
        .collect()
}

fn attention_forward(q: &RealMatrix, k: &RealMatrix, v: &RealMatrix, n_heads: usize, spans: Vec<Range<usize>>) -> (RealMatrix, AttentionOp) {
    let n = q.rows();
    let d = q.cols();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let kt = split_heads_t(k, n_heads);
    let mut offsets = Vec::with_capacity(n + 1);
    offsets.push(0);
    for s in &spans {
        offsets.push(offsets.last().unwrap() + s.len());
    }
    let per_head = *offsets.last().unwrap();
    let mut probs = vec![0.0; per_head * n_heads];
    let mut out = RealMatrix::zeros(n, d);
    let mut scores = Vec::new();
    for h in 0..n_heads {
        let kth = &kt[h];
        for t in 0..n {
            let span = spans[t].clone();
            scores.clear();
            scores.resize(span.len(), 0.0);
            let qrow = &q.row(t)[h * hd..(h + 1) * hd];
            for (i, &qv) in qrow.iter().enumerate() {
                let krow = &kth.row(i)[span.clone()];
                for (s, &kv) in scores.iter_mut().zip(krow) {
                    *s += qv * kv;
                }
            }
            for s in scores.iter_mut() {
                *s *= scale;
            }
            crate::numerics::softmax_in_place(&mut scores);
            let orow = &mut out.row_mut(t)[h * hd..(h + 1) * hd];
            for (j, &p) in span.clone().zip(scores.iter()) {
                let vrow = &v.row(j)[h * hd..(h + 1) * hd];
                for (o, &vv) in orow.iter_mut().zip(vrow) {
                    *o += p * vv;
                }
            }
            let base = h * per_head + offsets[t];
            probs[base..base + span.len()].copy_from_slice(&scores);
        }
    }
    (
        out,
        AttentionOp {
            n_heads,
            spans,
            probs,
            offsets,
        },
    )
}

impl TapeOp for AttentionOp {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn backward(&self, g: &RealMatrix, inputs: &[&RealMatrix], _: &RealMatrix, _: &[bool]) -> Vec<Option<RealMatrix>> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let n = q.rows();
        let d = q.cols();
        let hd = d / self.n_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let per_head = *self.offsets.last().unwrap();
        let vt = split_heads_t(v, self.n_heads);
        let mut dq = RealMatrix::zeros(n, d);
        let mut dk = RealMatrix::zeros(n, d);
        let mut dv = RealMatrix::zeros(n, d);
        let mut dp = Vec::new();
        for h in 0..self.n_heads {
            let cols = h * hd..(h + 1) * hd;
            for t in 0..n {
                let span = self.spans[t].clone();
                let base = h * per_head + self.offsets[t];
                let p = &self.probs[base..base + span.len()];
                let grow = &g.row(t)[cols.clone()];
                dp.clear();
                dp.resize(span.len(), 0.0);
                for (i, &gv) in grow.iter().enumerate() {
                    let vrow = &vt[h].row(i)[span.clone()];
                    for (x, &vv) in dp.iter_mut().zip(vrow) {
                        *x += gv * vv;
                    }
                }
                let mean: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                let qrow = &q.row(t)[cols.clone()];
                for (jj, j) in span.clone().enumerate() {
                    let ds = p[jj] * (dp[jj] - mean) * scale;
                    let krow = &k.row(j)[cols.clone()];
                    for (o, &kv) in dq.row_mut(t)[cols.clone()].iter_mut().zip(krow) {
                        *o += ds * kv;
                    }
                    for (o, &qv) in dk.row_mut(j)[cols.clone()].iter_mut().zip(qrow) {
                        *o += ds * qv;
                    }
                    for (o, &gv) in dv.row_mut(j)[cols.clone()].iter_mut().zip(grow) {
                        *o += p[jj] * gv;
                    }
                }
            }
        }
        vec![Some(dq), Some(dk), Some(dv)]
    }
}

pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, n_heads: usize, spans: Vec<Range<usize>>) -> Var {
    let (out, op) = attention_forward(tape.value(q), tape.value(k), tape.value(v), n_heads, spans);
    tape.push_op(&[q, k, v], out, Box::new(op))
}

/// Mean cross-entropy over positions with nonzero weight.
struct CrossEntropyOp {
    targets: Vec<usize>,
    weights: Vec<f64>,
    total: f64,
    probs: RealMatrix,
}

impl TapeOp for CrossEntropyOp {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, g: &RealMatrix, _: &[&RealMatrix], _: &RealMatrix, _: &[bool]) -> Vec<Option<RealMatrix>> {
        let upstream = g.data()[0];
        let mut d = self.probs.clone();
        for (t, (&y, &w)) in self.targets.iter().zip(&self.weights).enumerate() {
            let k = upstream * w / self.total;
            let row = d.row_mut(t);
            if w == 0.0 {
                row.iter_mut().for_each(|x| *x = 0.0);
                continue;
            }
            row[y] -= 1.0;
            row.iter_mut().for_each(|x| *x *= k);
        }
        vec![Some(d)]
    }
}

/// Records the mean next-token cross-entropy. `weights[t] = 0` excludes a
/// position; an all-zero weight vector yields a zero loss.
pub fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
    let l = tape.value(logits);
    if targets.len() != l.rows() || weights.len() != l.rows() {
        return Err(ModelError::Length {
            got: targets.len(),
            expected: l.rows(),
        });
    }
    if let Some((position, &token)) = targets.iter().enumerate().find(|(_, &y)| y >= l.cols()) {
        return Err(ModelError::TokenOutOfRange {
            position,
            token,
            vocab: l.cols(),
        });
    }
    let probs = crate::numerics::softmax_rows(l);
    let total: f64 = weights.iter().sum();
    let mut loss = 0.0;
    for (t, (&y, &w)) in targets.iter().zip(weights).enumerate() {
        if w != 0.0 {
            loss -= w * log_softmax_at(l.row(t), y);
        }
    }
    let (value, total) = if total > 0.0 { (loss / total, total) } else { (0.0, 1.0) };
    Ok(tape.push_op(
        &[logits],
        RealMatrix::scalar(value),
        Box::new(CrossEntropyOp {
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            total,
            probs,
        }),
    ))
}

/// `log softmax(row)[y]`, max-shifted.
pub fn log_softmax_at(row: &[f64], y: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[y] - lse
}

fn check_tokens(tokens: &[usize], vocab: usize) -> Result<()> {
    if let Some((position, &token)) = tokens.iter().enumerate().find(|(_, &t)| t >= vocab) {
        return Err(ModelError::TokenOutOfRange { position, token, vocab });
    }
    Ok(())
}

/// Sequence-level context shared by every block of one forward pass.
pub struct ForwardContext {
    pub mask: BoundaryMask,
    pub masked: bool,
    pub positions: Vec<usize>,
    pub spans: Vec<Range<usize>>,
    pub chunks: Vec<ttt::Chunk>,
}

impl ForwardContext {
    /// `mask = None` treats the whole sequence as one document.
    pub fn new(n: usize, config: &ModelConfig, mask: Option<&BoundaryMask>) -> Result<Self> {
        let (mask, masked) = match mask {
            Some(m) => {
                if m.len() != n {
                    return Err(ModelError::Length { got: n, expected: m.len() });
                }
                (m.clone(), true)
            }
            None => (BoundaryMask::single(n), false),
        };
        Ok(Self {
            positions: mask.positions(),
            spans: attention_spans(&mask, config.window),
            chunks: ttt::plan_chunks(&mask, config.ttt.chunk_size),
            mask,
            masked,
        })
    }
}

/// `x + attn(rms(x)) · W_oᵀ`, recorded on `tape`.
pub fn attention_sublayer(tape: &mut Tape, x: Var, lv: &LayerVars, config: &ModelConfig, ctx: &ForwardContext) -> Result<Var> {
    let h = rms_norm(tape, x, lv.attn_norm, config.norm_eps);
    let att = causal_attention_tape(tape, h, lv, config, ctx)?;
    Ok(tape.add(x, att)?)
}

/// Attention with projections, rotary embedding and the output projection.
pub fn causal_attention_tape(tape: &mut Tape, h: Var, lv: &LayerVars, config: &ModelConfig, ctx: &ForwardContext) -> Result<Var> {
    let q = tape.matmul_bt(h, lv.wq)?;
    let k = tape.matmul_bt(h, lv.wk)?;
    let v = tape.matmul_bt(h, lv.wv)?;
    let q = rope(tape, q, &ctx.positions, config.n_heads, config.rope_base);
    let k = rope(tape, k, &ctx.positions, config.n_heads, config.rope_base);
    let a = attention(tape, q, k, v, config.n_heads, ctx.spans.clone());
    Ok(tape.matmul_bt(a, lv.wo)?)
}

/// Gated MLP on `h`. TTT layers route the down projection through the
/// chunk-wise fast weight with targets built from `x0`.
pub fn mlp_tape(tape: &mut Tape, h: Var, x0: Var, lv: &LayerVars, config: &ModelConfig, ctx: &ForwardContext) -> Result<Var> {
    let gate = tape.matmul_bt(h, lv.w_gate)?;
    let up = tape.matmul_bt(h, lv.w_up)?;
    let act = tape.activate(gate, config.ttt.activation);
    let z = tape.mul(act, up)?;
    match lv.target {
        None => Ok(tape.matmul_bt(z, lv.w_down)?),
        Some((w_target, conv)) => {
            let lc = config.layer_config();
            let c = ttt::conv_tape(tape, x0, conv, &lc.conv_offsets, &ctx.chunks)?;
            let vhat = tape.matmul(c, w_target)?;
            Ok(ttt::fast_weight_tape(tape, z, vhat, lv.w_down, &ctx.chunks, lc.eta, lc.clip_tau, config.scan_mode)?)
        }
    }
}

/// One pre-norm residual block on `tape`.
pub fn block_tape(tape: &mut Tape, x: Var, x0: Var, lv: &LayerVars, config: &ModelConfig, ctx: &ForwardContext) -> Result<Var> {
    let x = attention_sublayer(tape, x, lv, config, ctx)?;
    let h = rms_norm(tape, x, lv.mlp_norm, config.norm_eps);
    let m = mlp_tape(tape, h, x0, lv, config, ctx)?;
    Ok(tape.add(x, m)?)
}

/// Full forward pass on `tape`, returning the logits node.
pub fn forward_tape(tape: &mut Tape, vars: &ModelVars, tokens: &[usize], config: &ModelConfig, mask: Option<&BoundaryMask>) -> Result<Var> {
    config.validate()?;
    check_tokens(tokens, config.vocab_size)?;
    let ctx = ForwardContext::new(tokens.len(), config, mask)?;
    let x0 = embed(tape, vars.embedding, tokens);
    let mut x = x0;
    for lv in &vars.layers {
        x = block_tape(tape, x, x0, lv, config, &ctx)?;
    }
    let h = rms_norm(tape, x, vars.final_norm, config.norm_eps);
    let readout = vars.unembedding.unwrap_or(vars.embedding);
    Ok(tape.matmul_bt(h, readout)?)
}

/// Logits for `tokens` (n × vocab).
pub fn model_forward(tokens: &[usize], params: &ModelParams, config: &ModelConfig, mask: Option<&BoundaryMask>) -> Result<RealMatrix> {
    let mut tape = Tape::new();
    let vars = ModelVars::register(&mut tape, params, config, false);
    let logits = forward_tape(&mut tape, &vars, tokens, config, mask)?;
    Ok(tape.value(logits).clone())
}

/// Multi-head causal attention of one layer on `x` (no residual, no norm).
pub fn causal_attention(x: &RealMatrix, layer: &LayerParams, config: &ModelConfig, mask: Option<&BoundaryMask>) -> Result<RealMatrix> {
    let ctx = ForwardContext::new(x.rows(), config, mask)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let lv = layer_constants(&mut tape, layer);
    let out = causal_attention_tape(&mut tape, xv, &lv, config, &ctx)?;
    Ok(tape.value(out).clone())
}

/// One block applied to `x`, with `x0` the token embeddings feeding TTT targets.
pub fn block_forward(x: &RealMatrix, x0: &RealMatrix, layer: &LayerParams, config: &ModelConfig, mask: Option<&BoundaryMask>) -> Result<RealMatrix> {
    let ctx = ForwardContext::new(x.rows(), config, mask)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let x0v = tape.constant(x0.clone());
    let lv = layer_constants(&mut tape, layer);
    let out = block_tape(&mut tape, xv, x0v, &lv, config, &ctx)?;
    Ok(tape.value(out).clone())
}

fn layer_constants(tape: &mut Tape, l: &LayerParams) -> LayerVars {
    LayerVars {
        attn_norm: tape.constant(l.attn_norm.clone()),
        wq: tape.constant(l.wq.clone()),
        wk: tape.constant(l.wk.clone()),
        wv: tape.constant(l.wv.clone()),
        wo: tape.constant(l.wo.clone()),
        mlp_norm: tape.constant(l.mlp_norm.clone()),
        w_up: tape.constant(l.w_up.clone()),
        w_gate: tape.constant(l.w_gate.clone()),
        w_down: tape.constant(l.w_down.clone()),
        target: l
            .target
            .as_ref()
            .map(|t| (tape.constant(t.w_target.clone()), tape.constant(t.conv.clone()))),
    }
}

/// Next-token weights: position `t` predicts `t+1` only inside one document.
pub fn next_token_weights(mask: &BoundaryMask) -> Vec<f64> {
    let ids = mask.doc_ids();
    (0..ids.len())
        .map(|t| if t + 1 < ids.len() && ids[t + 1] == ids[t] { 1.0 } else { 0.0 })
        .collect()
}

/// Mean cross-entropy of `logits[t]` against `tokens[t+1]`, skipping the
/// last position of every document.
pub fn ntp_loss(logits: &RealMatrix, tokens: &[usize], mask: &BoundaryMask) -> Result<f64> {
    if tokens.len() != logits.rows() || mask.len() != logits.rows() {
        return Err(ModelError::Length {
            got: tokens.len(),
            expected: logits.rows(),
        });
    }
    let weights = next_token_weights(mask);
    let mut total = 0.0;
    let mut count = 0.0;
    for t in 0..tokens.len() {
        if weights[t] > 0.0 {
            let y = tokens[t + 1];
            if y >= logits.cols() {
                return Err(ModelError::TokenOutOfRange {
                    position: t + 1,
                    token: y,
                    vocab: logits.cols(),
                });
            }
            total -= log_softmax_at(logits.row(t), y);
            count += 1.0;
        }
    }
    Ok(if count > 0.0 { total / count } else { 0.0 })
}

/// Finite-difference check of the next-token loss gradient with respect to
/// every tensor of the model, frozen ones included.
pub fn model_grad_check(
    params: &ModelParams,
    config: &ModelConfig,
    tokens: &[usize],
    mask: Option<&BoundaryMask>,
    check: &GradCheckConfig,
) -> Result<GradientReport> {
    if tokens.is_empty() {
        return Err(ModelError::Length { got: 0, expected: 1 });
    }
    let mask = mask.cloned().unwrap_or_else(|| BoundaryMask::single(tokens.len()));
    let mut targets = tokens[1..].to_vec();
    targets.push(0);
    let weights = next_token_weights(&mask);
    grad_check(
        |t: &mut Tape, vars: &[Var]| -> Result<Var> {
            let mv = ModelVars::from_ordered(vars, config);
            let logits = forward_tape(t, &mv, tokens, config, Some(&mask))?;
            cross_entropy(t, logits, &targets, &weights)
        },
        &params.named(),
        check,
    )
}
