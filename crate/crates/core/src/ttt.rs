//! In-place test-time training inside a gated MLP.
//!
//! The down projection is split into a slow part `W_down0` and a fast delta
//! `S`. Tokens are processed in chunks of `C`. Each chunk is first
//! *applied* with the current effective weight `W_down0 + η·S`, and only then
//! contributes its own update `ΔW = V̂ᵀ Z` to `S`. `V̂` is a look-ahead
//! convolution of the token embeddings projected by `W_target`, evaluated
//! inside the chunk only, so a chunk's update never depends on later chunks.
//!
//! Chunks never straddle documents: every document is chunked from its first
//! token, and `S` restarts from zero at each document start.
//!
//! Three execution paths share these semantics and must agree bitwise:
//! [`forward_sequential`] (apply-then-update loop), [`forward_scan`] in
//! [`ScanMode::SerialOrder`] (delta stage / prefix-sum stage / apply stage)
//! and token-by-token [`stream_step`]. [`ScanMode::Tree`] reassociates the
//! prefix sum and matches to rounding error.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, TapeOp, Var};
use crate::numerics::{
    self, conv1d_segments, frob_norm, matmul_at, matmul_bt, Activation, ConvSpec, NumericsError,
    RealMatrix, SeededRng,
};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TttError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid ttt config: {0}")]
    Config(String),
    #[error("length mismatch: {what} has {got} rows, expected {expected}")]
    Length {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("document ids must be nondecreasing (position {0})")]
    DocumentOrder(usize),
}

pub type Result<T> = std::result::Result<T, TttError>;

/// Hyperparameters of one TTT-enabled MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TttLayerConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub chunk_size: usize,
    /// Token offsets read by the target convolution (default `0..5`).
    pub conv_offsets: Vec<isize>,
    /// Fast-weight learning rate η.
    pub eta: f64,
    /// Frobenius-norm cap applied to each chunk delta.
    pub clip_tau: Option<f64>,
    pub activation: Activation,
}

impl TttLayerConfig {
    pub fn new(d_model: usize, d_ff: usize, chunk_size: usize) -> Self {
        Self {
            d_model,
            d_ff,
            chunk_size,
            conv_offsets: (0..5).collect(),
            eta: 1e-3,
            clip_tau: None,
            activation: Activation::Silu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk_size == 0 {
            return Err(TttError::Config("chunk_size must be >= 1".into()));
        }
        if self.d_model == 0 || self.d_ff == 0 {
            return Err(TttError::Config("d_model and d_ff must be >= 1".into()));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(TttError::Config(format!("eta must be finite and >= 0, got {}", self.eta)));
        }
        if let Some(tau) = self.clip_tau {
            if !(tau.is_finite() && tau > 0.0) {
                return Err(TttError::Config(format!("clip_tau must be > 0, got {tau}")));
            }
        }
        if self.conv_offsets.is_empty() {
            return Err(TttError::Config("conv_offsets must not be empty".into()));
        }
        let mut o = self.conv_offsets.clone();
        o.sort_unstable();
        o.dedup();
        if o.len() != self.conv_offsets.len() {
            return Err(TttError::Config("conv_offsets must be distinct".into()));
        }
        Ok(())
    }
}

/// Slow weights of a TTT layer. Shapes follow `O = Z · W_down0ᵀ`, so the
/// update `V̂ᵀ Z` lands on `W_down0` without transposes.
#[derive(Clone, Debug, PartialEq)]
pub struct TttLayerParams {
    /// d_ff × d_model
    pub w_up: RealMatrix,
    /// d_ff × d_model
    pub w_gate: RealMatrix,
    /// d_model × d_ff
    pub w_down0: RealMatrix,
    /// d_model × d_model
    pub w_target: RealMatrix,
    pub conv: ConvSpec,
}

impl TttLayerParams {
    /// Zero-impact initialization: zero conv kernel and a diagonal `W_target`
    /// with N(0, σ²) entries; projections are truncated normal with `std`.
    pub fn init(config: &TttLayerConfig, rng: &mut SeededRng, std: f64, target_sigma: f64) -> Self {
        let (d, f) = (config.d_model, config.d_ff);
        let w_up = rng.truncated_normal_matrix(f, d, std);
        let w_gate = rng.truncated_normal_matrix(f, d, std);
        let w_down0 = rng.truncated_normal_matrix(d, f, std);
        let mut w_target = RealMatrix::zeros(d, d);
        for i in 0..d {
            w_target.set(i, i, rng.normal() * target_sigma);
        }
        let conv = ConvSpec::zeros(config.conv_offsets.clone(), d).expect("validated offsets");
        Self {
            w_up,
            w_gate,
            w_down0,
            w_target,
            conv,
        }
    }

    pub fn check_shapes(&self, config: &TttLayerConfig) -> Result<()> {
        let (d, f) = (config.d_model, config.d_ff);
        let expect = [
            ("w_up", self.w_up.shape(), (f, d)),
            ("w_gate", self.w_gate.shape(), (f, d)),
            ("w_down0", self.w_down0.shape(), (d, f)),
            ("w_target", self.w_target.shape(), (d, d)),
            ("conv", self.conv.kernel().shape(), (config.conv_offsets.len(), d)),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(TttError::Config(format!("{name} has shape {got:?}, expected {want:?}")));
            }
        }
        if self.conv.offsets() != config.conv_offsets.as_slice() {
            return Err(TttError::Config("conv offsets differ from config".into()));
        }
        Ok(())
    }
}

/// Per-position document ids; equal ids form one document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoundaryMask {
    doc_ids: Vec<u32>,
}

impl BoundaryMask {
    pub fn new(doc_ids: Vec<u32>) -> Result<Self> {
        if let Some(p) = doc_ids.windows(2).position(|w| w[1] < w[0]) {
            return Err(TttError::DocumentOrder(p + 1));
        }
        Ok(Self { doc_ids })
    }

    /// One document spanning `n` positions.
    pub fn single(n: usize) -> Self {
        Self { doc_ids: vec![0; n] }
    }

    /// Documents of the given lengths, back to back.
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut doc_ids = Vec::with_capacity(lengths.iter().sum());
        for (i, &len) in lengths.iter().enumerate() {
            doc_ids.extend(std::iter::repeat_n(i as u32, len));
        }
        Self { doc_ids }
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn doc_ids(&self) -> &[u32] {
        &self.doc_ids
    }

    /// Contiguous document ranges.
    pub fn documents(&self) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for t in 1..=self.doc_ids.len() {
            if t == self.doc_ids.len() || self.doc_ids[t] != self.doc_ids[t - 1] {
                out.push(start..t);
                start = t;
            }
        }
        out
    }

    /// Position of each token within its document.
    pub fn positions(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.doc_ids.len());
        for doc in self.documents() {
            out.extend(0..doc.len());
        }
        out
    }

    /// Sub-mask for positions `range`.
    pub fn slice(&self, range: Range<usize>) -> Self {
        Self {
            doc_ids: self.doc_ids[range].to_vec(),
        }
    }
}

/// One chunk of a sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Chunk {
    pub rows: Range<usize>,
    /// First chunk of its document: the fast weight restarts at zero here.
    pub starts_document: bool,
}

/// Splits every document into chunks of at most `chunk_size` rows, counted
/// from the document's first token.
pub fn plan_chunks(mask: &BoundaryMask, chunk_size: usize) -> Vec<Chunk> {
    let mut out = Vec::new();
    for doc in mask.documents() {
        let mut start = doc.start;
        while start < doc.end {
            let end = (start + chunk_size).min(doc.end);
            out.push(Chunk {
                rows: start..end,
                starts_document: start == doc.start,
            });
            start = end;
        }
    }
    out
}

/// Accumulated fast-weight delta plus the partial chunk of a stream.
#[derive(Clone, Debug, PartialEq)]
pub struct FastWeightState {
    /// Σ of chunk deltas since the last reset (d_model × d_ff).
    pub delta: RealMatrix,
    pub chunks_seen: usize,
    pending_x0: Vec<f64>,
    pending_z: Vec<f64>,
    pending_rows: usize,
    effective: Option<RealMatrix>,
}

impl FastWeightState {
    pub fn new(d_model: usize, d_ff: usize) -> Self {
        Self {
            delta: RealMatrix::zeros(d_model, d_ff),
            chunks_seen: 0,
            pending_x0: Vec::new(),
            pending_z: Vec::new(),
            pending_rows: 0,
            effective: None,
        }
    }

    pub fn reset(&mut self) {
        let (d, f) = self.delta.shape();
        *self = Self::new(d, f);
    }

    pub fn pending_rows(&self) -> usize {
        self.pending_rows
    }

    pub fn is_reset(&self) -> bool {
        self.pending_rows == 0 && self.delta.data().iter().all(|&v| v == 0.0)
    }

    /// `W_down0 + η·S`.
    pub fn effective_weight(&self, w_down0: &RealMatrix, eta: f64) -> RealMatrix {
        effective_weight(w_down0, &self.delta, eta)
    }
}

/// `W_down0 + η·S`, elementwise. Shared by every execution path.
pub fn effective_weight(w_down0: &RealMatrix, delta: &RealMatrix, eta: f64) -> RealMatrix {
    let mut out = w_down0.clone();
    for (o, &s) in out.data_mut().iter_mut().zip(delta.data()) {
        *o += eta * s;
    }
    out
}

/// `Z = φ(H W_gateᵀ) ⊙ (H W_upᵀ)`.
pub fn compute_preactivation(h: &RealMatrix, params: &TttLayerParams, activation: Activation) -> Result<RealMatrix> {
    let gate = matmul_bt(h, &params.w_gate)?;
    let up = matmul_bt(h, &params.w_up)?;
    let mut z = numerics::activate(&gate, activation);
    for (zv, &u) in z.data_mut().iter_mut().zip(up.data()) {
        *zv *= u;
    }
    Ok(z)
}

/// `V̂ = Conv1D(X0) W_target` over one chunk. Convolution taps stop at the
/// chunk edges and at document boundaries inside `mask`.
pub fn compute_target(x0_chunk: &RealMatrix, params: &TttLayerParams, mask: &BoundaryMask) -> Result<RealMatrix> {
    if mask.len() != x0_chunk.rows() {
        return Err(TttError::Length {
            what: "mask",
            got: mask.len(),
            expected: x0_chunk.rows(),
        });
    }
    let conv = conv1d_segments(x0_chunk, &params.conv, &mask.documents())?;
    Ok(numerics::matmul(&conv, &params.w_target)?)
}

/// Rescales `delta` to Frobenius norm `tau` when it exceeds `tau`.
pub fn clip_delta(delta: RealMatrix, tau: f64) -> RealMatrix {
    let norm = frob_norm(&delta);
    if norm <= tau {
        return delta;
    }
    // Rounding can leave the rescaled norm an ulp above tau.
    let mut s = tau / norm;
    let mut out = delta.map(|v| v * s);
    for _ in 0..8 {
        if frob_norm(&out) <= tau {
            break;
        }
        s = s.next_down();
        out = delta.map(|v| v * s);
    }
    out
}

/// `ΔW = V̂ᵀ Z`, optionally norm-clipped. η is applied when the delta is
/// folded into the effective weight, not here.
pub fn chunk_delta(vhat: &RealMatrix, z: &RealMatrix, clip_tau: Option<f64>) -> Result<RealMatrix> {
    if vhat.rows() != z.rows() {
        return Err(TttError::Length {
            what: "V̂",
            got: vhat.rows(),
            expected: z.rows(),
        });
    }
    let raw = matmul_at(vhat, z)?;
    Ok(match clip_tau {
        Some(tau) => clip_delta(raw, tau),
        None => raw,
    })
}

fn check_inputs(h: &RealMatrix, x0: &RealMatrix, params: &TttLayerParams, config: &TttLayerConfig, mask: &BoundaryMask) -> Result<()> {
    config.validate()?;
    params.check_shapes(config)?;
    let n = h.rows();
    if x0.rows() != n {
        return Err(TttError::Length {
            what: "X0",
            got: x0.rows(),
            expected: n,
        });
    }
    if mask.len() != n {
        return Err(TttError::Length {
            what: "mask",
            got: mask.len(),
            expected: n,
        });
    }
    if h.cols() != config.d_model || x0.cols() != config.d_model {
        return Err(TttError::Config(format!(
            "inputs have {} / {} columns, d_model is {}",
            h.cols(),
            x0.cols(),
            config.d_model
        )));
    }
    Ok(())
}

/// Targets for a whole sequence: the chunk-local convolution for every chunk
/// of `chunks`, then one projection by `W_target`.
pub fn sequence_targets(x0: &RealMatrix, conv: &ConvSpec, w_target: &RealMatrix, chunks: &[Chunk]) -> Result<RealMatrix> {
    let segs: Vec<Range<usize>> = chunks.iter().map(|c| c.rows.clone()).collect();
    let c = conv1d_segments(x0, conv, &segs)?;
    Ok(numerics::matmul(&c, w_target)?)
}

/// Plain apply-then-update recurrence over precomputed `Z` and `V̂`.
fn recurrence_sequential(
    z: &RealMatrix,
    vhat: &RealMatrix,
    w_down0: &RealMatrix,
    chunks: &[Chunk],
    eta: f64,
    clip_tau: Option<f64>,
) -> Result<(RealMatrix, RealMatrix, usize)> {
    let (d, f) = w_down0.shape();
    let mut out = RealMatrix::zeros(z.rows(), d);
    let mut s = RealMatrix::zeros(d, f);
    let mut seen = 0;
    for chunk in chunks {
        if chunk.starts_document {
            s = RealMatrix::zeros(d, f);
            seen = 0;
        }
        let zc = z.slice_rows(chunk.rows.clone());
        let w = effective_weight(w_down0, &s, eta);
        let oc = matmul_bt(&zc, &w)?;
        out.data_mut()[chunk.rows.start * d..chunk.rows.end * d].copy_from_slice(oc.data());
        let vc = vhat.slice_rows(chunk.rows.clone());
        s.add_assign(&chunk_delta(&vc, &zc, clip_tau)?)?;
        seen += 1;
    }
    Ok((out, s, seen))
}

/// Reference path: for each chunk, output with the pre-update weight, then
/// fold the chunk's delta into the state. Returns the outputs and the state
/// after the last chunk of the last document.
pub fn forward_sequential(
    h: &RealMatrix,
    x0: &RealMatrix,
    params: &TttLayerParams,
    config: &TttLayerConfig,
    mask: &BoundaryMask,
) -> Result<(RealMatrix, FastWeightState)> {
    check_inputs(h, x0, params, config, mask)?;
    let chunks = plan_chunks(mask, config.chunk_size);
    let z = compute_preactivation(h, params, config.activation)?;
    let vhat = sequence_targets(x0, &params.conv, &params.w_target, &chunks)?;
    let (out, s, seen) = recurrence_sequential(&z, &vhat, &params.w_down0, &chunks, config.eta, config.clip_tau)?;
    let mut state = FastWeightState::new(config.d_model, config.d_ff);
    state.delta = s;
    state.chunks_seen = seen;
    Ok((out, state))
}

/// Reduction order of the prefix-sum stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScanMode {
    /// Left-to-right accumulation; bitwise equal to [`forward_sequential`].
    #[default]
    SerialOrder,
    /// Pairwise tree reduction; equal up to reassociation.
    Tree,
}

impl ScanMode {
    pub fn name(self) -> &'static str {
        match self {
            ScanMode::SerialOrder => "serial-order",
            ScanMode::Tree => "tree",
        }
    }
}

/// Segmented inclusive scan: `(start, value)` pairs, sums restart at starts.
fn segmented_inclusive_tree(items: Vec<(bool, RealMatrix)>) -> Vec<(bool, RealMatrix)> {
    fn combine(a: &(bool, RealMatrix), b: &(bool, RealMatrix)) -> (bool, RealMatrix) {
        if b.0 {
            (true, b.1.clone())
        } else {
            let mut v = a.1.clone();
            v.add_assign(&b.1).expect("equal shapes");
            (a.0, v)
        }
    }
    let n = items.len();
    if n <= 1 {
        return items;
    }
    let pairs: Vec<(bool, RealMatrix)> = (0..n / 2)
        .into_par_iter()
        .map(|i| combine(&items[2 * i], &items[2 * i + 1]))
        .collect();
    let scanned = segmented_inclusive_tree(pairs);
    (0..n)
        .into_par_iter()
        .map(|i| {
            if i % 2 == 1 {
                scanned[i / 2].clone()
            } else if i == 0 {
                items[0].clone()
            } else {
                combine(&scanned[i / 2 - 1], &items[i])
            }
        })
        .collect()
}

/// Exclusive segmented prefix sums `S_i = Σ_{j<i, same document} ΔW_j`.
pub fn exclusive_prefix(deltas: &[RealMatrix], starts: &[bool], mode: ScanMode) -> Vec<RealMatrix> {
    assert_eq!(deltas.len(), starts.len());
    let Some(first) = deltas.first() else {
        return Vec::new();
    };
    let (d, f) = first.shape();
    match mode {
        ScanMode::SerialOrder => {
            let mut out = Vec::with_capacity(deltas.len());
            let mut running = RealMatrix::zeros(d, f);
            for (delta, &start) in deltas.iter().zip(starts) {
                if start {
                    running = RealMatrix::zeros(d, f);
                }
                out.push(running.clone());
                running.add_assign(delta).expect("equal shapes");
            }
            out
        }
        ScanMode::Tree => {
            let items: Vec<(bool, RealMatrix)> = starts.iter().copied().zip(deltas.iter().cloned()).collect();
            let inclusive = segmented_inclusive_tree(items);
            (0..deltas.len())
                .map(|i| {
                    if starts[i] || i == 0 {
                        RealMatrix::zeros(d, f)
                    } else {
                        inclusive[i - 1].1.clone()
                    }
                })
                .collect()
        }
    }
}

/// Everything the context-parallel path produces, kept for the backward pass.
pub(crate) struct ScanTrace {
    pub out: RealMatrix,
    /// Unclipped `V̂ᵀZ` per chunk.
    pub raw_deltas: Vec<RealMatrix>,
    /// Exclusive prefix per chunk.
    pub prefixes: Vec<RealMatrix>,
    pub final_delta: RealMatrix,
}

/// Three-stage evaluation over precomputed `Z` and `V̂`.
pub(crate) fn recurrence_scan(
    z: &RealMatrix,
    vhat: &RealMatrix,
    w_down0: &RealMatrix,
    chunks: &[Chunk],
    eta: f64,
    clip_tau: Option<f64>,
    mode: ScanMode,
) -> Result<ScanTrace> {
    let (d, f) = w_down0.shape();
    // stage 1: per-chunk deltas, independent
    let raw_deltas: Vec<RealMatrix> = chunks
        .par_iter()
        .map(|c| matmul_at(&vhat.slice_rows(c.rows.clone()), &z.slice_rows(c.rows.clone())))
        .collect::<std::result::Result<_, _>>()?;
    let deltas: Vec<RealMatrix> = match clip_tau {
        Some(tau) => raw_deltas.iter().map(|r| clip_delta(r.clone(), tau)).collect(),
        None => raw_deltas.clone(),
    };
    // stage 2: segmented exclusive prefix sum
    let starts: Vec<bool> = chunks.iter().map(|c| c.starts_document).collect();
    let prefixes = exclusive_prefix(&deltas, &starts, mode);
    // stage 3: outputs, independent
    let pieces: Vec<RealMatrix> = chunks
        .par_iter()
        .zip(prefixes.par_iter())
        .map(|(c, s)| matmul_bt(&z.slice_rows(c.rows.clone()), &effective_weight(w_down0, s, eta)))
        .collect::<std::result::Result<_, _>>()?;
    let mut out = RealMatrix::zeros(z.rows(), d);
    for (c, p) in chunks.iter().zip(&pieces) {
        out.data_mut()[c.rows.start * d..c.rows.end * d].copy_from_slice(p.data());
    }
    let final_delta = match (prefixes.last(), deltas.last()) {
        (Some(s), Some(delta)) => {
            let mut s = s.clone();
            s.add_assign(delta)?;
            s
        }
        _ => RealMatrix::zeros(d, f),
    };
    Ok(ScanTrace {
        out,
        raw_deltas,
        prefixes,
        final_delta,
    })
}

/// Context-parallel evaluation: all chunk deltas at once, one segmented
/// prefix sum, then all chunk outputs at once.
pub fn forward_scan(
    h: &RealMatrix,
    x0: &RealMatrix,
    params: &TttLayerParams,
    config: &TttLayerConfig,
    mask: &BoundaryMask,
    mode: ScanMode,
) -> Result<(RealMatrix, FastWeightState)> {
    check_inputs(h, x0, params, config, mask)?;
    let chunks = plan_chunks(mask, config.chunk_size);
    let per_chunk: Vec<(RealMatrix, RealMatrix)> = chunks
        .par_iter()
        .map(|c| -> Result<(RealMatrix, RealMatrix)> {
            let z = compute_preactivation(&h.slice_rows(c.rows.clone()), params, config.activation)?;
            let conv = numerics::lookahead_conv1d(&x0.slice_rows(c.rows.clone()), &params.conv)?;
            let v = numerics::matmul(&conv, &params.w_target)?;
            Ok((z, v))
        })
        .collect::<Result<_>>()?;
    let (zs, vs): (Vec<RealMatrix>, Vec<RealMatrix>) = per_chunk.into_iter().unzip();
    let z = RealMatrix::vstack(&zs)?;
    let vhat = RealMatrix::vstack(&vs)?;
    let trace = recurrence_scan(&z, &vhat, &params.w_down0, &chunks, config.eta, config.clip_tau, mode)?;
    let last_doc_chunks = chunks
        .iter()
        .rev()
        .position(|c| c.starts_document)
        .map_or(0, |p| p + 1);
    let mut state = FastWeightState::new(config.d_model, config.d_ff);
    state.delta = trace.final_delta;
    state.chunks_seen = last_doc_chunks;
    Ok((trace.out, state))
}

/// Frozen gated MLP: `Z · W_down0ᵀ`.
pub fn frozen_mlp(h: &RealMatrix, params: &TttLayerParams, activation: Activation) -> Result<RealMatrix> {
    let z = compute_preactivation(h, params, activation)?;
    Ok(matmul_bt(&z, &params.w_down0)?)
}

/// Decodes one token. The output uses the weight accumulated from completed
/// chunks; the token then joins the pending chunk, which is folded into the
/// state once it holds `chunk_size` rows. `new_document` resets first.
pub fn stream_step(
    h_t: &[f64],
    x0_t: &[f64],
    state: &mut FastWeightState,
    params: &TttLayerParams,
    config: &TttLayerConfig,
    new_document: bool,
) -> Result<Vec<f64>> {
    if h_t.len() != config.d_model || x0_t.len() != config.d_model {
        return Err(TttError::Length {
            what: "stream row",
            got: h_t.len().min(x0_t.len()),
            expected: config.d_model,
        });
    }
    if new_document {
        state.reset();
    }
    let z = compute_preactivation(&RealMatrix::row_vector(h_t), params, config.activation)?;
    if state.effective.is_none() {
        state.effective = Some(state.effective_weight(&params.w_down0, config.eta));
    }
    let w = state.effective.as_ref().expect("set above");
    let out = matmul_bt(&z, w)?.into_data();

    state.pending_x0.extend_from_slice(x0_t);
    state.pending_z.extend_from_slice(z.data());
    state.pending_rows += 1;
    if state.pending_rows == config.chunk_size {
        flush_pending(state, params, config)?;
    }
    Ok(out)
}

/// Folds a partial pending chunk into the state (used at document ends).
pub fn flush_pending(state: &mut FastWeightState, params: &TttLayerParams, config: &TttLayerConfig) -> Result<()> {
    if state.pending_rows == 0 {
        return Ok(());
    }
    let rows = state.pending_rows;
    let x0 = RealMatrix::new(rows, config.d_model, std::mem::take(&mut state.pending_x0))?;
    let z = RealMatrix::new(rows, config.d_ff, std::mem::take(&mut state.pending_z))?;
    let conv = numerics::lookahead_conv1d(&x0, &params.conv)?;
    let vhat = numerics::matmul(&conv, &params.w_target)?;
    state.delta.add_assign(&chunk_delta(&vhat, &z, config.clip_tau)?)?;
    state.chunks_seen += 1;
    state.pending_rows = 0;
    state.effective = None;
    Ok(())
}

/// Differentiable form of the chunk recurrence, recorded on a tape with
/// inputs `[Z, V̂, W_down0]` and output `O`.
pub(crate) struct FastWeightOp {
    pub chunks: Vec<Chunk>,
    pub eta: f64,
    pub clip_tau: Option<f64>,
    pub raw_deltas: Vec<RealMatrix>,
    pub prefixes: Vec<RealMatrix>,
}

impl FastWeightOp {
    /// Runs the recurrence and returns the output with the op that can
    /// differentiate it.
    pub fn forward(
        z: &RealMatrix,
        vhat: &RealMatrix,
        w_down0: &RealMatrix,
        chunks: Vec<Chunk>,
        eta: f64,
        clip_tau: Option<f64>,
        mode: ScanMode,
    ) -> Result<(RealMatrix, Self)> {
        let trace = recurrence_scan(z, vhat, w_down0, &chunks, eta, clip_tau, mode)?;
        Ok((
            trace.out,
            Self {
                chunks,
                eta,
                clip_tau,
                raw_deltas: trace.raw_deltas,
                prefixes: trace.prefixes,
            },
        ))
    }
}

/// Vector-Jacobian product of `R ↦ clip(R, τ)`.
fn clip_vjp(raw: &RealMatrix, upstream: &RealMatrix, tau: f64) -> RealMatrix {
    let norm = frob_norm(raw);
    if norm <= tau {
        return upstream.clone();
    }
    let dot: f64 = raw.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum();
    let k = dot / (norm * norm);
    let s = tau / norm;
    let mut out = upstream.clone();
    for (o, &r) in out.data_mut().iter_mut().zip(raw.data()) {
        *o = s * (*o - k * r);
    }
    out
}

impl TapeOp for FastWeightOp {
    fn name(&self) -> &'static str {
        "fast_weight"
    }

    fn backward(
        &self,
        g: &RealMatrix,
        inputs: &[&RealMatrix],
        _output: &RealMatrix,
        needs: &[bool],
    ) -> Vec<Option<RealMatrix>> {
        let (z, vhat, w0) = (inputs[0], inputs[1], inputs[2]);
        let (d, f) = w0.shape();
        let mut dz = RealMatrix::zeros(z.rows(), f);
        let mut dv = RealMatrix::zeros(vhat.rows(), d);

        // dS_i = η dO_iᵀ Z_i; dΔ_j = Σ_{i>j, same doc} dS_i (reverse exclusive scan)
        let mut suffix = RealMatrix::zeros(d, f);
        for (i, chunk) in self.chunks.iter().enumerate().rev() {
            let rows = chunk.rows.clone();
            let zc = z.slice_rows(rows.clone());
            let gc = g.slice_rows(rows.clone());
            let vc = vhat.slice_rows(rows.clone());

            let d_delta = match self.clip_tau {
                Some(tau) => clip_vjp(&self.raw_deltas[i], &suffix, tau),
                None => suffix.clone(),
            };
            // through O_i = Z_i (W0 + η S_i)ᵀ
            let w = effective_weight(w0, &self.prefixes[i], self.eta);
            let mut dzc = numerics::matmul(&gc, &w).expect("shapes");
            // through R_i = V̂_iᵀ Z_i
            dzc.add_assign(&numerics::matmul(&vc, &d_delta).expect("shapes")).expect("shapes");
            let dvc = numerics::matmul_bt(&zc, &d_delta).expect("shapes");
            dz.data_mut()[rows.start * f..rows.end * f].copy_from_slice(dzc.data());
            dv.data_mut()[rows.start * d..rows.end * d].copy_from_slice(dvc.data());

            if chunk.starts_document {
                suffix = RealMatrix::zeros(d, f);
            } else {
                let ds = matmul_at(&gc, &zc).expect("shapes");
                suffix.axpy(self.eta, &ds).expect("shapes");
            }
        }
        let dw0 = needs[2].then(|| matmul_at(g, z).expect("shapes"));
        vec![needs[0].then_some(dz), needs[1].then_some(dv), dw0]
    }
}

/// `Conv1D(X0)` on a tape, zero-padded at every chunk boundary.
pub fn conv_tape(tape: &mut Tape, x0: Var, kernel: Var, offsets: &[isize], chunks: &[Chunk]) -> Result<Var> {
    let segs = chunks.iter().map(|c| c.rows.clone()).collect();
    let (out, op) = ConvOp::forward(tape.value(x0), tape.value(kernel), offsets, segs)?;
    Ok(tape.push_op(&[x0, kernel], out, Box::new(op)))
}

/// The apply-then-update recurrence on a tape, differentiable in `Z`, `V̂`
/// and `W_down0`.
#[allow(clippy::too_many_arguments)]
pub fn fast_weight_tape(
    tape: &mut Tape,
    z: Var,
    vhat: Var,
    w_down0: Var,
    chunks: &[Chunk],
    eta: f64,
    clip_tau: Option<f64>,
    mode: ScanMode,
) -> Result<Var> {
    let (out, op) = FastWeightOp::forward(tape.value(z), tape.value(vhat), tape.value(w_down0), chunks.to_vec(), eta, clip_tau, mode)?;
    Ok(tape.push_op(&[z, vhat, w_down0], out, Box::new(op)))
}

/// Differentiable chunk-local convolution with inputs `[X0, kernel]`.
pub(crate) struct ConvOp {
    pub offsets: Vec<isize>,
    pub segments: Vec<Range<usize>>,
}

impl ConvOp {
    pub fn forward(x: &RealMatrix, kernel: &RealMatrix, offsets: &[isize], segments: Vec<Range<usize>>) -> Result<(RealMatrix, Self)> {
        let spec = ConvSpec::new(offsets.to_vec(), kernel.clone())?;
        let out = conv1d_segments(x, &spec, &segments)?;
        Ok((
            out,
            Self {
                offsets: offsets.to_vec(),
                segments,
            },
        ))
    }
}

impl TapeOp for ConvOp {
    fn name(&self) -> &'static str {
        "conv1d"
    }

    fn backward(
        &self,
        g: &RealMatrix,
        inputs: &[&RealMatrix],
        _output: &RealMatrix,
        needs: &[bool],
    ) -> Vec<Option<RealMatrix>> {
        let (x, kernel) = (inputs[0], inputs[1]);
        let d = x.cols();
        let mut dx = RealMatrix::zeros(x.rows(), d);
        let mut dk = RealMatrix::zeros(kernel.rows(), d);
        for seg in &self.segments {
            for t in seg.clone() {
                let g_row = g.row(t);
                for (j, &off) in self.offsets.iter().enumerate() {
                    let src = t as isize + off;
                    if src < seg.start as isize || src >= seg.end as isize {
                        continue;
                    }
                    let src = src as usize;
                    if needs[0] {
                        let k_row = kernel.row(j);
                        let dx_row = dx.row_mut(src);
                        for ((o, &gv), &kv) in dx_row.iter_mut().zip(g_row).zip(k_row) {
                            *o += gv * kv;
                        }
                    }
                    if needs[1] {
                        let x_row = x.row(src);
                        let dk_row = dk.row_mut(j);
                        for ((o, &gv), &xv) in dk_row.iter_mut().zip(g_row).zip(x_row) {
                            *o += gv * xv;
                        }
                    }
                }
            }
        }
        vec![needs[0].then_some(dx), needs[1].then_some(dk)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(w_gate: f64, w_up: f64) -> TttLayerParams {
        TttLayerParams {
            w_up: RealMatrix::scalar(w_up),
            w_gate: RealMatrix::scalar(w_gate),
            w_down0: RealMatrix::scalar(1.0),
            w_target: RealMatrix::identity(1),
            conv: ConvSpec::unit_tap(1, 1),
        }
    }

    fn random_setup(seed: u64, d: usize, f: usize, c: usize, n: usize) -> (TttLayerConfig, TttLayerParams, RealMatrix, RealMatrix) {
        let mut rng = SeededRng::new(seed);
        let mut config = TttLayerConfig::new(d, f, c);
        config.eta = 0.1;
        let mut params = TttLayerParams::init(&config, &mut rng, 0.5, 0.5);
        *params.conv.kernel_mut() = rng.normal_matrix(5, d, 0.5);
        params.w_target = rng.normal_matrix(d, d, 0.5);
        let h = rng.normal_matrix(n, d, 1.0);
        let x0 = rng.normal_matrix(n, d, 1.0);
        (config, params, h, x0)
    }

    #[test]
    fn preactivation_scalar_oracle() {
        let p = scalar_params(2.0, 3.0);
        let z = compute_preactivation(&RealMatrix::scalar(1.0), &p, Activation::Silu).unwrap();
        let expected = 2.0 / (1.0 + (-2.0f64).exp()) * 3.0;
        assert!((z.get(0, 0) - expected).abs() < 1e-15);
        assert!((z.get(0, 0) - 5.284_782_467_867_295).abs() < 1e-12);
    }

    #[test]
    fn preactivation_of_zero_input_is_zero() {
        let (config, params, _, _) = random_setup(1, 4, 6, 2, 3);
        let z = compute_preactivation(&RealMatrix::zeros(7, 4), &params, config.activation).unwrap();
        assert_eq!(z.shape(), (7, 6));
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn preactivation_shape_mismatch() {
        let (config, params, _, _) = random_setup(1, 4, 6, 2, 3);
        assert!(compute_preactivation(&RealMatrix::zeros(2, 5), &params, config.activation).is_err());
    }

    #[test]
    fn target_examples() {
        let mut rng = SeededRng::new(2);
        let x0 = rng.normal_matrix(4, 3, 1.0);
        let mut p = TttLayerParams::init(&TttLayerConfig::new(3, 2, 4), &mut rng, 0.02, 0.02);
        let mask = BoundaryMask::single(4);
        assert!(compute_target(&x0, &p, &mask).unwrap().data().iter().all(|&v| v == 0.0));

        p.conv = ConvSpec::unit_tap(1, 3);
        p.w_target = RealMatrix::identity(3);
        let v = compute_target(&x0, &p, &mask).unwrap();
        for t in 0..3 {
            assert_eq!(v.row(t), x0.row(t + 1));
        }
        assert_eq!(v.row(3), &[0.0, 0.0, 0.0]);

        p.w_target = RealMatrix::identity(3).scale(2.0);
        let v2 = compute_target(&x0, &p, &mask).unwrap();
        assert_eq!(v2, v.scale(2.0));

        // no tap crosses a document boundary
        let split = BoundaryMask::new(vec![0, 0, 1, 1]).unwrap();
        p.w_target = RealMatrix::identity(3);
        let v3 = compute_target(&x0, &p, &split).unwrap();
        assert_eq!(v3.row(0), x0.row(1));
        assert_eq!(v3.row(1), &[0.0, 0.0, 0.0]);
        assert_eq!(v3.row(2), x0.row(3));
    }

    #[test]
    fn chunk_delta_examples() {
        let d = chunk_delta(&RealMatrix::scalar(3.0), &RealMatrix::from_rows(&[[1.0, 2.0]]), None).unwrap();
        assert_eq!(d, RealMatrix::from_rows(&[[3.0, 6.0]]));
        let z = RealMatrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let d = chunk_delta(&RealMatrix::zeros(2, 2), &z, None).unwrap();
        assert_eq!(d, RealMatrix::zeros(2, 3));
        assert!(chunk_delta(&RealMatrix::zeros(3, 2), &z, None).is_err());
    }

    #[test]
    fn clip_examples() {
        let delta = RealMatrix::from_rows(&[[0.0, 4.0]]);
        let clipped = clip_delta(delta.clone(), 1.0);
        assert_eq!(clipped, delta.scale(0.25));
        assert_eq!(frob_norm(&clipped), 1.0);
        let small = RealMatrix::from_rows(&[[0.3, 0.4]]);
        assert!(clip_delta(small.clone(), 1.0).bitwise_eq(&small));
        assert_eq!(clip_delta(RealMatrix::zeros(2, 2), 1.0), RealMatrix::zeros(2, 2));
    }

    #[test]
    fn single_chunk_uses_slow_weight() {
        let (config, params, h, x0) = random_setup(3, 4, 6, 16, 10);
        let (o, _) = forward_sequential(&h, &x0, &params, &config, &BoundaryMask::single(10)).unwrap();
        let frozen = frozen_mlp(&h, &params, config.activation).unwrap();
        assert!(o.bitwise_eq(&frozen));
    }

    #[test]
    fn two_chunk_scalar_recurrence() {
        // d_model = d_ff = 1, C = 1: W0 = 1, η = 0.5, V̂1 = 3, Z1 = 2, Z2 = 4
        let z = RealMatrix::from_rows(&[[2.0], [4.0]]);
        let v = RealMatrix::from_rows(&[[3.0], [0.0]]);
        let chunks = plan_chunks(&BoundaryMask::single(2), 1);
        let (o, s, seen) = recurrence_sequential(&z, &v, &RealMatrix::scalar(1.0), &chunks, 0.5, None).unwrap();
        assert_eq!(o.get(0, 0), 2.0);
        assert_eq!(o.get(1, 0), 4.0 * (1.0 + 0.5 * 3.0 * 2.0));
        assert_eq!(o.get(1, 0), 16.0);
        assert_eq!(s.get(0, 0), 6.0);
        assert_eq!(seen, 2);
    }

    #[test]
    fn zero_kernel_matches_frozen_mlp() {
        let (config, mut params, h, x0) = random_setup(4, 5, 7, 3, 20);
        params.conv = ConvSpec::zeros(config.conv_offsets.clone(), 5).unwrap();
        let (o, state) = forward_sequential(&h, &x0, &params, &config, &BoundaryMask::single(20)).unwrap();
        assert!(o.bitwise_eq(&frozen_mlp(&h, &params, config.activation).unwrap()));
        assert!(state.delta.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_eta_matches_frozen_mlp() {
        let (mut config, params, h, x0) = random_setup(5, 5, 7, 3, 20);
        config.eta = 0.0;
        let (o, _) = forward_sequential(&h, &x0, &params, &config, &BoundaryMask::single(20)).unwrap();
        assert!(o.bitwise_eq(&frozen_mlp(&h, &params, config.activation).unwrap()));
    }

    #[test]
    fn scan_serial_is_bitwise_sequential() {
        let (config, params, h, x0) = random_setup(6, 6, 9, 4, 32);
        let mask = BoundaryMask::single(32);
        let (a, sa) = forward_sequential(&h, &x0, &params, &config, &mask).unwrap();
        let (b, sb) = forward_scan(&h, &x0, &params, &config, &mask, ScanMode::SerialOrder).unwrap();
        assert!(a.bitwise_eq(&b));
        assert!(sa.delta.bitwise_eq(&sb.delta));
        assert_eq!(sa.chunks_seen, sb.chunks_seen);
        let (c, _) = forward_scan(&h, &x0, &params, &config, &mask, ScanMode::Tree).unwrap();
        assert!(a.max_abs_diff(&c) < 1e-10);
    }

    #[test]
    fn document_boundary_matches_fresh_run() {
        let (config, params, h, x0) = random_setup(7, 4, 6, 4, 32);
        // boundary at chunk 5 of 8
        let mask = BoundaryMask::from_lengths(&[16, 16]);
        let (o, _) = forward_scan(&h, &x0, &params, &config, &mask, ScanMode::SerialOrder).unwrap();
        let (fresh, _) = forward_sequential(
            &h.slice_rows(16..32),
            &x0.slice_rows(16..32),
            &params,
            &config,
            &BoundaryMask::single(16),
        )
        .unwrap();
        assert!(o.slice_rows(16..32).bitwise_eq(&fresh));
    }

    #[test]
    fn chunks_restart_at_documents() {
        let mask = BoundaryMask::from_lengths(&[5, 3]);
        let chunks = plan_chunks(&mask, 2);
        let rows: Vec<_> = chunks.iter().map(|c| c.rows.clone()).collect();
        assert_eq!(rows, vec![0..2, 2..4, 4..5, 5..7, 7..8]);
        let starts: Vec<_> = chunks.iter().map(|c| c.starts_document).collect();
        assert_eq!(starts, vec![true, false, false, true, false]);
    }

    #[test]
    fn mask_rejects_decreasing_ids() {
        assert_eq!(BoundaryMask::new(vec![0, 1, 0]), Err(TttError::DocumentOrder(2)));
    }

    #[test]
    fn stream_matches_batch() {
        let (config, params, h, x0) = random_setup(8, 4, 6, 3, 17);
        let (batch, _) = forward_sequential(&h, &x0, &params, &config, &BoundaryMask::single(17)).unwrap();
        let mut state = FastWeightState::new(4, 6);
        for t in 0..17 {
            let o = stream_step(h.row(t), x0.row(t), &mut state, &params, &config, false).unwrap();
            for (a, b) in o.iter().zip(batch.row(t)) {
                assert_eq!(a.to_bits(), b.to_bits(), "position {t}");
            }
        }
        assert_eq!(state.pending_rows(), 17 % 3);
    }

    #[test]
    fn stream_first_token_uses_slow_weight() {
        let (config, params, h, x0) = random_setup(9, 4, 6, 3, 1);
        let mut state = FastWeightState::new(4, 6);
        state.delta = RealMatrix::filled(4, 6, 1.0);
        let o = stream_step(h.row(0), x0.row(0), &mut state, &params, &config, true).unwrap();
        let frozen = frozen_mlp(&h, &params, config.activation).unwrap();
        assert_eq!(o.as_slice(), frozen.row(0));
    }

    #[test]
    fn clipping_bounds_every_chunk_delta() {
        let (mut config, params, h, x0) = random_setup(10, 4, 6, 4, 24);
        config.clip_tau = Some(1e-3);
        let mask = BoundaryMask::single(24);
        let (a, sa) = forward_sequential(&h, &x0, &params, &config, &mask).unwrap();
        let (b, sb) = forward_scan(&h, &x0, &params, &config, &mask, ScanMode::SerialOrder).unwrap();
        assert!(a.bitwise_eq(&b));
        assert!(sa.delta.bitwise_eq(&sb.delta));
        // 6 chunks, each clipped to 1e-3
        assert!(frob_norm(&sa.delta) <= 6.0 * 1e-3 + 1e-15);
    }

    #[test]
    fn config_validation() {
        let mut c = TttLayerConfig::new(4, 4, 0);
        assert!(c.validate().is_err());
        c.chunk_size = 2;
        c.eta = -1.0;
        assert!(c.validate().is_err());
        c.eta = 0.0;
        c.clip_tau = Some(0.0);
        assert!(c.validate().is_err());
        c.clip_tau = None;
        assert!(c.validate().is_ok());
    }
}
