//! Induction-head bench for the logit change caused by one fast-weight update.
//!
//! For prior positions `t` with activations `z_t` and targets `V_t`, the update
//! `ΔW = η Σ_t V_t z_tᵀ` moves the logit of token `w` at the query position by
//! `Δℓ_n[w] = E_wᵀ ΔW z_n`. With the next-token target `V_t = E_{x_{t+1}}` the
//! value that followed the key gains about `η ‖E_v‖² c_align`; with the
//! reconstruction target `V_t = E_{x_t}` it gains at most `η ε c_align`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::numerics::{matmul, matmul_at, RealMatrix, SeededRng};

use super::{ExperimentError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    LmAligned,
    Reconstruction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InductionSettings {
    pub vocab: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub epsilon_cap: f64,
    pub c_align: f64,
    /// Number of positions before the query.
    pub prior_len: usize,
    pub eta: f64,
    /// Zero every activation except `z_{t*}`.
    pub isolate: bool,
    /// When random unit embeddings cannot meet `epsilon_cap`, shrink them
    /// uniformly until they do instead of failing.
    pub allow_rescale: bool,
    /// Resampling attempts for unit embeddings.
    pub max_attempts: usize,
}

impl Default for InductionSettings {
    fn default() -> Self {
        Self {
            vocab: 256,
            d_model: 64,
            d_ff: 128,
            epsilon_cap: 0.05,
            c_align: 1.0,
            prior_len: 64,
            eta: 0.1,
            isolate: false,
            allow_rescale: true,
            max_attempts: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InductionInstance {
    /// vocab × d_model
    pub embeddings: RealMatrix,
    /// `x_0 .. x_{n-1}`; the query token `x_n` is `k_star`.
    pub tokens: Vec<usize>,
    pub t_star: usize,
    pub n: usize,
    pub k_star: usize,
    pub v_star: usize,
    /// n × d_ff, row `t` is `z_t`.
    pub z: RealMatrix,
    /// 1 × d_ff
    pub z_n: RealMatrix,
    pub epsilon: f64,
    pub c_norm: f64,
    pub c_align: f64,
    pub eta: f64,
}

/// Largest off-diagonal `|E_iᵀE_j|` and smallest norm of an embedding table.
pub fn embedding_constants(e: &RealMatrix) -> (f64, f64) {
    let gram = crate::numerics::matmul_bt(e, e).expect("square gram");
    let mut eps = 0.0f64;
    let mut min_sq = f64::INFINITY;
    for i in 0..e.rows() {
        min_sq = min_sq.min(gram.get(i, i));
        for j in 0..e.rows() {
            if i != j {
                eps = eps.max(gram.get(i, j).abs());
            }
        }
    }
    (eps, min_sq.sqrt())
}

fn unit_rows(mut e: RealMatrix) -> RealMatrix {
    for r in 0..e.rows() {
        let row = e.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    e
}

fn sample_embeddings(rng: &mut SeededRng, s: &InductionSettings) -> Result<RealMatrix> {
    if s.vocab <= s.d_model {
        return Ok(RealMatrix::from_fn(s.vocab, s.d_model, |i, j| if i == j { 1.0 } else { 0.0 }));
    }
    let mut best: Option<(f64, RealMatrix)> = None;
    for _ in 0..s.max_attempts.max(1) {
        let e = unit_rows(rng.normal_matrix(s.vocab, s.d_model, 1.0));
        let (eps, _) = embedding_constants(&e);
        if eps <= s.epsilon_cap {
            return Ok(e);
        }
        if best.as_ref().is_none_or(|(b, _)| eps < *b) {
            best = Some((eps, e));
        }
    }
    let (eps, e) = best.expect("at least one attempt");
    if !s.allow_rescale {
        return Err(ExperimentError::Unattainable(format!(
            "best of {} unit embedding tables has coherence {eps:.4} > epsilon_cap {}",
            s.max_attempts, s.epsilon_cap
        )));
    }
    // uniform shrink keeps the geometry and scales every inner product
    let scale = (s.epsilon_cap / eps).sqrt() * (1.0 - 1e-9);
    Ok(e.scale(scale))
}

fn check_settings(s: &InductionSettings) -> Result<()> {
    if s.vocab < 2 || s.d_model == 0 || s.d_ff == 0 {
        return Err(ExperimentError::Config("vocab >= 2, d_model >= 1 and d_ff >= 1 required".into()));
    }
    if s.prior_len < 2 {
        return Err(ExperimentError::Config("prior_len must be >= 2".into()));
    }
    if !(s.epsilon_cap >= 0.0) || !s.c_align.is_finite() || !s.eta.is_finite() {
        return Err(ExperimentError::Config("epsilon_cap, c_align and eta must be finite".into()));
    }
    Ok(())
}

/// The fixed part of an instance: embeddings, the key/value pair, `z_n`
/// and `z_{t*}`.
pub fn build_induction_instance(rng: &mut SeededRng, s: &InductionSettings) -> Result<InductionInstance> {
    check_settings(s)?;
    let embeddings = sample_embeddings(rng, s)?;
    let (epsilon, c_norm) = embedding_constants(&embeddings);
    let k_star = rng.below(s.vocab);
    let v_star = (k_star + 1 + rng.below(s.vocab - 1)) % s.vocab;
    let n = s.prior_len;
    let t_star = rng.below(n - 1);

    let z_n = rng.normal_matrix(1, s.d_ff, 1.0 / (s.d_ff as f64).sqrt());
    let zz: f64 = z_n.data().iter().map(|v| v * v).sum();
    let mut noise = rng.normal_matrix(1, s.d_ff, 1.0 / (s.d_ff as f64).sqrt());
    let proj: f64 = noise.data().iter().zip(z_n.data()).map(|(a, b)| a * b).sum::<f64>() / zz;
    noise.axpy(-proj, &z_n).expect("same shape");
    let mut z_star = z_n.scale(s.c_align / zz);
    z_star.add_assign(&noise).expect("same shape");

    let mut inst = InductionInstance {
        embeddings,
        tokens: vec![0; n],
        t_star,
        n,
        k_star,
        v_star,
        z: RealMatrix::zeros(n, s.d_ff),
        z_n,
        epsilon,
        c_norm,
        c_align: 0.0,
        eta: s.eta,
    };
    inst.z.row_mut(t_star).copy_from_slice(z_star.data());
    inst.tokens[t_star] = k_star;
    inst.tokens[t_star + 1] = v_star;
    inst.c_align = dot(inst.z.row(t_star), inst.z_n.data());
    Ok(inst)
}

/// Draws the unrelated positions of one trial: random tokens and
/// activations, each activation under an independent random sign.
pub fn resample_context(base: &InductionInstance, rng: &mut SeededRng, isolate: bool) -> InductionInstance {
    let mut inst = base.clone();
    let vocab = base.embeddings.rows();
    let f = base.z.cols();
    let std = 1.0 / (f as f64).sqrt();
    for t in 0..base.n {
        if t == base.t_star {
            continue;
        }
        if t != base.t_star + 1 {
            inst.tokens[t] = rng.below(vocab);
        }
        let row = inst.z.row_mut(t);
        if isolate {
            row.iter_mut().for_each(|v| *v = 0.0);
        } else {
            let sign = rng.sign();
            row.iter_mut().for_each(|v| *v = sign * rng.normal() * std);
        }
    }
    inst
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl InductionInstance {
    /// `x_{t}` for `t <= n`.
    fn token_at(&self, t: usize) -> usize {
        if t == self.n {
            self.k_star
        } else {
            self.tokens[t]
        }
    }

    /// n × d_model matrix of targets `V_t`.
    pub fn targets(&self, kind: TargetKind) -> RealMatrix {
        let d = self.embeddings.cols();
        let mut v = RealMatrix::zeros(self.n, d);
        for t in 0..self.n {
            let tok = match kind {
                TargetKind::LmAligned => self.token_at(t + 1),
                TargetKind::Reconstruction => self.token_at(t),
            };
            v.row_mut(t).copy_from_slice(self.embeddings.row(tok));
        }
        v
    }

    /// `ΔW_down = η Σ_t V_t z_tᵀ` (d_model × d_ff).
    pub fn delta_w(&self, kind: TargetKind) -> RealMatrix {
        matmul_at(&self.targets(kind), &self.z).expect("shapes").scale(self.eta)
    }
}

/// `Δℓ_n[w] = E_wᵀ ΔW_down z_n` for every token `w`.
pub fn logit_delta(inst: &InductionInstance, kind: TargetKind) -> Vec<f64> {
    let dw = inst.delta_w(kind);
    let h = matmul(&dw, &inst.z_n.transpose()).expect("shapes");
    matmul(&inst.embeddings, &h).expect("shapes").into_data()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub name: String,
    pub statistic: f64,
    pub standard_error: f64,
    pub bound: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub trials: usize,
    pub seed: u64,
    pub settings: InductionSettings,
    pub epsilon: f64,
    pub c_norm: f64,
    pub c_align: f64,
    pub eta: f64,
    pub lm_mean: f64,
    pub lm_se: f64,
    pub rec_mean: f64,
    pub rec_se: f64,
    /// max over `w ≠ v*` of `|mean Δℓ[w]|`, LM-aligned target
    pub max_other_mean: f64,
    pub max_other_se: f64,
    /// `η c_norm² c_align`
    pub bound_correct: f64,
    /// `η ε c_align`
    pub bound_other: f64,
    pub confidence_sigmas: f64,
    pub checks: Vec<BoundCheck>,
    pub pass: bool,
}

/// Mean and standard error of `values`, two-pass and shifted by the first
/// sample so identical samples give an exact mean and zero error.
fn mean_se(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let first = values.clone().next().unwrap_or(0.0);
    let mean = first + values.clone().map(|v| v - first).sum::<f64>() / n;
    if n < 2.0 {
        return (mean, 0.0);
    }
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0) / n).sqrt())
}

pub const CONFIDENCE_SIGMAS: f64 = 3.0;

/// Monte Carlo estimate of the three bounds. Trial `i` draws from stream
/// `i + 1` of `seed`, so results do not depend on the worker count.
pub fn theorem_bench(settings: &InductionSettings, trials: usize, seed: u64) -> Result<TheoremReport> {
    if trials == 0 {
        return Err(ExperimentError::Config("trials must be >= 1".into()));
    }
    let base = build_induction_instance(&mut SeededRng::derive(seed, 0), settings)?;
    let vocab = settings.vocab;
    let deltas: Vec<(Vec<f64>, f64)> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = SeededRng::derive(seed, i as u64 + 1);
            let inst = resample_context(&base, &mut rng, settings.isolate);
            let lm = logit_delta(&inst, TargetKind::LmAligned);
            let rec = logit_delta(&inst, TargetKind::Reconstruction)[inst.v_star];
            (lm, rec)
        })
        .collect();
    let column = |w: usize| mean_se(deltas.iter().map(move |(l, _)| l[w]));
    let (lm_mean, lm_se) = column(base.v_star);
    let (rec_mean, rec_se) = mean_se(deltas.iter().map(|(_, r)| *r));
    let bound_correct = base.eta * base.c_norm * base.c_norm * base.c_align;
    let bound_other = base.eta * base.epsilon * base.c_align.abs();
    let k = CONFIDENCE_SIGMAS;

    let mut max_other = (0.0f64, 0.0f64);
    let mut other_ok = true;
    for w in (0..vocab).filter(|&w| w != base.v_star) {
        let (m, se) = column(w);
        other_ok &= m.abs() <= bound_other + k * se;
        if m.abs() >= max_other.0 {
            max_other = (m.abs(), se);
        }
    }
    let checks = vec![
        BoundCheck {
            name: "correct-logit-increase".into(),
            statistic: lm_mean,
            standard_error: lm_se,
            bound: bound_correct,
            passed: lm_mean >= bound_correct - k * lm_se,
        },
        BoundCheck {
            name: "other-logits-unchanged".into(),
            statistic: max_other.0,
            standard_error: max_other.1,
            bound: bound_other,
            passed: other_ok,
        },
        BoundCheck {
            name: "reconstruction-negligible".into(),
            statistic: rec_mean.abs(),
            standard_error: rec_se,
            bound: bound_other,
            passed: rec_mean.abs() <= bound_other + k * rec_se,
        },
    ];
    let pass = checks.iter().all(|c| c.passed);
    Ok(TheoremReport {
        trials,
        seed,
        settings: settings.clone(),
        epsilon: base.epsilon,
        c_norm: base.c_norm,
        c_align: base.c_align,
        eta: base.eta,
        lm_mean,
        lm_se,
        rec_mean,
        rec_se,
        max_other_mean: max_other.0,
        max_other_se: max_other.1,
        bound_correct,
        bound_other,
        confidence_sigmas: k,
        checks,
        pass,
    })
}
