//! Causality probe and scan throughput benchmark.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::model::{self, ModelConfig, ModelParams};
use crate::numerics::{ConvSpec, SeededRng};
use crate::ttt::{self, BoundaryMask, ScanMode, TttLayerConfig, TttLayerParams};

use super::{ExperimentError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalityReport {
    pub flip_position: usize,
    /// Smallest row whose logits changed, if any.
    pub first_changed: Option<usize>,
    pub passed: bool,
}

/// Replaces token `q` with its successor and compares logits row by row.
pub fn causality_probe(params: &ModelParams, config: &ModelConfig, tokens: &[usize], q: usize, mask: Option<&BoundaryMask>) -> Result<CausalityReport> {
    if q >= tokens.len() {
        return Err(ExperimentError::Config(format!("flip position {q} outside sequence of {}", tokens.len())));
    }
    let before = model::model_forward(tokens, params, config, mask)?;
    let mut flipped = tokens.to_vec();
    flipped[q] = (flipped[q] + 1) % config.vocab_size;
    let after = model::model_forward(&flipped, params, config, mask)?;
    let first_changed = (0..tokens.len()).find(|&r| before.row(r).iter().zip(after.row(r)).any(|(a, b)| a.to_bits() != b.to_bits()));
    Ok(CausalityReport {
        flip_position: q,
        first_changed,
        passed: first_changed.is_none_or(|r| r >= q),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanBenchRow {
    pub mode: String,
    pub workers: usize,
    pub n_chunks: usize,
    pub chunk_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub wall_ms: f64,
    /// Relative to the sequential recurrence on one worker.
    pub speedup: f64,
    pub max_abs_diff: f64,
    pub bitwise: bool,
}

pub const SCAN_BENCH_HEADER: &str = "mode,workers,n_chunks,chunk_size,d_model,d_ff,wall_ms,speedup,max_abs_diff,bitwise";

pub fn scan_bench_csv(rows: &[ScanBenchRow]) -> String {
    let mut s = format!("{SCAN_BENCH_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{:.3},{:.3},{},{}\n",
            r.mode, r.workers, r.n_chunks, r.chunk_size, r.d_model, r.d_ff, r.wall_ms, r.speedup, r.max_abs_diff, r.bitwise
        ));
    }
    s
}

/// Times the sequential recurrence and both scan modes at each worker
/// count (best of `reps`), after checking that the outputs agree.
pub fn scan_bench(config: &TttLayerConfig, n_chunks: usize, workers: &[usize], reps: usize, seed: u64) -> Result<Vec<ScanBenchRow>> {
    if n_chunks == 0 || workers.is_empty() || workers.contains(&0) {
        return Err(ExperimentError::Config("n_chunks and every worker count must be >= 1".into()));
    }
    config.validate()?;
    let n = n_chunks * config.chunk_size;
    let mut rng = SeededRng::derive(seed, 0);
    let mut params = TttLayerParams::init(config, &mut rng, 0.1, 0.1);
    let k = rng.normal_matrix(config.conv_offsets.len(), config.d_model, 0.1);
    params.conv = ConvSpec::new(config.conv_offsets.clone(), k)?;
    let h = rng.normal_matrix(n, config.d_model, 1.0);
    let x0 = rng.normal_matrix(n, config.d_model, 1.0);
    let mask = BoundaryMask::single(n);

    let time = |f: &dyn Fn() -> ttt::Result<crate::numerics::RealMatrix>| -> Result<(f64, crate::numerics::RealMatrix)> {
        let mut best = f64::INFINITY;
        let mut out = None;
        for _ in 0..reps.max(1) {
            let t = Instant::now();
            let o = f()?;
            best = best.min(t.elapsed().as_secs_f64() * 1e3);
            out = Some(o);
        }
        Ok((best, out.expect("at least one rep")))
    };

    let mut rows = Vec::new();
    let mut baseline = None;
    let mut reference = None;
    let mut counts = workers.to_vec();
    if counts[0] != 1 {
        counts.insert(0, 1);
    }
    for (i, &w) in counts.iter().enumerate() {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        let seq = pool.install(|| time(&|| ttt::forward_sequential(&h, &x0, &params, config, &mask).map(|r| r.0)))?;
        let base_ms = *baseline.get_or_insert(seq.0);
        let reference = reference.get_or_insert_with(|| seq.1.clone());
        let report = i > 0 || workers[0] == 1;
        let mut push = |mode: &str, ms: f64, out: &crate::numerics::RealMatrix| {
            if report {
                rows.push(ScanBenchRow {
                    mode: mode.to_string(),
                    workers: w,
                    n_chunks,
                    chunk_size: config.chunk_size,
                    d_model: config.d_model,
                    d_ff: config.d_ff,
                    wall_ms: ms,
                    speedup: base_ms / ms,
                    max_abs_diff: out.max_abs_diff(reference),
                    bitwise: out.bitwise_eq(reference),
                });
            }
        };
        push("sequential", seq.0, &seq.1);
        for mode in [ScanMode::SerialOrder, ScanMode::Tree] {
            let r = pool.install(|| time(&|| ttt::forward_scan(&h, &x0, &params, config, &mask, mode).map(|r| r.0)))?;
            push(mode.name(), r.0, &r.1);
        }
    }
    Ok(rows)
}
