//! Acceptance suite. Every test prints one `PASS` or `FAIL` line for its
//! criterion to stderr (bypassing output capture) before asserting.

use std::io::Write;
use std::sync::OnceLock;

use iptt_core::autodiff::GradCheckConfig;
use iptt_core::experiments::induction::{build_induction_instance, logit_delta, theorem_bench, InductionSettings, TargetKind};
use iptt_core::experiments::probes::causality_probe;
use iptt_core::experiments::recall::{train_and_score, PplPoint, RecallProtocol, RecallSpec, TrainedRun};
use iptt_core::model::{self, InitConfig, ModelConfig, ModelParams, TargetVariant};
use iptt_core::numerics::frob_norm;
use iptt_core::training::{metrics_csv, Checkpoint, Corpus, Schedule, TrainConfig, Trainer};
use iptt_core::ttt::{self, BoundaryMask, FastWeightState, ScanMode, TttLayerConfig, TttLayerParams};
use iptt_core::{ConvSpec, RealMatrix, SeededRng};

fn report(criterion: u32, name: &str, passed: bool, detail: &str) {
    let status = if passed { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "{status} criterion {criterion:>2} ({name}): {detail}");
}

fn random_ttt_params(config: &TttLayerConfig, rng: &mut SeededRng) -> TttLayerParams {
    let mut p = TttLayerParams::init(config, rng, 0.2, 0.5);
    let k = rng.normal_matrix(config.conv_offsets.len(), config.d_model, 0.3);
    p.conv = ConvSpec::new(config.conv_offsets.clone(), k).unwrap();
    p
}

/// Model with random conv kernels so every TTT layer writes to its fast weight.
fn active_model(config: &ModelConfig, seed: u64) -> ModelParams {
    let mut rng = SeededRng::new(seed);
    let mut p = ModelParams::init(config, &InitConfig { std: 0.1, target_sigma: 0.5 }, &mut rng);
    for l in &mut p.layers {
        if let Some(t) = &mut l.target {
            t.conv = rng.normal_matrix(t.conv.rows(), t.conv.cols(), 0.5);
        }
    }
    p
}

#[test]
fn criterion_01_baseline_equivalence() {
    let mut config = ModelConfig {
        d_model: 32,
        d_ff: 64,
        n_layers: 2,
        n_heads: 4,
        ttt_every: 1,
        ..ModelConfig::default()
    };
    config.ttt.eta = 1.0;
    config.sync_dims();
    let mut baseline = config.clone();
    baseline.ttt_every = 0;
    let params = ModelParams::init(&config, &InitConfig::default(), &mut SeededRng::new(1));
    let shared: Vec<(String, RealMatrix)> = params
        .named()
        .into_iter()
        .filter(|(n, _)| !n.ends_with(".conv") && !n.ends_with(".w_target"))
        .collect();
    let base_params = ModelParams::from_named(&baseline, &shared).unwrap();

    let mut rng = SeededRng::new(2);
    let mut mismatches = 0;
    for _ in 0..100 {
        let tokens: Vec<usize> = (0..1024).map(|_| rng.below(config.vocab_size)).collect();
        let a = model::model_forward(&tokens, &params, &config, None).unwrap();
        let b = model::model_forward(&tokens, &base_params, &baseline, None).unwrap();
        if !a.bitwise_eq(&b) {
            mismatches += 1;
        }
    }
    let passed = mismatches == 0;
    report(1, "baseline equivalence", passed, &format!("{mismatches}/100 sequences of 1024 differ"));
    assert!(passed);
}

#[test]
fn criterion_02_scan_equivalence() {
    let mut config = TttLayerConfig::new(32, 32, 64);
    config.eta = 0.1;
    let mut rng = SeededRng::new(3);
    let params = random_ttt_params(&config, &mut rng);
    let n = 64 * 64;
    let h = rng.normal_matrix(n, 32, 1.0);
    let x0 = rng.normal_matrix(n, 32, 1.0);
    let mut lengths = Vec::new();
    let mut left = n;
    while left > 0 {
        let l = (100 + rng.below(600)).min(left);
        lengths.push(l);
        left -= l;
    }
    let mut serial_ok = true;
    let mut tree_diff = 0.0f64;
    for mask in [BoundaryMask::single(n), BoundaryMask::from_lengths(&lengths)] {
        let (seq, seq_state) = ttt::forward_sequential(&h, &x0, &params, &config, &mask).unwrap();
        let (serial, serial_state) = ttt::forward_scan(&h, &x0, &params, &config, &mask, ScanMode::SerialOrder).unwrap();
        let (tree, _) = ttt::forward_scan(&h, &x0, &params, &config, &mask, ScanMode::Tree).unwrap();
        serial_ok &= serial.bitwise_eq(&seq) && serial_state.delta.bitwise_eq(&seq_state.delta);
        tree_diff = tree_diff.max(tree.max_abs_diff(&seq));
    }
    let passed = serial_ok && tree_diff <= 1e-10;
    report(
        2,
        "scan equivalence",
        passed,
        &format!("serial-order bitwise {serial_ok}, tree max abs diff {tree_diff:.3e} (64 chunks x 64, {} documents)", lengths.len()),
    );
    assert!(passed);
}

#[test]
fn criterion_03_streaming_equivalence() {
    let mut config = TttLayerConfig::new(16, 32, 64);
    config.eta = 0.1;
    let mut rng = SeededRng::new(4);
    let params = random_ttt_params(&config, &mut rng);
    let n = 4096;
    let h = rng.normal_matrix(n, 16, 1.0);
    let x0 = rng.normal_matrix(n, 16, 1.0);
    // 1000 is not a multiple of the chunk size, so the reset drops a partial chunk.
    let mask = BoundaryMask::from_lengths(&[1000, n - 1000]);
    let (batch, _) = ttt::forward_sequential(&h, &x0, &params, &config, &mask).unwrap();

    let ids = mask.doc_ids().to_vec();
    let mut state = FastWeightState::new(16, 32);
    let mut differing = 0;
    for t in 0..n {
        let new_doc = t == 0 || ids[t] != ids[t - 1];
        let o = ttt::stream_step(h.row(t), x0.row(t), &mut state, &params, &config, new_doc).unwrap();
        if o.iter().zip(batch.row(t)).any(|(a, b)| a.to_bits() != b.to_bits()) {
            differing += 1;
        }
    }
    let passed = differing == 0;
    report(3, "streaming equivalence", passed, &format!("{differing}/{n} positions differ, reset at 1000"));
    assert!(passed);
}

#[test]
fn criterion_04_causality() {
    let n = 512;
    let mut failures = Vec::new();
    let mut checked = 0;
    for window in [None, Some(64)] {
        for chunk in [32, 128] {
            let mut config = ModelConfig {
                d_model: 16,
                d_ff: 32,
                n_layers: 2,
                n_heads: 2,
                ttt_every: 1,
                window,
                ..ModelConfig::default()
            };
            config.ttt.chunk_size = chunk;
            config.ttt.eta = 0.5;
            config.sync_dims();
            let params = active_model(&config, 5);
            let mut rng = SeededRng::new(6);
            let tokens: Vec<usize> = (0..n).map(|_| rng.below(config.vocab_size)).collect();
            for q in [0, 1, chunk - 1, chunk, chunk + 1, n - 1] {
                let r = causality_probe(&params, &config, &tokens, q, None).unwrap();
                checked += 1;
                if !r.passed {
                    failures.push((window, chunk, q, r.first_changed));
                }
            }
            // A flip in the second document leaves the first untouched.
            let mask = BoundaryMask::from_lengths(&[200, n - 200]);
            let r = causality_probe(&params, &config, &tokens, 300, Some(&mask)).unwrap();
            checked += 1;
            if r.first_changed.is_some_and(|p| p < 300) {
                failures.push((window, chunk, 300, r.first_changed));
            }
        }
    }
    let passed = failures.is_empty();
    report(4, "causality", passed, &format!("{checked} probes, failures {failures:?}"));
    assert!(passed);
}

#[test]
fn criterion_05_theorem_exact_regime() {
    let settings = InductionSettings {
        vocab: 16,
        d_model: 16,
        d_ff: 32,
        eta: 0.1,
        c_align: 2.0,
        isolate: true,
        ..InductionSettings::default()
    };
    let inst = build_induction_instance(&mut SeededRng::new(7), &settings).unwrap();
    let lm = logit_delta(&inst, TargetKind::LmAligned);
    let rec = logit_delta(&inst, TargetKind::Reconstruction);
    let lm_err = (lm[inst.v_star] - 0.2).abs();
    let others = (0..settings.vocab).filter(|&w| w != inst.v_star).map(|w| lm[w].abs()).fold(0.0, f64::max);
    let rec_v = rec[inst.v_star].abs();
    let passed = inst.epsilon == 0.0 && lm_err <= 1e-12 && others <= 1e-12 && rec_v <= 1e-12;
    report(
        5,
        "theorem exact regime",
        passed,
        &format!("lm dl[v*] = {:.15}, max other {others:.1e}, reconstruction |dl[v*]| {rec_v:.1e}", lm[inst.v_star]),
    );
    assert!(passed);
}

#[test]
fn criterion_06_theorem_statistical_regime() {
    let settings = InductionSettings::default();
    assert_eq!((settings.d_model, settings.vocab), (64, 256));
    let r = theorem_bench(&settings, 10_000, 8).unwrap();
    let passed = r.pass && r.epsilon <= 0.05;
    report(
        6,
        "theorem statistical regime",
        passed,
        &format!(
            "eps {:.4}, lm mean {:.5} (bound {:.5}, se {:.1e}), max other {:.5} (bound {:.5}), rec mean {:.2e} (se {:.1e})",
            r.epsilon, r.lm_mean, r.bound_correct, r.lm_se, r.max_other_mean, r.bound_other, r.rec_mean, r.rec_se
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_07_gradient_integrity() {
    let mut config = ModelConfig {
        vocab_size: 11,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        ttt_every: 1,
        ..ModelConfig::default()
    };
    config.ttt.chunk_size = 4;
    config.ttt.eta = 1.0;
    config.sync_dims();
    let mut rng = SeededRng::new(11);
    let mut params = ModelParams::init(&config, &InitConfig { std: 0.5, target_sigma: 1.0 }, &mut rng);
    for l in &mut params.layers {
        if let Some(t) = &mut l.target {
            t.conv = rng.normal_matrix(t.conv.rows(), t.conv.cols(), 1.0);
            t.w_target = rng.normal_matrix(16, 16, 0.5);
        }
    }
    // 8 tokens with chunk size 4: two chunks per TTT layer.
    let tokens: Vec<usize> = (0..8).map(|_| rng.below(11)).collect();
    let report_ = model::model_grad_check(&params, &config, &tokens, None, &GradCheckConfig::default()).unwrap();
    let names = report_.params.len();
    let has_target = report_.params.iter().any(|p| p.name.ends_with(".conv")) && report_.params.iter().any(|p| p.name.ends_with(".w_target"));
    let worst = report_.worst().map(|w| w.name.clone()).unwrap_or_default();
    let passed = report_.passed && has_target;
    report(
        7,
        "gradient integrity",
        passed,
        &format!("{names} tensors, max relative error {:.3e} at {worst}, h = 1e-5", report_.max_rel_error),
    );
    assert!(passed);
}

#[test]
fn criterion_08_clipping_contract() {
    let mut rng = SeededRng::new(9);
    let mut violations = 0;
    let mut max_dir_err = 0.0f64;
    let mut max_eq_err = 0.0f64;
    for tau in [1e-5, 1.0, 10.0] {
        for i in 0..1000 {
            let (r, c) = (1 + rng.below(12), 1 + rng.below(12));
            let scale = 10f64.powf(-7.0 + 9.0 * (i as f64 / 999.0));
            let delta = rng.normal_matrix(r, c, scale);
            let norm = frob_norm(&delta);
            let out = ttt::clip_delta(delta.clone(), tau);
            let out_norm = frob_norm(&out);
            if out_norm > tau {
                violations += 1;
            }
            if norm <= tau {
                if !out.bitwise_eq(&delta) {
                    violations += 1;
                }
            } else {
                max_eq_err = max_eq_err.max((out_norm - tau).abs() / tau);
                let k = out_norm / norm;
                let dir = out.data().iter().zip(delta.data()).map(|(o, d)| (o - k * d).abs()).fold(0.0, f64::max) / out.max_abs();
                max_dir_err = max_dir_err.max(dir);
            }
        }
    }
    let passed = violations == 0 && max_dir_err <= 1e-12 && max_eq_err <= 1e-12;
    report(
        8,
        "clipping contract",
        passed,
        &format!("3000 deltas, {violations} violations, direction error {max_dir_err:.1e}, norm - tau {max_eq_err:.1e}"),
    );
    assert!(passed);
}

/// The recall experiment shared by criteria 9 and 10.
struct RecallRuns {
    protocol: RecallProtocol,
    full: TrainedRun,
    full_curve: Vec<PplPoint>,
    baseline_curve: Vec<PplPoint>,
    reconstruction: TrainedRun,
    no_conv: TrainedRun,
}

fn recall_setup() -> (RecallProtocol, ModelConfig, TrainConfig) {
    let protocol = RecallProtocol {
        spec: RecallSpec {
            pairs: 12,
            gap_min: 264,
            gap_max: 320,
            lead_max: 32,
            filler_noise: 0.1,
        },
        train_docs: 4000,
        eval_clip_tau: Some(0.03),
        ..RecallProtocol::default()
    };
    let mut config = ModelConfig {
        d_model: 64,
        d_ff: 256,
        n_layers: 2,
        n_heads: 4,
        ttt_every: 2,
        window: Some(256),
        tie_embeddings: true,
        ..ModelConfig::default()
    };
    config.ttt.chunk_size = 64;
    config.ttt.eta = 100.0;
    config.sync_dims();
    let train = TrainConfig {
        learning_rate: 3e-3,
        total_steps: 1500,
        seq_len: 384,
        batch_tokens: 384,
        seed: 7,
        schedule: Schedule::Cosine,
        init: InitConfig { std: 0.02, target_sigma: 1.0 },
        ..TrainConfig::default()
    };
    (protocol, config, train)
}

fn recall_runs() -> &'static RecallRuns {
    static RUNS: OnceLock<RecallRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let (protocol, config, train) = recall_setup();
        let corpus = protocol.train_corpus().unwrap();
        let run = |label: &str, c: ModelConfig| train_and_score(label, c, &train, &protocol, &corpus).unwrap();
        let full = run("full", config.clone());
        let full_curve = protocol.ppl_curve(&full.params, &full.config).unwrap();
        let baseline = run("baseline", ModelConfig { ttt_every: 0, ..config.clone() });
        let baseline_curve = protocol.ppl_curve(&baseline.params, &baseline.config).unwrap();
        let reconstruction = run("reconstruction", ModelConfig { target: TargetVariant::Reconstruction, ..config.clone() });
        let no_conv = run("no-conv", ModelConfig { target: TargetVariant::NoConv, ..config });
        RecallRuns {
            protocol,
            full,
            full_curve,
            baseline_curve,
            reconstruction,
            no_conv,
        }
    })
}

fn curve_text(curve: &[PplPoint]) -> String {
    curve.iter().map(|p| format!("L{} {:.3}", p.prefix_len, p.ppl)).collect::<Vec<_>>().join(", ")
}

#[test]
fn criterion_09_sliding_window_trend() {
    let runs = recall_runs();
    let at = |c: &[PplPoint], l: usize| c.iter().find(|p| p.prefix_len == l).map(|p| p.ppl).unwrap();
    let (t256, t2048, b2048) = (at(&runs.full_curve, 256), at(&runs.full_curve, 2048), at(&runs.baseline_curve, 2048));
    let passed = t2048 < t256 && t2048 < b2048;
    report(
        9,
        "sliding-window trend",
        passed,
        &format!(
            "ttt [{}] vs baseline [{}] (eval clip {:?})",
            curve_text(&runs.full_curve),
            curve_text(&runs.baseline_curve),
            runs.protocol.eval_clip_tau
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_10_ablation_direction() {
    let runs = recall_runs();
    let (f, r, n) = (&runs.full.row, &runs.reconstruction.row, &runs.no_conv.row);
    let loss_ok = f.final_train_loss < r.final_train_loss;
    let recall_ok = n.recall_accuracy < f.recall_accuracy;
    let passed = loss_ok && recall_ok;
    report(
        10,
        "ablation direction",
        passed,
        &format!(
            "final loss full {:.4} vs reconstruction {:.4}; recall accuracy full {:.3} vs no-conv {:.3}",
            f.final_train_loss, r.final_train_loss, f.recall_accuracy, n.recall_accuracy
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_11_determinism_and_persistence() {
    let docs: Vec<String> = (0..40)
        .map(|i| format!("document {i}: the quick brown fox jumps over the lazy dog {} times.", i * 7))
        .collect();
    let corpus = Corpus::from_documents(&docs).unwrap();
    let mut config = ModelConfig {
        d_model: 16,
        d_ff: 32,
        n_layers: 2,
        n_heads: 2,
        ttt_every: 2,
        ..ModelConfig::default()
    };
    config.ttt.chunk_size = 8;
    config.ttt.eta = 0.5;
    config.sync_dims();
    let train = TrainConfig {
        total_steps: 30,
        seq_len: 64,
        batch_tokens: 128,
        seed: 3,
        ..TrainConfig::default()
    };

    let run = || {
        let mut t = Trainer::new(config.clone(), train.clone()).unwrap();
        let m = t.run(&corpus, None, |_| {}).unwrap();
        (metrics_csv(&m), t.to_checkpoint().to_bytes())
    };
    let (csv_a, ck_a) = run();
    let (csv_b, ck_b) = run();
    let metrics_same = csv_a == csv_b;

    let mut first = Trainer::new(config.clone(), train.clone()).unwrap();
    let mut m = first.run(&corpus, Some(13), |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.iptt");
    first.to_checkpoint().save(&path).unwrap();
    let mut resumed = Trainer::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    m.extend(resumed.run(&corpus, None, |_| {}).unwrap());
    let resume_same = metrics_csv(&m) == csv_a && resumed.to_checkpoint().to_bytes() == ck_a;

    let final_path = dir.path().join("final.iptt");
    std::fs::write(&final_path, &ck_a).unwrap();
    let reloaded = Checkpoint::load(&final_path).unwrap();
    let again = dir.path().join("again.iptt");
    reloaded.save(&again).unwrap();
    let roundtrip_same = std::fs::read(&again).unwrap() == ck_a && ck_a == ck_b;

    let passed = metrics_same && resume_same && roundtrip_same;
    report(
        11,
        "determinism and persistence",
        passed,
        &format!("metrics identical {metrics_same}, resume identical {resume_same}, save/load byte-identical {roundtrip_same}"),
    );
    assert!(passed);
}
