use std::fs;
use std::path::Path;
use std::process::Command;

use iptt_cli::{command, parse_config, ConfigError, RunConfig};
use proptest::prelude::*;

fn iptt(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_iptt")).args(args).output().expect("binary runs")
}

const SMALL: &str = r#"{
  "model": {"d_model": 8, "d_ff": 16, "n_layers": 2, "n_heads": 2, "ttt_every": 2, "window": 16},
  "ttt": {"chunk_size": 8},
  "train": {"total_steps": 4, "seq_len": 32, "batch_tokens": 64, "seed": 3}
}"#;

#[test]
fn empty_object_is_all_defaults() {
    assert_eq!(parse_config(Some("{}"), &[]).unwrap(), RunConfig::default());
    assert_eq!(parse_config(None, &[]).unwrap(), RunConfig::default());
}

#[test]
fn single_key_files() {
    let c = parse_config(Some(r#"{"ttt": {"chunk_size": 512}}"#), &[]).unwrap();
    assert_eq!(c.model.ttt.chunk_size, 512);
    let c = parse_config(Some(r#"{"ttt.eta": 0}"#), &[]).unwrap();
    assert_eq!(c.model.ttt.eta, 0.0);
}

#[test]
fn unknown_key_is_named() {
    let err = parse_config(Some(r#"{"ttt": {"chunk_sise": 8}}"#), &[]).unwrap_err();
    assert!(matches!(&err, ConfigError::UnknownKey(k) if k == "ttt.chunk_sise"), "{err}");
    let err = parse_config(None, &[("model.nope".into(), "1".into())]).unwrap_err();
    assert!(err.to_string().contains("model.nope"));
}

#[test]
fn invalid_combination_names_both_fields() {
    let err = parse_config(Some(r#"{"model": {"d_model": 30, "n_heads": 4}}"#), &[]).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("d_model") && msg.contains("n_heads"), "{msg}");
}

#[test]
fn flags_win_over_file() {
    let c = parse_config(Some(r#"{"ttt": {"eta": 0.5}}"#), &[("ttt.eta".into(), "0.25".into())]).unwrap();
    assert_eq!(c.model.ttt.eta, 0.25);
}

#[test]
fn every_key_has_a_flag_and_accepts_its_default() {
    let keys = RunConfig::default().keys();
    let cmd = command();
    let train = cmd.find_subcommand("train").unwrap();
    for (key, default) in &keys {
        assert!(train.get_arguments().any(|a| a.get_long() == Some(key.as_str())), "no flag for {key}");
        let raw = default.trim_matches('"').to_string();
        let c = parse_config(None, &[(key.clone(), raw)]).unwrap_or_else(|e| panic!("{key}: {e}"));
        assert_eq!(c, RunConfig::default(), "{key}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn numeric_flags_round_trip(eta in 0.0f64..10.0, chunk in 1usize..4096, lr in 1e-6f64..1.0) {
        let c = parse_config(None, &[
            ("ttt.eta".into(), eta.to_string()),
            ("ttt.chunk_size".into(), chunk.to_string()),
            ("train.learning_rate".into(), lr.to_string()),
        ]).unwrap();
        prop_assert_eq!(c.model.ttt.eta, eta);
        prop_assert_eq!(c.model.ttt.chunk_size, chunk);
        prop_assert_eq!(c.train.learning_rate, lr);
    }
}

#[test]
fn help_lists_config_keys_with_defaults() {
    let out = iptt(&["induction", "--help"]);
    assert!(out.status.success());
    let help = String::from_utf8(out.stdout).unwrap();
    for key in RunConfig::default().keys().keys() {
        assert!(help.contains(&format!("--{key}")), "{key} missing from help");
    }
    assert!(help.contains("[default:"));
}

#[test]
fn unknown_subcommand_fails() {
    let out = iptt(&["frobnicate"]);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
}

#[test]
fn bad_config_is_a_json_error() {
    let out = iptt(&["induction", "--trials", "10", "--model.d_model", "30", "--model.n_heads", "4"]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    let msg = err["error"].as_str().unwrap();
    assert!(msg.contains("d_model") && msg.contains("n_heads"), "{msg}");
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn training_artifacts_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("docs");
    fs::create_dir(&corpus).unwrap();
    fs::write(corpus.join("a.txt"), "the quick brown fox jumps over the lazy dog. ".repeat(8)).unwrap();
    fs::write(corpus.join("b.txt"), "pack my box with five dozen liquor jugs! ".repeat(8)).unwrap();
    let cfg = tmp.path().join("small.json");
    fs::write(&cfg, SMALL).unwrap();
    let mut outputs = Vec::new();
    for run in ["one", "two"] {
        let out = tmp.path().join(run);
        let o = iptt(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--corpus",
            corpus.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push((read(&out, "checkpoint.iptt"), read(&out, "metrics.csv")));
    }
    assert_eq!(outputs[0], outputs[1]);
    let metrics = String::from_utf8(outputs[0].1.clone()).unwrap();
    assert_eq!(metrics.lines().count(), 5);
}

#[test]
fn induction_report_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = iptt(&["induction", "--trials", "1000", "--out", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&read(tmp.path(), "theorem_report.json")).unwrap();
    assert_eq!(report["pass"], serde_json::Value::Bool(true));
}

#[test]
fn bench_scan_writes_one_row_per_mode_and_worker_count() {
    let tmp = tempfile::tempdir().unwrap();
    let o = iptt(&[
        "bench-scan",
        "--chunks",
        "8",
        "--workers",
        "1,2",
        "--reps",
        "1",
        "--ttt.chunk_size",
        "16",
        "--model.d_model",
        "8",
        "--model.d_ff",
        "16",
        "--model.n_heads",
        "2",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = String::from_utf8(read(tmp.path(), "scan_bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2, "{csv}");
}

#[test]
fn causality_and_grad_check_pass_on_small_models() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    let small = ["--model.d_model", "8", "--model.d_ff", "16", "--model.n_heads", "2", "--model.n_layers", "2", "--model.ttt_every", "1", "--ttt.chunk_size", "4"];
    let mut args = vec!["causality", "--n", "24", "--documents", "2", "--out", dir];
    args.extend(small);
    let o = iptt(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&read(tmp.path(), "causality.json")).unwrap();
    assert!(report.is_object());

    let mut args = vec!["grad-check", "--tokens", "6", "--out", dir];
    args.extend(small);
    let o = iptt(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&read(tmp.path(), "grad_check.json")).unwrap();
    assert_eq!(report["passed"], serde_json::Value::Bool(true));
}
