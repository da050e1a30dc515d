use iptt_core::model::{InitConfig, ModelConfig, ModelParams};
use iptt_core::training::{detokenize, tokenize, Checkpoint, Corpus, TrainConfig, Trainer, SEPARATOR};
use iptt_core::{RealMatrix, SeededRng};
use proptest::prelude::*;

proptest! {
    #[test]
    fn tokenizer_roundtrip(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let t = tokenize(&bytes);
        prop_assert!(t.iter().all(|&x| x < SEPARATOR));
        prop_assert_eq!(detokenize(&t).unwrap(), bytes);
    }

    #[test]
    fn checkpoint_bytes_roundtrip(
        header in "[ -~]{0,40}",
        shapes in prop::collection::vec((0usize..5, 0usize..5), 0..5),
        seed in any::<u64>(),
    ) {
        let mut rng = SeededRng::new(seed);
        let tensors: Vec<(String, RealMatrix)> = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| (format!("t{i}.é"), rng.normal_matrix(r, c, 1.0)))
            .collect();
        let ck = Checkpoint { config_json: serde_json::json!({ "note": header }).to_string(), tensors };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.tensors.len(), ck.tensors.len());
    }

    #[test]
    fn corpus_documents_start_with_separator(docs in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..20), 1..6)) {
        let c = Corpus::from_documents(&docs).unwrap();
        prop_assert_eq!(c.num_documents(), docs.len());
        for &s in c.document_starts() {
            prop_assert_eq!(c.tokens()[s], SEPARATOR);
        }
        prop_assert_eq!(c.len(), docs.iter().map(|d| d.len() + 1).sum::<usize>());
    }
}

#[test]
fn init_contract() {
    let mut c = ModelConfig {
        d_model: 32,
        d_ff: 64,
        n_layers: 4,
        n_heads: 4,
        ttt_every: 2,
        ..ModelConfig::default()
    };
    c.sync_dims();
    let p = ModelParams::init(&c, &InitConfig::default(), &mut SeededRng::new(5));
    let mut diag = Vec::new();
    for (i, l) in p.layers.iter().enumerate() {
        assert_eq!(l.target.is_some(), c.is_ttt_layer(i));
        if let Some(t) = &l.target {
            assert!(t.conv.data().iter().all(|&v| v == 0.0));
            for r in 0..32 {
                for col in 0..32 {
                    if r == col {
                        diag.push(t.w_target.get(r, col));
                    } else {
                        assert_eq!(t.w_target.get(r, col), 0.0);
                    }
                }
            }
        }
        // Truncated normal at std 0.02, cut at two standard deviations.
        assert!(l.wq.max_abs() <= 0.04 + 1e-12);
    }
    let mean = diag.iter().sum::<f64>() / diag.len() as f64;
    let std = (diag.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / diag.len() as f64).sqrt();
    assert!(mean.abs() < 0.01 && (std - 0.02).abs() < 0.008, "mean {mean} std {std}");
}

#[test]
fn training_is_a_function_of_config_corpus_and_seed() {
    let corpus = Corpus::from_documents(&["abcabcabcabc", "hello world, hello world", "zzzz yyyy xxxx"]).unwrap();
    let mut c = ModelConfig {
        d_model: 8,
        d_ff: 8,
        n_layers: 1,
        n_heads: 2,
        ttt_every: 1,
        ..ModelConfig::default()
    };
    c.ttt.chunk_size = 4;
    c.sync_dims();
    let train = |seed| TrainConfig {
        total_steps: 6,
        seq_len: 16,
        batch_tokens: 32,
        seed,
        ..TrainConfig::default()
    };
    let run = |seed| {
        let mut t = Trainer::new(c.clone(), train(seed)).unwrap();
        t.run(&corpus, None, |_| {}).unwrap();
        t.to_checkpoint().to_bytes()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

proptest! {
    #[test]
    fn config_json_keeps_every_float_bit(eta in any::<f64>().prop_filter("finite", |v| v.is_finite()), lr in 0.0f64..1.0) {
        let mut m = ModelConfig::default();
        m.ttt.eta = eta;
        let t = TrainConfig { learning_rate: lr, ..TrainConfig::default() };
        let m2: ModelConfig = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        let t2: TrainConfig = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        prop_assert_eq!(m2.ttt.eta.to_bits(), eta.to_bits());
        prop_assert_eq!(t2.learning_rate.to_bits(), lr.to_bits());
    }
}
