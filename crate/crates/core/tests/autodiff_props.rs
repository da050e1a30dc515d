use iptt_core::autodiff::{grad_check, AutodiffError, GradCheckConfig, Tape, Var};
use iptt_core::model::{self, cross_entropy};
use iptt_core::numerics::{Activation, RealMatrix, SeededRng};
use iptt_core::ttt::{self, plan_chunks, BoundaryMask, ScanMode, TttError};
use proptest::prelude::*;

#[derive(Debug, thiserror::Error)]
enum E {
    #[error(transparent)]
    Ad(#[from] AutodiffError),
    #[error(transparent)]
    Ttt(#[from] TttError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn primitive_ops_pass_grad_check(seed in any::<u64>(), m in 1usize..8, k in 1usize..8, n in 1usize..8) {
        let mut rng = SeededRng::new(seed);
        let a = rng.normal_matrix(m, k, 1.0);
        let b = rng.normal_matrix(k, n, 1.0);
        let c = rng.normal_matrix(m, n, 1.0);
        let report = grad_check(
            |t: &mut Tape, v: &[Var]| -> Result<Var, AutodiffError> {
                let ab = t.matmul(v[0], v[1])?;
                let g = t.activate(ab, Activation::Gelu);
                let s = t.silu(ab);
                let p = t.mul(g, s)?;
                let q = t.sub(p, v[2])?;
                let r = t.matmul_at(v[0], q)?;
                let w = t.matmul_bt(r, v[1])?;
                Ok(t.sum_all(w))
            },
            &[("a".into(), a), ("b".into(), b), ("c".into(), c)],
            &GradCheckConfig::default(),
        )
        .unwrap();
        prop_assert!(report.passed, "{}", report.max_rel_error);
    }

    #[test]
    fn ttt_ops_pass_grad_check(seed in any::<u64>(), n in 2usize..14, chunk in 1usize..6, d in 1usize..5, f in 1usize..5) {
        let mut rng = SeededRng::new(seed);
        let mask = BoundaryMask::from_lengths(&[n / 2, n - n / 2]);
        let chunks = plan_chunks(&mask, chunk);
        let offsets = vec![0isize, 1, 2];
        let mode = if seed % 2 == 0 { ScanMode::SerialOrder } else { ScanMode::Tree };
        let params = vec![
            ("x0".to_string(), rng.normal_matrix(n, d, 1.0)),
            ("kernel".to_string(), rng.normal_matrix(3, d, 1.0)),
            ("w_target".to_string(), rng.normal_matrix(d, d, 1.0)),
            ("z".to_string(), rng.normal_matrix(n, f, 1.0)),
            ("w_down0".to_string(), rng.normal_matrix(d, f, 1.0)),
        ];
        let report = grad_check(
            |t: &mut Tape, v: &[Var]| -> Result<Var, E> {
                let c = ttt::conv_tape(t, v[0], v[1], &offsets, &chunks)?;
                let vhat = t.matmul(c, v[2])?;
                let o = ttt::fast_weight_tape(t, v[3], vhat, v[4], &chunks, 0.3, None, mode)?;
                let sq = t.mul(o, o)?;
                Ok(t.sum_all(sq))
            },
            &params,
            &GradCheckConfig::default(),
        )
        .unwrap();
        prop_assert!(report.passed, "{}", report.max_rel_error);
    }

    #[test]
    fn model_ops_pass_grad_check(seed in any::<u64>(), n in 1usize..8, heads in 1usize..3) {
        let mut rng = SeededRng::new(seed);
        let hd = 4;
        let d = heads * hd;
        let tokens: Vec<usize> = (0..n).map(|_| rng.below(7)).collect();
        let targets: Vec<usize> = (0..n).map(|_| rng.below(7)).collect();
        let weights: Vec<f64> = (0..n).map(|i| if i % 3 == 2 { 0.0 } else { 1.0 }).collect();
        let mask = BoundaryMask::single(n);
        let spans = model::attention_spans(&mask, Some(3));
        let positions = mask.positions();
        let params = vec![
            ("table".to_string(), rng.normal_matrix(7, d, 1.0)),
            ("gain".to_string(), rng.normal_matrix(1, d, 1.0)),
            ("wq".to_string(), rng.normal_matrix(d, d, 0.5)),
            ("wk".to_string(), rng.normal_matrix(d, d, 0.5)),
            ("unembed".to_string(), rng.normal_matrix(7, d, 1.0)),
        ];
        let report = grad_check(
            |t: &mut Tape, v: &[Var]| -> Result<Var, E> {
                let x = model::embed(t, v[0], &tokens);
                let h = model::rms_norm(t, x, v[1], 1e-6);
                let q = t.matmul_bt(h, v[2])?;
                let k = t.matmul_bt(h, v[3])?;
                let q = model::rope(t, q, &positions, heads, 1e4);
                let k = model::rope(t, k, &positions, heads, 1e4);
                let a = model::attention(t, q, k, h, heads, spans.clone());
                let logits = t.matmul_bt(a, v[4])?;
                Ok(cross_entropy(t, logits, &targets, &weights)?)
            },
            &params,
            &GradCheckConfig::default(),
        )
        .unwrap();
        prop_assert!(report.passed, "{}", report.max_rel_error);
    }
}

#[test]
fn backward_twice_is_bitwise_identical() {
    let mut rng = SeededRng::new(1);
    let mut t = Tape::new();
    let a = t.param("a", rng.normal_matrix(6, 5, 1.0));
    let b = t.param("b", rng.normal_matrix(5, 4, 1.0));
    let ab = t.matmul(a, b).unwrap();
    let s = t.silu(ab);
    let sq = t.mul(s, ab).unwrap();
    let loss = t.sum_all(sq);
    let g1 = t.backward(loss).unwrap();
    let g2 = t.backward(loss).unwrap();
    for ((n1, m1), (n2, m2)) in g1.params().iter().zip(g2.params()) {
        assert_eq!(n1, n2);
        assert!(m1.bitwise_eq(m2));
    }
}

/// The loss on chunk 2's output depends on chunk 1's target through the
/// accumulated delta, so its gradient with respect to chunk 1's V̂ is nonzero.
#[test]
fn gradient_flows_across_chunks() {
    let mut rng = SeededRng::new(2);
    let chunks = plan_chunks(&BoundaryMask::single(8), 4);
    let mut t = Tape::new();
    let z = t.constant(rng.normal_matrix(8, 3, 1.0));
    let vhat = t.param("vhat", rng.normal_matrix(8, 2, 1.0));
    let w = t.constant(rng.normal_matrix(2, 3, 1.0));
    let o = ttt::fast_weight_tape(&mut t, z, vhat, w, &chunks, 0.5, None, ScanMode::SerialOrder).unwrap();
    let second = t.slice_rows(o, 4..8);
    let loss = t.sum_all(second);
    let g = t.backward(loss).unwrap();
    let gv = g.param("vhat").unwrap();
    assert!(gv.slice_rows(0..4).max_abs() > 1e-6);
    // Chunk 2's own target only affects later chunks.
    assert_eq!(gv.slice_rows(4..8), RealMatrix::zeros(4, 2));
}
