//! Independent reimplementations checked against the library.

use loki_core::kva::AttributionLog;
use loki_core::numerics::Tensor;
use loki_core::selector::{global_select, layer_balanced_select, Polarity};
use proptest::prelude::*;

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.get(i, p) * b.get(p, j);
            }
            out[i * n + j] = acc;
        }
    }
    out
}

fn unit_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1.0f64..=1.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matmul_matches_triple_loop(
        (a, b) in (1usize..12, 1usize..40, 1usize..12)
            .prop_flat_map(|(m, k, n)| (unit_matrix(m, k), unit_matrix(k, n)))
    ) {
        let fast = a.matmul(&b).unwrap();
        for (x, y) in fast.data().iter().zip(naive_matmul(&a, &b)) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        let bt = b.transpose().unwrap();
        let via_t = a.matmul_t(&bt).unwrap();
        prop_assert!(via_t.max_abs_diff(&fast) <= 1e-12);
    }
}

#[path = "common/brute.rs"]
mod brute;

/// Scores drawn from a small grid half the time so ties and constant layers occur.
fn scores() -> impl Strategy<Value = Vec<Vec<Vec<f64>>>> {
    (1usize..=8, 1usize..=4, 2usize..=16).prop_flat_map(|(n, l, d)| {
        let value = prop_oneof![(-2i32..=2).prop_map(f64::from), -3.0f64..3.0];
        prop::collection::vec(prop::collection::vec(prop::collection::vec(value, d), l), n)
    })
}

fn to_log(scores: &[Vec<Vec<f64>>]) -> AttributionLog {
    let (n, l, d) = (scores.len(), scores[0].len(), scores[0][0].len());
    let flat = scores.iter().flatten().flatten().cloned().collect();
    AttributionLog::from_scores(Tensor::new(vec![n, l, d], flat).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn selectors_match_brute_force(s in scores(), q in prop::sample::select(vec![5.0, 10.0, 20.0, 30.0, 50.0, 75.0])) {
        let log = to_log(&s);
        match brute::layer_balanced(&s, q) {
            Some(want) => prop_assert_eq!(layer_balanced_select(&log, q).unwrap().layers, want),
            None => prop_assert!(layer_balanced_select(&log, q).is_err()),
        }
        for (high, polarity) in [(true, Polarity::High), (false, Polarity::Low)] {
            match brute::global(&s, q, high) {
                Some(want) => prop_assert_eq!(global_select(&log, q, polarity).unwrap().layers, want),
                None => prop_assert!(global_select(&log, q, polarity).is_err()),
            }
        }
    }
}
