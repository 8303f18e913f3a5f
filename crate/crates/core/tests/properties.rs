use loki_core::harness::{avg_degradation, BenchmarkVector};
use loki_core::kva::{attribute_all, AttributionConfig, AttributionLog, PathMode, TargetSpec};
use loki_core::loki_layer::PartitionedDownProjection;
use loki_core::model::{ModelConfig, NodeScaling, PositionMode, ToyTransformer};
use loki_core::numerics::{GradientContext, Tensor};
use loki_core::selector::{
    allocate_quota, global_select, layer_balanced_select, local_select, normalize_per_sample_layer, similarity,
    Polarity, SelectionSet,
};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1.0f64..1.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn subset(n: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(any::<bool>(), n).prop_map(|m| m.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect())
}

fn log_strategy() -> impl Strategy<Value = AttributionLog> {
    logs(1..=6)
}

fn logs(samples: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = AttributionLog> {
    (samples, 1usize..=4, 2usize..=12).prop_flat_map(|(n, l, d)| {
        prop::collection::vec(-5.0f64..5.0, n * l * d).prop_map(move |v| {
            AttributionLog::from_scores(Tensor::new(vec![n, l, d], v).unwrap()).unwrap()
        })
    })
}

fn small_model(seed: u64, final_norm: bool) -> ToyTransformer {
    ToyTransformer::new(ModelConfig {
        num_layers: 2,
        d_model: 8,
        d_ff: 12,
        vocab_size: 12,
        num_heads: 2,
        max_seq_len: 8,
        final_norm,
        seed,
        ..ModelConfig::default()
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partitioned_forward_matches_dense(
        (w, bias, x, target) in (1usize..10, 1usize..8, 1usize..5).prop_flat_map(|(out, inp, batch)| (
            matrix(out, inp),
            prop::option::of(prop::collection::vec(-1.0f64..1.0, out)),
            matrix(batch, inp),
            subset(out),
        ))
    ) {
        let bias = bias.map(Tensor::vector);
        let p = PartitionedDownProjection::from_linear(&w, bias.as_ref(), &target).unwrap();
        let mut dense = x.matmul_t(&w).unwrap();
        if let Some(b) = &bias {
            let cols = dense.cols();
            for (i, v) in dense.data_mut().iter_mut().enumerate() {
                *v += b.data()[i % cols];
            }
        }
        prop_assert!(p.forward(&x).unwrap().max_abs_diff(&dense) <= 1e-12);

        let order: Vec<usize> = p.active_pos().iter().chain(p.frozen_pos()).copied().collect();
        let permuted: Vec<usize> = p.index_map().iter().map(|&i| order[i]).collect();
        prop_assert_eq!(permuted, (0..w.rows()).collect::<Vec<_>>());

        let (merged, merged_bias) = p.merge_to_linear().unwrap();
        prop_assert!(merged.bitwise_eq(&w));
        prop_assert_eq!(merged_bias, bias);
    }

    #[test]
    fn local_select_ignores_monotone_transforms(v in prop::collection::vec(-3.0f64..3.0, 2..20), k in 1usize..20, shift in -5.0f64..5.0, gain in 0.1f64..5.0) {
        let k = k.min(v.len());
        let transformed: Vec<f64> = v.iter().map(|x| (gain * x + shift).exp()).collect();
        prop_assert_eq!(
            local_select(&normalize_per_sample_layer(&v), k).unwrap(),
            local_select(&normalize_per_sample_layer(&transformed), k).unwrap()
        );
    }

    #[test]
    fn layer_balanced_meets_quota(log in log_strategy(), q in 1.0f64..99.0) {
        let (l, d) = (log.num_layers(), log.num_nodes());
        match allocate_quota(q, l, d) {
            Ok(plan) => {
                let s = layer_balanced_select(&log, q).unwrap();
                prop_assert!(s.layers.iter().all(|layer| layer.len() == plan.per_layer));
                prop_assert!(s.total() as f64 <= plan.total + 1e-9);
                prop_assert!(s.validate(l, d).is_ok());
                prop_assert_eq!(s.to_json().unwrap(), layer_balanced_select(&log, q).unwrap().to_json().unwrap());
            }
            Err(_) => prop_assert!(layer_balanced_select(&log, q).is_err()),
        }
    }

    /// With several samples a node can be extreme in both directions, so the
    /// guarantee is per sample.
    #[test]
    fn global_extremes_are_disjoint(log in logs(1..=1), q in 1.0f64..50.0) {
        let total = (q / 100.0 * (log.num_layers() * log.num_nodes()) as f64).floor() as usize;
        prop_assume!(total >= 1);
        let high = global_select(&log, q, Polarity::High).unwrap();
        let low = global_select(&log, q, Polarity::Low).unwrap();
        prop_assert_eq!(high.total(), total);
        for (h, l) in high.layers.iter().zip(&low.layers) {
            prop_assert!(h.iter().all(|j| !l.contains(j)));
        }
    }

    #[test]
    fn similarity_is_bounded_and_reflexive(a in prop::collection::vec(subset(10), 1..4), b_seed in any::<u64>()) {
        prop_assume!(a.iter().all(|l| !l.is_empty()));
        let a = SelectionSet::from_layers(a);
        let b = SelectionSet::from_layers(
            a.layers.iter().enumerate().map(|(l, s)| s.iter().copied().filter(|j| (b_seed >> ((j + l) % 64)) & 1 == 1).collect()).collect(),
        );
        let s = similarity(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&s.overall));
        prop_assert!(s.per_layer.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(similarity(&a, &a).unwrap().overall, 1.0);
        prop_assert_eq!(s.overall == 1.0, a == b || a.layers == b.layers);
    }

    #[test]
    fn degradation_signs(base in prop::collection::vec(1.0f64..100.0, 1..7), frac in 0.0f64..0.99) {
        let names: Vec<String> = (0..base.len()).map(|i| format!("b{i}")).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let same = BenchmarkVector::from_scores(&names, &base, &base).unwrap();
        prop_assert_eq!(avg_degradation(&same).unwrap(), 0.0);
        let lower: Vec<f64> = base.iter().map(|b| b * frac).collect();
        let dropped = BenchmarkVector::from_scores(&names, &base, &lower).unwrap();
        prop_assert!(avg_degradation(&dropped).unwrap() > 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn zeroing_equals_zero_scaling(seed in any::<u64>(), layer in 0usize..2, node in prop::option::of(0usize..8), tokens in prop::collection::vec(0usize..12, 2..6), gold in 0usize..12) {
        let model = small_model(seed, true);
        let rows = node.map_or_else(|| (0..8).collect(), |j| vec![j]);
        let mut layers = vec![vec![], vec![]];
        layers[layer] = rows;
        let last = tokens.len() - 1;
        let zeroed = model.zero_rows(&SelectionSet::from_layers(layers)).unwrap().forward(&tokens).unwrap();
        let target = TargetSpec { tokens, answer_position: last, gold_token: gold };
        let scaling = NodeScaling { layer, alpha: 0.0, positions: PositionMode::All, node };
        let scaled = model.forward_scaled(&target, &scaling, &mut GradientContext::new()).unwrap();
        prop_assert!((scaled.logit - zeroed.get(last, gold)).abs() <= 1e-12);
    }

    #[test]
    fn snapshot_restore_is_lossless(seed in any::<u64>(), other in any::<u64>()) {
        let mut model = small_model(seed, true);
        let snap = model.snapshot();
        let original = model.clone();
        let donor = small_model(other, true);
        model.restore(&donor.snapshot()).unwrap();
        model.restore(&snap).unwrap();
        prop_assert_eq!(model, original);
    }

    #[test]
    fn attribution_is_deterministic(seed in any::<u64>(), tokens in prop::collection::vec(0usize..12, 2..6), gold in 0usize..12) {
        let model = small_model(seed, true);
        let samples = vec![TargetSpec { answer_position: tokens.len() - 1, tokens, gold_token: gold }];
        let cfg = AttributionConfig { steps: 3, path_mode: PathMode::JointLayer, ..AttributionConfig::default() };
        let a = attribute_all(&model, &samples, &cfg).unwrap();
        let b = attribute_all(&model, &samples, &cfg).unwrap();
        prop_assert_eq!(a.to_bytes(), b.to_bytes());
    }
}
