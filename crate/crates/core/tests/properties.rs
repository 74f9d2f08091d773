use proptest::prelude::*;

use ttgen::backbone::ParamSet;
use ttgen::harness::experiments::layer_distance_report;
use ttgen::harness::report::{labels, mean_std, ExperimentReport};
use ttgen::objectives::rms_normalize;
use ttgen::synthdata::{make_rotated_domains, rotate_plane, stream, OrderPolicy};
use ttgen::ttg::{BatchRecord, RunMetrics, StrategyKind};
use ttgen::Tensor;

fn record(batch_idx: usize, per_domain: Vec<(usize, usize, usize)>) -> BatchRecord {
    BatchRecord {
        batch_idx,
        domain_id: None,
        n: per_domain.iter().map(|p| p.1).sum(),
        n_correct: per_domain.iter().map(|p| p.2).sum(),
        mean_entropy: 0.0,
        adapt_ms: 0.0,
        degenerate: false,
        per_domain,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn stream_emits_every_sample_once(
        sizes in prop::collection::vec(3usize..14, 1..4),
        batch_size in 1usize..9,
        interleaved in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut domains = Vec::new();
        for (d, &n) in sizes.iter().enumerate() {
            let mut ds = make_rotated_domains(d as u64, &[15.0 * d as f64], n, 3, 8).unwrap().remove(0);
            ds.domain_id = d;
            domains.push(ds);
        }
        let policy = if interleaved { OrderPolicy::InterleavedRandom } else { OrderPolicy::SingleDomain };
        let s = stream(&domains, batch_size, policy, seed).unwrap();
        prop_assert_eq!(s.n_samples(), sizes.iter().sum::<usize>());
        for (d, &n) in sizes.iter().enumerate() {
            let count = s.batches.iter().flat_map(|b| &b.domain_ids).filter(|&&i| i == d).count();
            prop_assert_eq!(count, n);
        }
        if interleaved {
            let (last, full) = s.batches.split_last().unwrap();
            prop_assert!(full.iter().all(|b| b.len() == batch_size));
            prop_assert!(last.len() <= batch_size);
        }
        let again = stream(&domains, batch_size, policy, seed).unwrap();
        prop_assert!(s.batches.iter().zip(&again.batches).all(|(a, b)| a.inputs.bits_eq(&b.inputs) && a.labels == b.labels));
    }

    #[test]
    fn accuracy_is_pooled_and_per_domain_consistent(
        batches in prop::collection::vec(prop::collection::vec((0usize..3, 1usize..20, 0usize..=100), 1..4), 1..10),
    ) {
        let records: Vec<BatchRecord> = batches
            .iter()
            .enumerate()
            .map(|(i, b)| record(i, b.iter().map(|&(d, n, pct)| (d, n, n * pct / 100)).collect()))
            .collect();
        let m = RunMetrics { strategy: StrategyKind::Erm, batches: records };
        let n: usize = m.batches.iter().map(|b| b.n).sum();
        let c: usize = m.batches.iter().map(|b| b.n_correct).sum();
        prop_assert_eq!(m.accuracy(), c as f64 / n as f64);
        let pd = m.per_domain();
        let weighted: f64 = m.per_domain_accuracy().iter().map(|(d, a)| a * pd[d].0 as f64).sum::<f64>() / n as f64;
        prop_assert!((weighted - m.accuracy()).abs() < 1e-12);
    }

    #[test]
    fn report_mean_recomputes_from_per_seed_values(values in prop::collection::vec(0.0f64..1.0, 1..8)) {
        let mut r = ExperimentReport::new("prop", "h");
        for (seed, v) in values.iter().enumerate() {
            r.push(labels(&[("strategy", "erm")]), seed as u64, "accuracy", *v);
        }
        let (mean, _) = mean_std(&values);
        prop_assert!((r.mean(&[("strategy", "erm")], "accuracy").unwrap() - mean).abs() < 1e-12);
        let s = r.summaries();
        prop_assert_eq!(s.len(), 1);
        prop_assert_eq!(s[0].n, values.len());
    }

    #[test]
    fn layer_distance_is_relative(
        data in prop::collection::vec(-2.0f64..2.0, 1..16),
        c in -1.0f64..1.0,
    ) {
        prop_assume!(data.iter().any(|v| *v != 0.0));
        let mut s = ParamSet::new();
        s.insert("bn1.gamma", Tensor::new([data.len()], data.clone()));
        prop_assert_eq!(layer_distance_report(&s, &[s.clone()]).unwrap()["bn1.gamma"], 0.0);
        let mut t = ParamSet::new();
        t.insert("bn1.gamma", Tensor::new([data.len()], data.iter().map(|v| v * (1.0 + c)).collect()));
        let d = layer_distance_report(&s, &[t]).unwrap()["bn1.gamma"];
        prop_assert!((d - c.abs()).abs() < 1e-9);
    }

    #[test]
    fn rms_normalization_is_scale_invariant(
        data in prop::collection::vec(-5.0f64..5.0, 1..32),
        scale in 0.01f64..100.0,
    ) {
        prop_assume!(data.iter().map(|v| v * v).sum::<f64>() > 1e-6);
        let a = rms_normalize(&Tensor::new([data.len()], data.clone()));
        let b = rms_normalize(&Tensor::new([data.len()], data.iter().map(|v| v * scale).collect()));
        prop_assert!(a.max_abs_diff(&b) < 1e-6);
        let rms = (a.data().iter().map(|v| v * v).sum::<f64>() / a.numel() as f64).sqrt();
        prop_assert!((rms - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_rotation_is_identity(img in prop::collection::vec(0.0f64..1.0, 64)) {
        let out = rotate_plane(&img, 8, 0.0);
        prop_assert!(out.iter().zip(&img).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
