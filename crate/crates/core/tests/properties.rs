use adaptlab_core::analysis::{loss_landscape, quartiles, rsa_score, ModelSnapshot};
use adaptlab_core::data::{LabeledExample, CLS_ID, SEP_ID};
use adaptlab_core::model::{AdapterConfig, EncoderModel, TransformerConfig};
use adaptlab_core::tensor::{ParamStore, Parameter, Tape, Tensor};
use adaptlab_core::tuning::{
    adam_step, compute_metric, lr_at, mean_loss, mixout_effective_weight, AdamConfig, Metric,
    OptimizerState, TrainConfig,
};
use proptest::collection::vec;
use proptest::prelude::*;

/// `n x d` matrices whose rows are bounded away from zero.
fn matrix(n: usize, d: usize) -> impl Strategy<Value = Tensor> {
    vec(-1.0f64..1.0, n * d).prop_map(move |mut v| {
        for row in v.chunks_mut(d) {
            row[0] += if row[0] >= 0.0 { 0.5 } else { -0.5 };
        }
        Tensor::new(vec![n, d], v).unwrap()
    })
}

fn orthogonal(raw: &[f64], d: usize) -> Tensor {
    let mut q: Vec<Vec<f64>> = Vec::new();
    for r in 0..d {
        let mut v = raw[r * d..(r + 1) * d].to_vec();
        v[r] += 2.0;
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        q.push(v.into_iter().map(|x| x / n).collect());
    }
    Tensor::from_rows(&q).unwrap()
}

fn tiny_model(seed: u64) -> EncoderModel {
    let cfg = TransformerConfig {
        num_layers: 1,
        model_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        vocab_size: 12,
        max_seq_len: 8,
        dropout_rate: 0.1,
    };
    EncoderModel::new(cfg, Some(AdapterConfig::new(2)), 2, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rsa_of_a_matrix_with_itself_is_one(a in matrix(8, 4)) {
        prop_assert!((rsa_score(&a, &a).unwrap() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn rsa_is_rotation_invariant(a in matrix(8, 4), raw in vec(-1.0f64..1.0, 16)) {
        let rotated = a.matmul(&orthogonal(&raw, 4)).unwrap();
        prop_assert!((rsa_score(&a, &rotated).unwrap() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn rsa_is_symmetric_and_sign_invariant(a in matrix(8, 4), b in matrix(8, 4)) {
        let ab = rsa_score(&a, &b).unwrap();
        prop_assert!((ab - rsa_score(&b, &a).unwrap()).abs() <= 1e-12);
        let neg = a.map(|x| -x, "negate").unwrap();
        prop_assert_eq!(ab.to_bits(), rsa_score(&neg, &b).unwrap().to_bits());
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn rsa_ignores_positive_rescaling(a in matrix(8, 4), b in matrix(8, 4), s in 0.01f64..100.0) {
        let scaled = a.map(|x| x * s, "scale").unwrap();
        prop_assert!((rsa_score(&a, &b).unwrap() - rsa_score(&scaled, &b).unwrap()).abs() <= 1e-9);
    }

    #[test]
    fn snapshot_round_trips(seed in 0u64..1000, shift in -1.0f64..1.0) {
        let mut m = tiny_model(seed);
        let snap = ModelSnapshot::gather(&m);
        let moved = ModelSnapshot {
            entries: snap.entries.clone(),
            values: snap.values.iter().map(|v| v + shift).collect(),
        };
        moved.scatter(&mut m).unwrap();
        prop_assert_eq!(&ModelSnapshot::gather(&m), &moved);
        snap.scatter(&mut m).unwrap();
        prop_assert_eq!(ModelSnapshot::gather(&m), snap);
    }

    #[test]
    fn mixout_anchor_is_a_fixed_point(w0 in vec(-2.0f64..2.0, 12), p in 0.0f64..0.99, mask in vec(any::<bool>(), 4)) {
        let w0 = Tensor::new(vec![3, 4], w0).unwrap();
        let out = mixout_effective_weight(&w0, &w0, p, &mask).unwrap();
        prop_assert!(out.max_abs_diff(&w0) <= 1e-12);
    }

    #[test]
    fn mixout_without_dropping_is_identity(w in vec(-2.0f64..2.0, 12), w0 in vec(-2.0f64..2.0, 12), mask in vec(any::<bool>(), 4)) {
        let w = Tensor::new(vec![3, 4], w).unwrap();
        let w0 = Tensor::new(vec![3, 4], w0).unwrap();
        prop_assert!(mixout_effective_weight(&w, &w0, 0.0, &mask).unwrap().bit_eq(&w));
    }

    #[test]
    fn adam_never_touches_frozen_parameters(values in vec(-1.0f64..1.0, 6), frozen in vec(any::<bool>(), 3), lr in 1e-5f64..1e-1) {
        let mut store = ParamStore::new();
        let ids: Vec<_> = (0..3)
            .map(|i| store.add(Parameter::new(format!("p{i}"), Tensor::new(vec![2], values[2 * i..2 * i + 2].to_vec()).unwrap())).unwrap())
            .collect();
        for (&id, &f) in ids.iter().zip(&frozen) {
            store.get_mut(id).frozen = f;
        }
        let before = store.values();
        let mut tape = Tape::new();
        let vars: Vec<_> = ids.iter().map(|&id| tape.param(&store, id)).collect();
        let mut total = tape.mul(vars[0], vars[0]).unwrap();
        for &v in &vars[1..] {
            let sq = tape.mul(v, v).unwrap();
            let shifted = tape.add(sq, v).unwrap();
            total = tape.add(total, shifted).unwrap();
        }
        let loss = tape.sum(total).unwrap();
        tape.backward(loss, &mut store).unwrap();
        let mut state = OptimizerState::new(&store, AdamConfig::default());
        adam_step(&mut store, &mut state, lr).unwrap();
        for (i, &f) in frozen.iter().enumerate() {
            let same = store.get(ids[i]).value().bit_eq(&before[i]);
            prop_assert_eq!(same, f, "parameter {}", i);
        }
    }

    #[test]
    fn metrics_stay_in_range(pairs in vec((0usize..3, 0usize..3), 1..40)) {
        let (gold, pred): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let acc = compute_metric(Metric::Accuracy, &gold, &pred).unwrap().value;
        let micro = compute_metric(Metric::MicroF1, &gold, &pred).unwrap().value;
        let macro_f1 = compute_metric(Metric::MacroF1, &gold, &pred).unwrap().value;
        let mcc = compute_metric(Metric::Mcc, &gold, &pred).unwrap().value;
        prop_assert!((0.0..=1.0).contains(&acc));
        prop_assert!((acc - micro).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&macro_f1));
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&mcc));
    }

    #[test]
    fn quartiles_are_ordered(values in vec(-10.0f64..10.0, 1..30)) {
        let q = quartiles(&values).unwrap();
        prop_assert!(q.min <= q.q1 && q.q1 <= q.median && q.median <= q.q3 && q.q3 <= q.max);
        prop_assert!(q.iqr() >= 0.0);
    }

    #[test]
    fn schedule_stays_between_zero_and_peak(total in 1usize..500, frac in 0.0f64..1.0, warmup in 0.0f64..0.5) {
        let cfg = TrainConfig { peak_lr: 3e-4, warmup_fraction: warmup, ..TrainConfig::default() };
        let step = ((total as f64) * frac) as usize;
        let lr = lr_at(step, total, &cfg).unwrap();
        prop_assert!((0.0..=3e-4).contains(&lr));
        prop_assert_eq!(lr_at(total, total, &cfg).unwrap(), 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn landscape_endpoints_are_exact(seed in 0u64..1000, shift in vec(-0.5f64..0.5, 4)) {
        let mut m = tiny_model(seed);
        let theta0 = ModelSnapshot::gather(&m);
        let theta1 = ModelSnapshot {
            entries: theta0.entries.clone(),
            values: theta0.values.iter().enumerate().map(|(i, v)| v + shift[i % 4]).collect(),
        };
        let examples = vec![
            LabeledExample { ids: vec![CLS_ID, 6, 7, SEP_ID], label: 0 },
            LabeledExample { ids: vec![CLS_ID, 9, 11, 8, SEP_ID], label: 1 },
        ];
        theta1.scatter(&mut m).unwrap();
        let l1 = mean_loss(&m, &examples).unwrap();
        let mut at0 = m.clone();
        theta0.scatter(&mut at0).unwrap();
        let l0 = mean_loss(&at0, &examples).unwrap();
        let curve = loss_landscape(&mut m, &theta1, &theta0, &examples, &[-1.0, 0.0, 0.5, 1.0, 2.0]).unwrap();
        prop_assert!((curve.losses[1] - l0).abs() <= 1e-8 * l0.abs());
        prop_assert!((curve.losses[3] - l1).abs() <= 1e-8 * l1.abs());
        prop_assert_eq!(ModelSnapshot::gather(&m), theta1);
    }
}
