use super::*;
use crate::data::{CLS_ID, SEP_ID};
use crate::tuning::TuningPolicy;

fn config(layers: usize, d: usize) -> TransformerConfig {
    TransformerConfig {
        num_layers: layers,
        model_dim: d,
        num_heads: 2,
        ffn_dim: 2 * d,
        vocab_size: 30,
        max_seq_len: 12,
        dropout_rate: 0.1,
    }
}

fn batch() -> TokenBatch {
    TokenBatch::pad(&[vec![CLS_ID, 7, 9, 11, SEP_ID], vec![CLS_ID, 8, SEP_ID]]).unwrap()
}

#[test]
fn forward_shapes() {
    let m = EncoderModel::new(config(3, 16), None, 4, 1).unwrap();
    let out = m.encoder_forward(&batch(), &mut Mode::Eval).unwrap();
    assert_eq!(out.hidden.len(), 4);
    for h in &out.hidden {
        assert_eq!(h.shape(), &[2, 5, 16]);
    }
    assert_eq!(out.pooled.shape(), &[2, 16]);
    assert_eq!(
        out.pooled.row(1),
        &out.hidden[3].data()[5 * 16..5 * 16 + 16]
    );
}

#[test]
fn eval_forward_is_deterministic() {
    let m = EncoderModel::new(config(2, 16), Some(AdapterConfig::new(4)), 2, 5).unwrap();
    let a = m.encoder_forward(&batch(), &mut Mode::Eval).unwrap();
    let b = m.encoder_forward(&batch(), &mut Mode::Eval).unwrap();
    for (x, y) in a.hidden.iter().zip(&b.hidden) {
        assert!(x.bit_eq(y));
    }
}

#[test]
fn train_mode_dropout_changes_outputs() {
    let m = EncoderModel::new(config(1, 16), None, 2, 5).unwrap();
    let eval = m.encoder_forward(&batch(), &mut Mode::Eval).unwrap();
    let mut rng = stream(0, "dropout");
    let train = m
        .encoder_forward(&batch(), &mut Mode::Train(&mut rng))
        .unwrap();
    assert!(!eval.pooled.bit_eq(&train.pooled));
}

#[test]
fn zero_up_projection_adapters_are_an_exact_identity() {
    let plain = EncoderModel::new(config(3, 16), None, 2, 9).unwrap();
    let adapted = EncoderModel::new(config(3, 16), Some(AdapterConfig::new(4)), 2, 9).unwrap();
    let a = plain.encoder_forward(&batch(), &mut Mode::Eval).unwrap();
    let b = adapted.encoder_forward(&batch(), &mut Mode::Eval).unwrap();
    for (x, y) in a.hidden.iter().zip(&b.hidden) {
        assert!(x.bit_eq(y));
    }
}

#[test]
fn padding_does_not_leak_into_real_positions() {
    let m = EncoderModel::new(config(2, 16), None, 2, 3).unwrap();
    let short = TokenBatch::pad(&[vec![CLS_ID, 8, SEP_ID]]).unwrap();
    let alone = m.encoder_forward(&short, &mut Mode::Eval).unwrap();
    let padded = m.encoder_forward(&batch(), &mut Mode::Eval).unwrap();
    let last = padded.hidden.last().unwrap();
    let reference = alone.hidden.last().unwrap();
    for pos in 0..3 {
        for k in 0..16 {
            let diff = (last.at(&[1, pos, k]) - reference.at(&[0, pos, k])).abs();
            assert!(diff < 1e-12, "pos {pos} dim {k}: {diff}");
        }
    }
}

#[test]
fn invalid_tokens_and_lengths_are_rejected() {
    let m = EncoderModel::new(config(1, 16), None, 2, 0).unwrap();
    let bad = TokenBatch::pad(&[vec![CLS_ID, 30, SEP_ID]]).unwrap();
    match m.encoder_forward(&bad, &mut Mode::Eval) {
        Err(Error::TokenOutOfRange {
            id,
            example,
            position,
            ..
        }) => {
            assert_eq!((id, example, position), (30, 0, 1));
        }
        other => panic!("unexpected {other:?}"),
    }
    let long = TokenBatch::pad(&[vec![7u32; 13]]).unwrap();
    assert!(matches!(
        m.encoder_forward(&long, &mut Mode::Eval),
        Err(Error::SequenceTooLong { len: 13, max: 12 })
    ));
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = config(1, 16);
    c.num_heads = 3;
    assert!(EncoderModel::new(c, None, 2, 0).is_err());
    assert!(EncoderModel::new(config(1, 16), Some(AdapterConfig::new(16)), 2, 0).is_err());
    assert!(EncoderModel::new(config(1, 16), Some(AdapterConfig::new(0)), 2, 0).is_err());
    assert!(EncoderModel::new(config(1, 16), None, 0, 0).is_err());
}

#[test]
fn adapter_policy_trainable_count() {
    // 2 layers x 2 sites x (16*4 + 4 + 4*16 + 16) adapter values,
    // 2 layers x 2 norms x 2 x 16 norm values, 16*3 + 3 head values.
    let mut m = EncoderModel::new(config(2, 16), Some(AdapterConfig::new(4)), 3, 0).unwrap();
    let policy = TuningPolicy::adapter(AdapterConfig::new(4));
    let part = apply_tuning_policy(&mut m, &policy, Head::Classifier).unwrap();
    let trainable = count_parameters(&m, ParamFilter::Trainable).count;
    assert_eq!(trainable, 592 + 128 + 51);
    let frozen: usize = m
        .params()
        .iter()
        .filter(|p| p.frozen)
        .map(Parameter::len)
        .sum();
    assert_eq!(
        trainable + frozen,
        count_parameters(&m, ParamFilter::All).count
    );
    assert_eq!(part.trainable.len() + part.frozen.len(), m.params().len());
    assert!(part.frozen.iter().any(|n| n == "head.mlm.weight"));
    assert!(part
        .trainable
        .iter()
        .all(|n| n.contains("adapter") || n.contains("norm") || n.starts_with("head.classifier")));
}

#[test]
fn full_fine_tune_trains_everything() {
    let mut m = EncoderModel::new(config(2, 16), None, 3, 0).unwrap();
    let part =
        apply_tuning_policy(&mut m, &TuningPolicy::full_fine_tune(), Head::Classifier).unwrap();
    assert!(part.frozen.is_empty());
    assert_eq!(count_parameters(&m, ParamFilter::Trainable).fraction, 1.0);
}

#[test]
fn policy_mismatches_are_errors() {
    let mut plain = EncoderModel::new(config(1, 16), None, 2, 0).unwrap();
    assert!(apply_tuning_policy(
        &mut plain,
        &TuningPolicy::adapter(AdapterConfig::new(4)),
        Head::Classifier
    )
    .is_err());
    let mut adapted = EncoderModel::new(config(1, 16), Some(AdapterConfig::new(4)), 2, 0).unwrap();
    assert!(apply_tuning_policy(
        &mut adapted,
        &TuningPolicy::adapter(AdapterConfig::new(8)),
        Head::Classifier
    )
    .is_err());
    assert!(apply_tuning_policy(
        &mut adapted,
        &TuningPolicy::full_fine_tune(),
        Head::Classifier
    )
    .is_err());
}

#[test]
fn backbone_matches_with_and_without_adapters() {
    let plain = EncoderModel::new(config(2, 16), None, 2, 4).unwrap();
    let adapted = EncoderModel::new(config(2, 16), Some(AdapterConfig::new(4)), 2, 4).unwrap();
    for p in plain.params().iter() {
        let q = adapted.params().by_name(p.name()).unwrap();
        assert!(p.value().bit_eq(q.value()), "{}", p.name());
    }
    let w = adapted
        .adapter_weights(1, AdapterSite::FeedForward)
        .unwrap();
    assert!(w.up_weight.data().iter().all(|&x| x == 0.0));
    assert!(w.down_bias.data().iter().all(|&x| x == 0.0));
    assert!(w.down_weight.data().iter().any(|&x| x != 0.0));
}

#[test]
fn derive_inherits_backbone_as_new_snapshot() {
    let mut base = EncoderModel::new(config(1, 16), None, 2, 1).unwrap();
    let id = base.params().id("layer.0.ffn.in.weight").unwrap();
    base.params_mut()
        .get_mut(id)
        .set_value(&vec![0.5; 16 * 32])
        .unwrap();
    let child = base.derive(Some(AdapterConfig::new(4)), 3, 2).unwrap();
    let p = child.params().by_name("layer.0.ffn.in.weight").unwrap();
    assert_eq!(p.value().data()[0], 0.5);
    assert!(p.matches_initial());
    assert_eq!(child.num_classes(), 3);
    assert!(child.backbone_intact());
}

#[test]
fn replace_parameters_names_the_mismatch() {
    let m = EncoderModel::new(config(1, 16), None, 2, 1).unwrap();
    let mut params: Vec<Parameter> = m.params().iter().cloned().collect();
    let rebuilt = EncoderModel::from_parameters(config(1, 16), None, 2, params.clone()).unwrap();
    assert_eq!(rebuilt.params().values(), m.params().values());
    params.swap(0, 1);
    let err = EncoderModel::from_parameters(config(1, 16), None, 2, params).unwrap_err();
    assert!(err.to_string().contains("embeddings.token.weight"), "{err}");
}

#[test]
fn mlm_loss_without_targets_is_none() {
    let m = EncoderModel::new(config(1, 16), None, 2, 1).unwrap();
    let masked = MaskedBatch {
        batch: batch(),
        targets: vec![],
    };
    let mut tape = Tape::new();
    assert!(m
        .mlm_loss(&mut tape, &masked, &mut Mode::Eval)
        .unwrap()
        .is_none());
}
