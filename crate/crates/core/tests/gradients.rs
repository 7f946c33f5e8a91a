use adaptlab_core::data::{mask_for_mlm, CLS_ID, SEP_ID};
use adaptlab_core::model::{AdapterConfig, EncoderModel, Mode, TokenBatch, TransformerConfig};
use adaptlab_core::tensor::{gradient_check, GradCheckOptions, HasParams};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;

fn toy_model() -> EncoderModel {
    let cfg = TransformerConfig {
        num_layers: 2,
        model_dim: 32,
        num_heads: 2,
        ffn_dim: 64,
        vocab_size: 20,
        max_seq_len: 8,
        dropout_rate: 0.1,
    };
    let mut m = EncoderModel::new(cfg, Some(AdapterConfig::new(4)), 3, 7).unwrap();
    // Move every weight off its initialisation so no gradient is trivially zero.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    for p in m.params_mut().iter_mut() {
        let vals: Vec<f64> = p
            .value()
            .data()
            .iter()
            .map(|v| v + rng.random_range(-0.3..0.3))
            .collect();
        p.set_value(&vals).unwrap();
    }
    m
}

fn batch() -> TokenBatch {
    TokenBatch::pad(&[
        vec![CLS_ID, 6, 9, 12, 15, SEP_ID],
        vec![CLS_ID, 7, 19, SEP_ID],
        vec![CLS_ID, 5, 5, 8, 11, 13, 17, SEP_ID],
    ])
    .unwrap()
}

fn opts() -> GradCheckOptions {
    GradCheckOptions {
        max_entries_per_param: Some(6),
        ..GradCheckOptions::default()
    }
}

#[test]
fn classification_loss_gradients() {
    let mut m = toy_model();
    let b = batch();
    let report = gradient_check(
        &mut m,
        |m, tape| m.classification_loss(tape, &b, &[0, 2, 1], &mut Mode::Eval),
        &opts(),
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
    assert!(report.checked > 100);
}

#[test]
fn mlm_loss_gradients() {
    let mut m = toy_model();
    let mut masked = mask_for_mlm(&batch(), 20, 3);
    if masked.targets.is_empty() {
        masked = mask_for_mlm(&batch(), 20, 4);
    }
    let report = gradient_check(
        &mut m,
        |m, tape| {
            Ok(m.mlm_loss(tape, &masked, &mut Mode::Eval)?
                .expect("targets"))
        },
        &opts(),
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}
