use super::optim::{adam_step, lr_at, AdamConfig, OptimizerState};
use super::train::{run_digest, EvalCadence, EvalPoint, LossWindow, RunRecord, TrainConfig};
use super::{TuningPolicy, EVAL_BATCH};
use crate::data::{mask_with_rng, MaskedBatch};
use crate::model::{apply_tuning_policy, EncoderModel, Head, Mode, TokenBatch};
use crate::rng::stream;
use crate::tensor::{HasParams, Tape};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use std::time::Instant;

/// Sequences scored by [`mlm_eval_loss`].
const MLM_EVAL_SEQUENCES: usize = 256;

fn eval_batches(model: &EncoderModel, corpus: &[Vec<u32>], seed: u64) -> Result<Vec<MaskedBatch>> {
    let mut rng = stream(seed, "mlm-eval");
    let n = corpus.len().min(MLM_EVAL_SEQUENCES);
    corpus[..n]
        .chunks(EVAL_BATCH)
        .map(|chunk| {
            Ok(mask_with_rng(
                &TokenBatch::pad(chunk)?,
                model.config().vocab_size,
                &mut rng,
            ))
        })
        .collect()
}

fn masked_loss(model: &EncoderModel, batches: &[MaskedBatch]) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for mb in batches {
        let mut tape = Tape::new();
        if let Some(loss) = model.mlm_loss(&mut tape, mb, &mut Mode::Eval)? {
            sum += tape.value(loss)?.data()[0] * mb.targets.len() as f64;
            count += mb.targets.len();
        }
    }
    if count == 0 {
        return Err(Error::Empty("masked positions"));
    }
    Ok(sum / count as f64)
}

/// Eval-mode masked-LM loss on a fixed seeded masking of the first
/// sequences of `corpus`, averaged over masked positions.
pub fn mlm_eval_loss(model: &EncoderModel, corpus: &[Vec<u32>], seed: u64) -> Result<f64> {
    masked_loss(model, &eval_batches(model, corpus, seed)?)
}

/// Masked-LM training on unlabeled sequences with dynamic masking. The
/// record's `dev_loss` entries trace the held-out masked-LM loss, starting
/// with the untrained model at step 0.
pub fn tapt_pretrain(
    model: &mut EncoderModel,
    corpus: &[Vec<u32>],
    policy: &TuningPolicy,
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    let start = Instant::now();
    cfg.validate()?;
    if corpus.len() < cfg.batch_size {
        return Err(Error::Invalid(format!(
            "corpus has {} sequences, fewer than one batch of {}",
            corpus.len(),
            cfg.batch_size
        )));
    }
    apply_tuning_policy(model, policy, Head::MaskedLm)?;
    let held_out = eval_batches(model, corpus, cfg.seed)?;
    let total = cfg.total_steps(corpus.len());
    let vocab = model.config().vocab_size;
    let mut opt = OptimizerState::new(model.params(), AdamConfig::default());
    let mut shuffle_rng = stream(cfg.seed, "shuffle");
    let mut mask_rng = stream(cfg.seed, "mlm-mask");
    let mut dropout_rng = stream(cfg.seed, "dropout");
    let mut order: Vec<usize> = (0..corpus.len()).collect();

    let mut record = RunRecord {
        config_digest: run_digest(model, policy, cfg, "mlm"),
        seed: cfg.seed,
        policy: policy.label().to_string(),
        evaluations: Vec::new(),
        selected: None,
        test_metric: None,
        total_steps: 0,
        warnings: Vec::new(),
        duration_secs: 0.0,
    };
    let mut window = LossWindow::default();
    let point = |model: &EncoderModel,
                 record: &mut RunRecord,
                 step,
                 epoch,
                 window: &mut LossWindow|
     -> Result<()> {
        record.evaluations.push(EvalPoint {
            step,
            epoch,
            train_loss: window.take(),
            dev_metric: None,
            dev_loss: Some(masked_loss(model, &held_out)?),
        });
        Ok(())
    };
    point(model, &mut record, 0, 0, &mut window)?;

    let mut step = 0;
    let mut skipped = 0;
    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            if step == total {
                break 'epochs;
            }
            let seqs: Vec<&[u32]> = chunk.iter().map(|&i| corpus[i].as_slice()).collect();
            let masked = mask_with_rng(&TokenBatch::pad(&seqs)?, vocab, &mut mask_rng);
            model.params_mut().zero_grad();
            let mut tape = Tape::new();
            let Some(loss) =
                model.mlm_loss(&mut tape, &masked, &mut Mode::Train(&mut dropout_rng))?
            else {
                skipped += 1;
                continue;
            };
            window.push(tape.value(loss)?.data()[0]);
            tape.backward(loss, model.params_mut())?;
            adam_step(model.params_mut(), &mut opt, lr_at(step, total, cfg)?)?;
            step += 1;
            if let EvalCadence::Steps(n) = cfg.eval_every {
                if step % n == 0 {
                    point(model, &mut record, step, epoch, &mut window)?;
                }
            }
        }
        if cfg.eval_every == EvalCadence::Epoch {
            point(model, &mut record, step, epoch, &mut window)?;
        }
    }
    if record.evaluations.last().is_none_or(|e| e.step != step) {
        let epoch = record.evaluations.last().map_or(1, |e| e.epoch.max(1));
        point(model, &mut record, step, epoch, &mut window)?;
    }
    if skipped > 0 {
        record.warnings.push(format!(
            "{skipped} batches had no masked positions and were skipped"
        ));
    }
    record.total_steps = step;
    record.duration_secs = start.elapsed().as_secs_f64();
    Ok(record)
}
