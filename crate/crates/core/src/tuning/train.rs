use super::metrics::{batch_of, evaluate_split};
use super::optim::{adam_step, lr_at, AdamConfig, OptimizerState};
use super::{Metric, TuningPolicy};
use crate::data::TaskDataset;
use crate::model::{apply_tuning_policy, EncoderModel, Head, Mode};
use crate::rng::stream;
use crate::tensor::{HasParams, Tape, Tensor};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::time::Instant;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalCadence {
    #[default]
    Epoch,
    Steps(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub eval_every: EvalCadence,
    pub metric: Metric,
    /// Stops after this many updates even if epochs remain.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            peak_lr: 2e-5,
            warmup_fraction: 0.1,
            seed: 0,
            eval_every: EvalCadence::Epoch,
            metric: Metric::Accuracy,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    /// Defaults with the learning rate matching the policy.
    pub fn for_policy(policy: &TuningPolicy) -> Self {
        TrainConfig {
            peak_lr: if policy.adapter_config().is_some() {
                1e-4
            } else {
                2e-5
            },
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !self.peak_lr.is_finite() || self.peak_lr <= 0.0 {
            return Err(Error::Config(format!(
                "peak_lr must be positive, got {}",
                self.peak_lr
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must be in [0, 1)".into()));
        }
        if self.eval_every == EvalCadence::Steps(0) || self.max_steps == Some(0) {
            return Err(Error::Config("step counts must be positive".into()));
        }
        Ok(())
    }

    pub(crate) fn total_steps(&self, examples: usize) -> usize {
        let per_epoch = examples.div_ceil(self.batch_size);
        let total = per_epoch * self.epochs;
        self.max_steps.map_or(total, |m| m.min(total))
    }
}

/// One evaluation during training. For masked-LM runs `dev_metric` is
/// absent and `dev_loss` is the held-out masked-LM loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub dev_metric: Option<f64>,
    pub dev_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub step: usize,
    pub epoch: usize,
    pub dev_metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_digest: String,
    pub seed: u64,
    pub policy: String,
    pub evaluations: Vec<EvalPoint>,
    pub selected: Option<Selection>,
    pub test_metric: Option<f64>,
    pub total_steps: usize,
    pub warnings: Vec<String>,
    /// Wall-clock seconds; kept out of the serialized record.
    #[serde(skip)]
    pub duration_secs: f64,
}

/// Earliest evaluation with the highest dev metric.
pub fn select_checkpoint(evaluations: &[EvalPoint]) -> Option<Selection> {
    let mut best: Option<Selection> = None;
    for e in evaluations {
        let Some(m) = e.dev_metric else { continue };
        if best.as_ref().is_none_or(|b| m > b.dev_metric) {
            best = Some(Selection {
                step: e.step,
                epoch: e.epoch,
                dev_metric: m,
            });
        }
    }
    best
}

/// Hex SHA-256 of the JSON encoding of `value`.
pub fn config_digest<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    Sha256::digest(&json)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Serialize)]
struct DigestInput<'a> {
    model: &'a crate::model::TransformerConfig,
    adapter: Option<&'a crate::model::AdapterConfig>,
    num_classes: usize,
    policy: &'a TuningPolicy,
    train: &'a TrainConfig,
    data: &'a str,
}

pub(crate) fn run_digest(
    model: &EncoderModel,
    policy: &TuningPolicy,
    cfg: &TrainConfig,
    data: &str,
) -> String {
    config_digest(&DigestInput {
        model: model.config(),
        adapter: model.adapter_config(),
        num_classes: model.num_classes(),
        policy,
        train: cfg,
        data,
    })
}

/// Running mean of training losses since the last evaluation.
#[derive(Default)]
pub(crate) struct LossWindow {
    sum: f64,
    count: usize,
}

impl LossWindow {
    pub(crate) fn push(&mut self, loss: f64) {
        self.sum += loss;
        self.count += 1;
    }

    pub(crate) fn take(&mut self) -> Option<f64> {
        let out = (self.count > 0).then(|| self.sum / self.count as f64);
        *self = LossWindow::default();
        out
    }
}

/// Supervised training with seeded shuffling, a linear schedule and
/// dev-based checkpoint selection. On return the model holds the
/// parameters of the selected evaluation.
pub fn train(
    model: &mut EncoderModel,
    data: &TaskDataset,
    policy: &TuningPolicy,
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    let start = Instant::now();
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Empty("train split"));
    }
    if data.dev.is_empty() {
        return Err(Error::Empty("dev split"));
    }
    apply_tuning_policy(model, policy, Head::Classifier)?;
    let total = cfg.total_steps(data.train.len());
    let mut opt = OptimizerState::new(model.params(), AdamConfig::default());
    let mut shuffle_rng = stream(cfg.seed, "shuffle");
    let mut dropout_rng = stream(cfg.seed, "dropout");
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    let mut record = RunRecord {
        config_digest: run_digest(model, policy, cfg, &data.provenance),
        seed: cfg.seed,
        policy: policy.label().to_string(),
        evaluations: Vec::new(),
        selected: None,
        test_metric: None,
        total_steps: 0,
        warnings: Vec::new(),
        duration_secs: 0.0,
    };
    let mut best: Option<Vec<Tensor>> = None;
    let mut window = LossWindow::default();
    let mut step = 0;

    let evaluate_dev = |model: &EncoderModel,
                        record: &mut RunRecord,
                        step: usize,
                        epoch: usize,
                        window: &mut LossWindow|
     -> Result<Option<Vec<Tensor>>> {
        let dev = evaluate_split(model, &data.dev, cfg.metric)?;
        if dev.metric.value.is_nan() {
            return Err(Error::NanMetric(step));
        }
        if dev.metric.degenerate {
            record.warnings.push(format!(
                "step {step}: {:?} undefined on dev, reported as 0",
                cfg.metric
            ));
        }
        record.evaluations.push(EvalPoint {
            step,
            epoch,
            train_loss: window.take(),
            dev_metric: Some(dev.metric.value),
            dev_loss: Some(dev.loss),
        });
        let improved = record
            .selected
            .as_ref()
            .is_none_or(|s| dev.metric.value > s.dev_metric);
        if improved {
            record.selected = Some(Selection {
                step,
                epoch,
                dev_metric: dev.metric.value,
            });
            return Ok(Some(model.params().values()));
        }
        Ok(None)
    };

    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            if step == total {
                break 'epochs;
            }
            let examples: Vec<_> = chunk.iter().map(|&i| data.train[i].clone()).collect();
            let (batch, labels) = batch_of(&examples)?;
            model.params_mut().zero_grad();
            let mut tape = Tape::new();
            let loss = model.classification_loss(
                &mut tape,
                &batch,
                &labels,
                &mut Mode::Train(&mut dropout_rng),
            )?;
            window.push(tape.value(loss)?.data()[0]);
            tape.backward(loss, model.params_mut())?;
            let lr = lr_at(step, total, cfg)?;
            adam_step(model.params_mut(), &mut opt, lr)?;
            step += 1;
            if let EvalCadence::Steps(n) = cfg.eval_every {
                if step % n == 0 {
                    if let Some(snap) = evaluate_dev(model, &mut record, step, epoch, &mut window)?
                    {
                        best = Some(snap);
                    }
                }
            }
        }
        if cfg.eval_every == EvalCadence::Epoch {
            if let Some(snap) = evaluate_dev(model, &mut record, step, epoch, &mut window)? {
                best = Some(snap);
            }
        }
    }
    if record.evaluations.last().is_none_or(|e| e.step != step) {
        let epoch = step
            .div_ceil(data.train.len().div_ceil(cfg.batch_size))
            .max(1);
        if let Some(snap) = evaluate_dev(model, &mut record, step, epoch, &mut window)? {
            best = Some(snap);
        }
    }
    if let Some(snap) = best {
        model.params_mut().load_values(&snap)?;
    }
    record.total_steps = step;
    if !data.test.is_empty() {
        let test = evaluate_split(model, &data.test, cfg.metric)?;
        if test.metric.degenerate {
            record
                .warnings
                .push(format!("{:?} undefined on test, reported as 0", cfg.metric));
        }
        record.test_metric = Some(test.metric.value);
    }
    log::debug!("trained {} steps, selected {:?}", step, record.selected);
    record.duration_secs = start.elapsed().as_secs_f64();
    Ok(record)
}
