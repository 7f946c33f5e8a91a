use super::EVAL_BATCH;
use crate::data::LabeledExample;
use crate::model::{EncoderModel, Mode, TokenBatch};
use crate::tensor::Tape;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Accuracy,
    MacroF1,
    MicroF1,
    Mcc,
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(Metric::Accuracy),
            "macro_f1" => Ok(Metric::MacroF1),
            "micro_f1" => Ok(Metric::MicroF1),
            "mcc" => Ok(Metric::Mcc),
            other => Err(Error::Parse(format!("unknown metric {other}"))),
        }
    }
}

/// A metric value; `degenerate` marks an undefined metric reported as 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: f64,
    pub degenerate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEval {
    pub metric: MetricValue,
    pub loss: f64,
}

pub fn compute_metric(metric: Metric, gold: &[usize], pred: &[usize]) -> Result<MetricValue> {
    if gold.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    if gold.len() != pred.len() {
        return Err(Error::Invalid(format!(
            "{} gold labels but {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    let n = gold.len() as f64;
    let correct = gold.iter().zip(pred).filter(|(g, p)| g == p).count() as f64;
    let ok = |value: f64| MetricValue {
        value,
        degenerate: false,
    };
    Ok(match metric {
        // Single-label micro-F1 coincides with accuracy.
        Metric::Accuracy | Metric::MicroF1 => ok(correct / n),
        Metric::MacroF1 => {
            let classes: BTreeSet<usize> = gold.iter().chain(pred).copied().collect();
            let total: f64 = classes
                .iter()
                .map(|&c| {
                    let tp = gold
                        .iter()
                        .zip(pred)
                        .filter(|&(&g, &p)| g == c && p == c)
                        .count() as f64;
                    let fp = pred.iter().filter(|&&p| p == c).count() as f64 - tp;
                    let fn_ = gold.iter().filter(|&&g| g == c).count() as f64 - tp;
                    if tp == 0.0 {
                        0.0
                    } else {
                        2.0 * tp / (2.0 * tp + fp + fn_)
                    }
                })
                .sum();
            ok(total / classes.len() as f64)
        }
        Metric::Mcc => {
            let k = gold.iter().chain(pred).max().map_or(0, |m| m + 1);
            let mut t = vec![0.0; k];
            let mut p = vec![0.0; k];
            for (&g, &q) in gold.iter().zip(pred) {
                t[g] += 1.0;
                p[q] += 1.0;
            }
            let tp: f64 = t.iter().zip(&p).map(|(a, b)| a * b).sum();
            let num = correct * n - tp;
            let den = ((n * n - p.iter().map(|x| x * x).sum::<f64>())
                * (n * n - t.iter().map(|x| x * x).sum::<f64>()))
            .sqrt();
            if den == 0.0 {
                MetricValue {
                    value: 0.0,
                    degenerate: true,
                }
            } else {
                ok((num / den).clamp(-1.0, 1.0))
            }
        }
    })
}

pub(crate) fn batch_of(examples: &[LabeledExample]) -> Result<(TokenBatch, Vec<usize>)> {
    let seqs: Vec<&[u32]> = examples.iter().map(|e| e.ids.as_slice()).collect();
    Ok((
        TokenBatch::pad(&seqs)?,
        examples.iter().map(|e| e.label).collect(),
    ))
}

/// Eval-mode predictions and mean cross-entropy over `examples`.
fn predict_with_loss(
    model: &EncoderModel,
    examples: &[LabeledExample],
) -> Result<(Vec<usize>, f64)> {
    if examples.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let mut preds = Vec::with_capacity(examples.len());
    let mut loss_sum = 0.0;
    for chunk in examples.chunks(EVAL_BATCH) {
        let (batch, labels) = batch_of(chunk)?;
        let mut tape = Tape::new();
        let logits = model.classify(&mut tape, &batch, &mut Mode::Eval)?;
        let loss = tape.cross_entropy(logits, &labels)?;
        loss_sum += tape.value(loss)?.data()[0] * chunk.len() as f64;
        let lv = tape.value(logits)?;
        for r in 0..lv.rows() {
            let row = lv.row(r);
            let best = row
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |b, (i, &v)| if v > b.1 { (i, v) } else { b },
                )
                .0;
            preds.push(best);
        }
    }
    Ok((preds, loss_sum / examples.len() as f64))
}

pub fn evaluate(
    model: &EncoderModel,
    examples: &[LabeledExample],
    metric: Metric,
) -> Result<MetricValue> {
    Ok(evaluate_split(model, examples, metric)?.metric)
}

pub fn evaluate_split(
    model: &EncoderModel,
    examples: &[LabeledExample],
    metric: Metric,
) -> Result<SplitEval> {
    let (preds, loss) = predict_with_loss(model, examples)?;
    let gold: Vec<usize> = examples.iter().map(|e| e.label).collect();
    Ok(SplitEval {
        metric: compute_metric(metric, &gold, &preds)?,
        loss,
    })
}

/// Mean eval-mode classification loss over `examples`.
pub fn mean_loss(model: &EncoderModel, examples: &[LabeledExample]) -> Result<f64> {
    Ok(predict_with_loss(model, examples)?.1)
}
