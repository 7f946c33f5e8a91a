use crate::data::TaskDataset;
use crate::model::EncoderModel;
use crate::tuning::{train, TrainConfig, TuningPolicy};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

pub const DEFAULT_SWEEP_LRS: [f64; 5] = [2e-5, 4e-5, 6e-5, 8e-5, 1e-4];

/// Everything a sweep cell needs besides its learning rate and seed.
/// Each cell derives a model from `base` (inheriting its backbone) with
/// the policy's adapters and fresh seeded adapter and head weights.
pub struct SweepSpec<'a> {
    pub base: &'a EncoderModel,
    pub data: &'a TaskDataset,
    pub policy: &'a TuningPolicy,
    pub train: &'a TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub lr: f64,
    pub seed: u64,
    /// Test metric of the selected checkpoint; 0 for failed runs.
    pub metric: f64,
    pub failed: bool,
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Quartiles {
    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub per_lr: Vec<(f64, Quartiles)>,
    /// Summary over every cell.
    pub pooled: Quartiles,
}

/// Quartiles with linear interpolation between order statistics.
pub fn quartiles(values: &[f64]) -> Result<Quartiles> {
    if values.is_empty() {
        return Err(Error::Empty("quartile input"));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Invalid("quartile input contains NaN".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = p * (v.len() - 1) as f64;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        v[lo] + (h - lo as f64) * (v[hi] - v[lo])
    };
    Ok(Quartiles {
        min: v[0],
        q1: q(0.25),
        median: q(0.5),
        q3: q(0.75),
        max: v[v.len() - 1],
    })
}

fn run_cell(spec: &SweepSpec<'_>, lr: f64, seed: u64) -> Result<f64> {
    let mut model = spec.base.derive(
        spec.policy.adapter_config().cloned(),
        spec.data.num_classes(),
        seed,
    )?;
    let cfg = TrainConfig {
        peak_lr: lr,
        seed,
        ..spec.train.clone()
    };
    let record = train(&mut model, spec.data, spec.policy, &cfg)?;
    record.test_metric.ok_or(Error::Empty("test split"))
}

/// Trains one model per `(lr, seed)` cell. A run that fails, for instance
/// by diverging to non-finite values, is kept with metric 0.
pub fn lr_sweep(spec: &SweepSpec<'_>, lrs: &[f64], seeds: &[u64]) -> Result<SweepResult> {
    if lrs.is_empty() || seeds.is_empty() {
        return Err(Error::Empty("sweep grid"));
    }
    let mut cells = Vec::with_capacity(lrs.len() * seeds.len());
    for &lr in lrs {
        for &seed in seeds {
            let cell = match run_cell(spec, lr, seed) {
                Ok(metric) => SweepCell {
                    lr,
                    seed,
                    metric,
                    failed: false,
                    error: None,
                },
                Err(e) => {
                    log::warn!("sweep cell lr={lr} seed={seed} failed: {e}");
                    SweepCell {
                        lr,
                        seed,
                        metric: 0.0,
                        failed: true,
                        error: Some(e.to_string()),
                    }
                }
            };
            cells.push(cell);
        }
    }
    let per_lr = lrs
        .iter()
        .map(|&lr| {
            let vals: Vec<f64> = cells
                .iter()
                .filter(|c| c.lr == lr)
                .map(|c| c.metric)
                .collect();
            Ok((lr, quartiles(&vals)?))
        })
        .collect::<Result<_>>()?;
    let pooled = quartiles(&cells.iter().map(|c| c.metric).collect::<Vec<_>>())?;
    Ok(SweepResult {
        cells,
        per_lr,
        pooled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quartiles_hand_example() {
        let q = quartiles(&[5.0, 1.0, 4.0, 2.0, 3.0]).unwrap();
        assert_eq!(
            (q.min, q.q1, q.median, q.q3, q.max),
            (1.0, 2.0, 3.0, 4.0, 5.0)
        );
        assert_eq!(q.iqr(), 2.0);
    }

    #[test]
    fn quartiles_interpolate() {
        let q = quartiles(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((q.q1, q.median, q.q3), (1.75, 2.5, 3.25));
        let one = quartiles(&[0.7]).unwrap();
        assert_eq!(one.iqr(), 0.0);
        assert!(quartiles(&[]).is_err());
    }
}
