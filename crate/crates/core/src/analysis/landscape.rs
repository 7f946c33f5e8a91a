use super::ModelSnapshot;
use crate::data::LabeledExample;
use crate::model::EncoderModel;
use crate::tuning::mean_loss;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeCurve {
    pub alphas: Vec<f64>,
    pub losses: Vec<f64>,
}

impl LandscapeCurve {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.len() != self.losses.len() {
            return Err(Error::Invalid("alphas and losses differ in length".into()));
        }
        if self.alphas.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid("alphas must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// -2.0, -1.8, ..., 2.0; both 0 and 1 are exact grid points.
pub fn default_grid() -> Vec<f64> {
    (0..=20).map(|i| (i as f64 - 10.0) / 5.0).collect()
}

/// `theta0 + alpha * (theta1 - theta0)`, computed from the nearer endpoint
/// so that `alpha = 0` and `alpha = 1` reproduce the snapshots bit-exactly.
fn interpolate(theta0: &ModelSnapshot, theta1: &ModelSnapshot, alpha: f64) -> ModelSnapshot {
    let values = theta0
        .values
        .iter()
        .zip(&theta1.values)
        .map(|(&a, &b)| {
            let delta = b - a;
            if alpha <= 0.5 {
                a + alpha * delta
            } else {
                b + (alpha - 1.0) * delta
            }
        })
        .collect();
    ModelSnapshot {
        entries: theta0.entries.clone(),
        values,
    }
}

/// Eval-mode mean classification loss of `examples` along the line through
/// `theta0` and `theta1`. `model` is left holding `theta1`.
pub fn loss_landscape(
    model: &mut EncoderModel,
    theta1: &ModelSnapshot,
    theta0: &ModelSnapshot,
    examples: &[LabeledExample],
    grid: &[f64],
) -> Result<LandscapeCurve> {
    theta0.check_layout(theta1)?;
    if grid.is_empty() {
        return Err(Error::Empty("landscape grid"));
    }
    let mut losses = Vec::with_capacity(grid.len());
    let mut outcome = Ok(());
    for &alpha in grid {
        let point = interpolate(theta0, theta1, alpha);
        let loss = point
            .scatter(model)
            .and_then(|_| mean_loss(model, examples));
        match loss {
            Ok(l) => losses.push(l),
            Err(e) => {
                outcome = Err(e);
                break;
            }
        }
    }
    theta1.scatter(model)?;
    outcome?;
    let curve = LandscapeCurve {
        alphas: grid.to_vec(),
        losses,
    };
    curve.validate()?;
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_21_points_with_exact_endpoints() {
        let g = default_grid();
        assert_eq!(g.len(), 21);
        assert_eq!(g[0], -2.0);
        assert_eq!(g[20], 2.0);
        assert_eq!(g[10], 0.0);
        assert_eq!(g[15], 1.0);
        assert!(g.windows(2).all(|w| (w[1] - w[0] - 0.2).abs() < 1e-12));
    }

    #[test]
    fn interpolation_hits_both_snapshots_exactly() {
        let entries = vec![super::super::SnapshotEntry {
            name: "w".into(),
            shape: vec![3],
            offset: 0,
            length: 3,
        }];
        let t0 = ModelSnapshot {
            entries: entries.clone(),
            values: vec![0.1, -0.7, 3.3],
        };
        let t1 = ModelSnapshot {
            entries,
            values: vec![0.3, 1.9, -2.2],
        };
        assert_eq!(interpolate(&t0, &t1, 0.0).values, t0.values);
        assert_eq!(interpolate(&t0, &t1, 1.0).values, t1.values);
        let mid = interpolate(&t0, &t1, 0.5).values;
        assert!((mid[1] - 0.6).abs() < 1e-12);
    }
}
