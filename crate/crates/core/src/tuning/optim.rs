use super::TrainConfig;
use crate::tensor::ParamStore;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the shared step count.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        OptimizerState {
            config,
            first: store.iter().map(|p| vec![0.0; p.len()]).collect(),
            second: store.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of every non-frozen parameter. Frozen
/// parameters and their moments are left untouched. Gradients are checked
/// for finiteness before anything is modified.
pub fn adam_step(store: &mut ParamStore, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if state.first.len() != store.len() {
        return Err(Error::Invalid(
            "optimizer state does not match the parameter store".into(),
        ));
    }
    for p in store.iter().filter(|p| !p.frozen) {
        if p.grad().data().iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name().to_string()));
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for ((p, m), v) in store
        .iter_mut()
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        if p.frozen {
            continue;
        }
        let (value, grad) = p.value_and_grad_mut();
        for k in 0..value.len() {
            let g = grad[k];
            m[k] = beta1 * m[k] + (1.0 - beta1) * g;
            v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            value[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: "adam_step" });
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `peak_lr` over `warmup_fraction · total_steps`,
/// then linear decay to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(Error::Invalid(format!(
            "step {step} beyond total {total_steps}"
        )));
    }
    let peak = cfg.peak_lr;
    let warmup = cfg.warmup_fraction * total_steps as f64;
    let s = step as f64;
    Ok(if s < warmup {
        peak * s / warmup
    } else {
        peak * (total_steps as f64 - s) / (total_steps as f64 - warmup)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Parameter, Tensor};

    fn store(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add(Parameter::new(
            "theta",
            Tensor::new(vec![vals.len()], vals.to_vec()).unwrap(),
        ))
        .unwrap();
        s
    }

    #[test]
    fn zero_gradients_leave_values_unchanged() {
        let mut s = store(&[0.5, -1.5]);
        let mut st = OptimizerState::new(&s, AdamConfig::default());
        adam_step(&mut s, &mut st, 0.1).unwrap();
        assert_eq!(
            s.get(crate::tensor::ParamId(0)).value().data(),
            &[0.5, -1.5]
        );
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g = 1, v_hat = g^2 = 1, so theta -= 0.1 * 1 / (1 + 1e-8).
        let mut s = store(&[0.0]);
        s.get_mut(crate::tensor::ParamId(0))
            .accumulate_grad(&Tensor::scalar(1.0));
        let mut st = OptimizerState::new(&s, AdamConfig::default());
        adam_step(&mut s, &mut st, 0.1).unwrap();
        let theta = s.get(crate::tensor::ParamId(0)).value().data()[0];
        assert!((theta + 0.1).abs() < 1e-8, "{theta}");
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn frozen_parameters_are_bit_identical() {
        let mut s = store(&[0.25, 3.0]);
        let id = crate::tensor::ParamId(0);
        s.get_mut(id).frozen = true;
        s.get_mut(id)
            .accumulate_grad(&Tensor::new(vec![2], vec![5.0, -2.0]).unwrap());
        let before = s.get(id).value().clone();
        let mut st = OptimizerState::new(&s, AdamConfig::default());
        for _ in 0..10 {
            adam_step(&mut s, &mut st, 0.5).unwrap();
        }
        assert!(s.get(id).value().bit_eq(&before));
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = store(&[0.0]);
        s.get_mut(crate::tensor::ParamId(0))
            .accumulate_grad(&Tensor::from_parts(vec![1], vec![f64::NAN]));
        let mut st = OptimizerState::new(&s, AdamConfig::default());
        let err = adam_step(&mut s, &mut st, 0.1).unwrap_err();
        assert!(err.to_string().contains("theta"));
    }

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig {
            peak_lr: 1e-4,
            warmup_fraction: 0.1,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, 1000, &cfg).unwrap(), 0.0);
        assert!((lr_at(100, 1000, &cfg).unwrap() - 1e-4).abs() < 1e-18);
        assert!((lr_at(550, 1000, &cfg).unwrap() - 5e-5).abs() < 1e-18);
        assert_eq!(lr_at(1000, 1000, &cfg).unwrap(), 0.0);
        assert!(lr_at(0, 0, &cfg).is_err());
        let max = (0..=1000)
            .map(|s| lr_at(s, 1000, &cfg).unwrap())
            .fold(0.0, f64::max);
        assert!((max - 1e-4).abs() < 1e-18);
    }
}
