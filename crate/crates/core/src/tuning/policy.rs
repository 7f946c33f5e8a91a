use crate::model::AdapterConfig;
use crate::tensor::{tape::mixout_values, Tensor};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyBase {
    FullFineTune,
    AdapterTuning(AdapterConfig),
}

fn default_true() -> bool {
    true
}

/// Mixout with replacement probability `p`. With `compensate` the mixed
/// weight is rescaled so its expectation equals the tuned weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixoutConfig {
    pub p: f64,
    #[serde(default = "default_true")]
    pub compensate: bool,
}

impl MixoutConfig {
    pub fn new(p: f64) -> Result<Self> {
        let cfg = MixoutConfig {
            p,
            compensate: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.p) {
            return Err(Error::Config(format!(
                "mixout probability must be in [0, 1), got {}",
                self.p
            )));
        }
        Ok(())
    }

    /// Factor applied to `w - w0` for kept neurons.
    pub fn scale(&self) -> f64 {
        if self.compensate {
            1.0 / (1.0 - self.p)
        } else {
            1.0
        }
    }

    /// Effective `out x in` weight: columns of masked input neurons are
    /// taken from `w0`, then `(W_mix - p·W0) / (1 - p)` is applied.
    /// `p == 0` disables Mixout and returns `w` regardless of the mask.
    pub fn effective_weight(&self, w: &Tensor, w0: &Tensor, mask: &[bool]) -> Result<Tensor> {
        self.validate()?;
        if w.shape() != w0.shape() || w.shape().len() != 2 || mask.len() != w.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "mixout",
                lhs: w.shape().to_vec(),
                rhs: w0.shape().to_vec(),
            });
        }
        if self.p == 0.0 {
            return Ok(w.clone());
        }
        let cols = w.shape()[1];
        let data = mixout_values(w.data(), w0.data(), cols, |_, j| mask[j], self.scale());
        Tensor::new(w.shape().to_vec(), data)
    }
}

/// Compensated Mixout of an `out x in` weight with a per-input-neuron mask.
pub fn mixout_effective_weight(w: &Tensor, w0: &Tensor, p: f64, mask: &[bool]) -> Result<Tensor> {
    MixoutConfig::new(p)?.effective_weight(w, w0, mask)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningPolicy {
    pub base: PolicyBase,
    pub mixout: Option<MixoutConfig>,
}

impl TuningPolicy {
    pub fn full_fine_tune() -> Self {
        TuningPolicy {
            base: PolicyBase::FullFineTune,
            mixout: None,
        }
    }

    pub fn adapter(cfg: AdapterConfig) -> Self {
        TuningPolicy {
            base: PolicyBase::AdapterTuning(cfg),
            mixout: None,
        }
    }

    pub fn with_mixout(mut self, mixout: MixoutConfig) -> Self {
        self.mixout = Some(mixout);
        self
    }

    pub fn adapter_config(&self) -> Option<&AdapterConfig> {
        match &self.base {
            PolicyBase::AdapterTuning(a) => Some(a),
            PolicyBase::FullFineTune => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(m) = &self.mixout {
            m.validate()?;
        }
        Ok(())
    }

    /// `finetune`, `adapter`, `finetune-mixout` or `adapter-mixout`.
    pub fn label(&self) -> &'static str {
        match (&self.base, self.mixout.is_some()) {
            (PolicyBase::FullFineTune, false) => "finetune",
            (PolicyBase::FullFineTune, true) => "finetune-mixout",
            (PolicyBase::AdapterTuning(_), false) => "adapter",
            (PolicyBase::AdapterTuning(_), true) => "adapter-mixout",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mat(r: usize, c: usize, f: impl Fn(usize) -> f64) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(f).collect()).unwrap()
    }

    #[test]
    fn zero_probability_is_identity() {
        let w = mat(2, 3, |i| i as f64 * 0.3 - 0.4);
        let w0 = mat(2, 3, |i| (i as f64).sin());
        for mask in [[false; 3], [true, false, true], [true; 3]] {
            assert!(mixout_effective_weight(&w, &w0, 0.0, &mask)
                .unwrap()
                .bit_eq(&w));
        }
    }

    #[test]
    fn probability_one_rejected() {
        let w = mat(2, 2, |_| 1.0);
        assert!(mixout_effective_weight(&w, &w, 1.0, &[false, false]).is_err());
        assert!(MixoutConfig::new(1.5).is_err());
        assert!(MixoutConfig::new(-0.1).is_err());
    }

    #[test]
    fn masked_columns_take_anchor_and_kept_columns_are_rescaled() {
        let w = mat(2, 2, |i| [1.0, 2.0, 3.0, 4.0][i]);
        let w0 = mat(2, 2, |_| 0.0);
        let out = mixout_effective_weight(&w, &w0, 0.5, &[true, false]).unwrap();
        assert_eq!(out.data(), &[0.0, 4.0, 0.0, 8.0]);
        let plain = MixoutConfig {
            p: 0.5,
            compensate: false,
        };
        let out = plain.effective_weight(&w, &w0, &[true, false]).unwrap();
        assert_eq!(out.data(), &[0.0, 2.0, 0.0, 4.0]);
    }

    #[test]
    fn expectation_matches_tuned_weight() {
        // Exhaustive over the 2^3 masks of a 1x3 weight.
        let w = mat(1, 3, |i| [0.7, -1.2, 2.5][i]);
        let w0 = mat(1, 3, |i| [0.1, 0.4, -0.3][i]);
        let p = 0.3;
        let mut expected = [0.0; 3];
        for bits in 0..8u32 {
            let mask: Vec<bool> = (0..3).map(|j| bits >> j & 1 == 1).collect();
            let prob: f64 = mask.iter().map(|&m| if m { p } else { 1.0 - p }).product();
            let eff = mixout_effective_weight(&w, &w0, p, &mask).unwrap();
            for j in 0..3 {
                expected[j] += prob * eff.data()[j];
            }
        }
        for j in 0..3 {
            assert!((expected[j] - w.data()[j]).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn anchor_is_a_fixed_point(
            vals in proptest::collection::vec(-10.0f64..10.0, 12),
            mask in proptest::collection::vec(any::<bool>(), 4),
            p in 0.0f64..0.999,
        ) {
            let w0 = Tensor::new(vec![3, 4], vals).unwrap();
            let eff = mixout_effective_weight(&w0, &w0, p, &mask).unwrap();
            prop_assert!(eff.bit_eq(&w0));
        }
    }
}
