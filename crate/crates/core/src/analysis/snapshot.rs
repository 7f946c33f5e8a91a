use crate::tensor::{HasParams, Tensor};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

/// All parameter values of a model flattened into one vector, in parameter
/// store order (the order the model creates them in).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSnapshot {
    pub entries: Vec<SnapshotEntry>,
    pub values: Vec<f64>,
}

impl ModelSnapshot {
    fn build<M: HasParams>(model: &M, pick: impl Fn(&crate::tensor::Parameter) -> &Tensor) -> Self {
        let mut entries = Vec::new();
        let mut values = Vec::with_capacity(model.params().numel());
        for p in model.params().iter() {
            let t = pick(p);
            entries.push(SnapshotEntry {
                name: p.name().to_string(),
                shape: t.shape().to_vec(),
                offset: values.len(),
                length: t.len(),
            });
            values.extend_from_slice(t.data());
        }
        ModelSnapshot { entries, values }
    }

    /// Current parameter values.
    pub fn gather<M: HasParams>(model: &M) -> Self {
        Self::build(model, |p| p.value())
    }

    /// Values the model started from.
    pub fn initial<M: HasParams>(model: &M) -> Self {
        Self::build(model, |p| p.initial())
    }

    pub fn same_layout(&self, other: &ModelSnapshot) -> bool {
        self.entries == other.entries
    }

    pub fn check_layout(&self, other: &ModelSnapshot) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::SnapshotMismatch(format!(
                "{} vs {} parameters",
                self.entries.len(),
                other.entries.len()
            )));
        }
        if let Some((a, b)) = self
            .entries
            .iter()
            .zip(&other.entries)
            .find(|(a, b)| a != b)
        {
            return Err(Error::SnapshotMismatch(format!(
                "{} {:?} vs {} {:?}",
                a.name, a.shape, b.name, b.shape
            )));
        }
        Ok(())
    }

    /// Writes the values back into `model`, whose layout must match.
    pub fn scatter<M: HasParams>(&self, model: &mut M) -> Result<()> {
        self.check_layout(&ModelSnapshot::gather(model))?;
        for (p, e) in model.params_mut().iter_mut().zip(&self.entries) {
            p.set_value(&self.values[e.offset..e.offset + e.length])?;
        }
        Ok(())
    }

    pub fn slice(&self, entry: &SnapshotEntry) -> &[f64] {
        &self.values[entry.offset..entry.offset + entry.length]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AdapterConfig, EncoderModel, TransformerConfig};

    fn model(seed: u64) -> EncoderModel {
        let cfg = TransformerConfig {
            num_layers: 1,
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            vocab_size: 12,
            max_seq_len: 6,
            dropout_rate: 0.0,
        };
        EncoderModel::new(cfg, Some(AdapterConfig::new(2)), 2, seed).unwrap()
    }

    #[test]
    fn gather_scatter_round_trip() {
        let a = model(1);
        let snap = ModelSnapshot::gather(&a);
        let mut b = model(2);
        snap.scatter(&mut b).unwrap();
        for (p, q) in a.params().iter().zip(b.params().iter()) {
            assert!(p.value().bit_eq(q.value()));
        }
        assert_eq!(snap.values.len(), a.params().numel());
        let last = snap.entries.last().unwrap();
        assert_eq!(last.offset + last.length, snap.values.len());
    }

    #[test]
    fn layout_mismatch_is_an_error() {
        let snap = ModelSnapshot::gather(&model(1));
        let cfg = model(1).config().clone();
        let mut other = EncoderModel::new(cfg, None, 2, 0).unwrap();
        assert!(matches!(
            snap.scatter(&mut other),
            Err(Error::SnapshotMismatch(_))
        ));
    }
}
