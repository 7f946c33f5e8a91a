use super::{AdapterConfig, EncoderModel, ParamRole, TransformerConfig};
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ParamFilter {
    All,
    Trainable,
    Adapters,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ParamCount {
    pub count: usize,
    pub total: usize,
    pub fraction: f64,
}

impl ParamCount {
    fn new(count: usize, total: usize) -> Self {
        ParamCount {
            count,
            total,
            fraction: count as f64 / total as f64,
        }
    }
}

pub fn count_parameters(model: &EncoderModel, filter: ParamFilter) -> ParamCount {
    let store = &model.store;
    let total = store.numel();
    let count = store
        .iter()
        .zip(&model.roles)
        .filter(|(p, role)| match filter {
            ParamFilter::All => true,
            ParamFilter::Trainable => !p.frozen,
            ParamFilter::Adapters => **role == ParamRole::Adapter,
        })
        .map(|(p, _)| p.len())
        .sum();
    ParamCount::new(count, total)
}

/// Adapter parameters added to an `num_layers`-layer encoder of width
/// `model_dim`: each adapter holds `d·m + m + m·d + d` values.
pub fn adapter_param_count(model_dim: usize, num_layers: usize, adapter: &AdapterConfig) -> usize {
    let (d, m) = (model_dim, adapter.hidden_size);
    num_layers * adapter.sites_per_layer() * (d * m + m + m * d + d)
}

/// Parameter count of the architecture [`EncoderModel::new`] would build,
/// without allocating it.
pub fn closed_form_param_count(
    config: &TransformerConfig,
    adapter: Option<&AdapterConfig>,
    num_classes: usize,
) -> usize {
    let d = config.model_dim;
    let f = config.ffn_dim;
    let v = config.vocab_size;
    let embeddings = v * d + config.max_seq_len * d;
    let attention = 4 * (d * d + d);
    let ffn = d * f + f + f * d + d;
    let norms = 2 * 2 * d;
    let layers = config.num_layers * (attention + ffn + norms);
    let adapters = adapter.map_or(0, |a| adapter_param_count(d, config.num_layers, a));
    let heads = (d * num_classes + num_classes) + (d * v + v);
    embeddings + layers + adapters + heads
}
