//! Flat JSON run configuration. Every key is optional; missing keys take
//! the defaults below and command-line flags override file values.

use crate::error::{CliError, Result};
use adaptlab_core::analysis::{RSAConfig, DEFAULT_SWEEP_LRS};
use adaptlab_core::model::{AdapterConfig, TransformerConfig};
use adaptlab_core::tuning::{EvalCadence, Metric, MixoutConfig, TrainConfig, TuningPolicy};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyName {
    #[default]
    Finetune,
    Adapter,
    FinetuneMixout,
    AdapterMixout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Directory with `train.tsv`, `dev.tsv`, `test.tsv`.
    pub data: Option<PathBuf>,
    /// Unlabeled corpus for `tapt`, one document per line.
    pub corpus: Option<PathBuf>,
    /// Checkpoint directory to start from instead of a fresh model.
    pub init: Option<PathBuf>,

    pub policy: PolicyName,
    pub adapter_size: usize,
    pub mixout_p: f64,
    pub mixout_compensate: bool,

    /// Peak learning rate; 2e-5 for fine-tuning and 1e-4 for adapters when absent.
    pub lr: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    /// Evaluate every n steps instead of at each epoch end.
    pub eval_every_steps: Option<usize>,
    pub max_steps: Option<usize>,
    pub metric: Metric,

    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,

    pub min_freq: usize,
    /// Keep only this many training examples.
    pub subsample: Option<usize>,
    pub subsample_stratified: bool,

    pub rsa_sample_size: usize,
    pub sweep_lrs: Vec<f64>,
    pub sweep_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: None,
            corpus: None,
            init: None,
            policy: PolicyName::Finetune,
            adapter_size: 64,
            mixout_p: 0.9,
            mixout_compensate: true,
            lr: None,
            epochs: 20,
            batch_size: 16,
            warmup_fraction: 0.1,
            eval_every_steps: None,
            max_steps: None,
            metric: Metric::Accuracy,
            num_layers: 4,
            model_dim: 64,
            num_heads: 2,
            ffn_dim: 128,
            max_seq_len: 64,
            dropout_rate: 0.1,
            min_freq: 1,
            subsample: None,
            subsample_stratified: false,
            rsa_sample_size: 512,
            sweep_lrs: DEFAULT_SWEEP_LRS.to_vec(),
            sweep_seeds: (0..5).collect(),
        }
    }
}

impl RunConfig {
    /// Reads a config file. A missing or malformed file is a usage error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::rundir::write_json(path, self)
    }

    pub fn uses_adapters(&self) -> bool {
        matches!(self.policy, PolicyName::Adapter | PolicyName::AdapterMixout)
    }

    pub fn adapter(&self) -> Option<AdapterConfig> {
        self.uses_adapters()
            .then(|| AdapterConfig::new(self.adapter_size))
    }

    pub fn policy(&self) -> TuningPolicy {
        let base = match self.adapter() {
            Some(a) => TuningPolicy::adapter(a),
            None => TuningPolicy::full_fine_tune(),
        };
        match self.policy {
            PolicyName::FinetuneMixout | PolicyName::AdapterMixout => {
                base.with_mixout(MixoutConfig {
                    p: self.mixout_p,
                    compensate: self.mixout_compensate,
                })
            }
            _ => base,
        }
    }

    /// Fills in the policy-dependent learning rate.
    pub fn resolve(mut self) -> Self {
        if self.lr.is_none() {
            self.lr = Some(TrainConfig::for_policy(&self.policy()).peak_lr);
        }
        self
    }

    pub fn transformer(&self, vocab_size: usize) -> TransformerConfig {
        TransformerConfig {
            num_layers: self.num_layers,
            model_dim: self.model_dim,
            num_heads: self.num_heads,
            ffn_dim: self.ffn_dim,
            vocab_size,
            max_seq_len: self.max_seq_len,
            dropout_rate: self.dropout_rate,
        }
    }

    /// Copies architecture fields from an existing model so the resolved
    /// config describes what actually ran.
    pub fn adopt_architecture(&mut self, cfg: &TransformerConfig) {
        self.num_layers = cfg.num_layers;
        self.model_dim = cfg.model_dim;
        self.num_heads = cfg.num_heads;
        self.ffn_dim = cfg.ffn_dim;
        self.max_seq_len = cfg.max_seq_len;
        self.dropout_rate = cfg.dropout_rate;
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            peak_lr: self
                .lr
                .unwrap_or_else(|| TrainConfig::for_policy(&self.policy()).peak_lr),
            warmup_fraction: self.warmup_fraction,
            seed: self.seed,
            eval_every: self
                .eval_every_steps
                .map_or(EvalCadence::Epoch, EvalCadence::Steps),
            metric: self.metric,
            max_steps: self.max_steps,
        }
    }

    pub fn rsa_config(&self) -> RSAConfig {
        RSAConfig {
            sample_size: self.rsa_sample_size,
            seed: self.seed,
            ..RSAConfig::default()
        }
    }
}
