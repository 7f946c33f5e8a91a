//! Post-norm transformer encoder with optional bottleneck adapters.
//!
//! Per layer the computation is
//!
//! ```text
//! a  = dropout(attention(x));   a  = adapter_attn(a)   (if enabled)
//! x  = norm(x + a)
//! f  = dropout(ffn(x));         f  = adapter_ffn(f)    (if enabled)
//! x  = norm(x + f)
//! ```
//!
//! Linear weights are stored `[in, out]` so a layer is `x · W + b`.

mod accounting;
mod adapter;
mod partition;

pub use accounting::{
    adapter_param_count, closed_form_param_count, count_parameters, ParamCount, ParamFilter,
};
pub use adapter::{adapter_forward, AdapterWeights};
pub use partition::{apply_tuning_policy, Head, Partition};

use crate::data::{MaskedBatch, PAD_ID};
use crate::rng::{stream, Rng};
use crate::tensor::{HasParams, ParamId, ParamStore, Parameter, Tape, Tensor, Var};
use crate::tuning::MixoutConfig;
use crate::{Error, Result};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const LAYER_NORM_EPS: f64 = 1e-12;
const BACKBONE_INIT_STD: f64 = 0.02;
const ADAPTER_INIT_STD: f64 = 1e-3;
const MASK_FILL: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub hidden_size: usize,
    #[serde(default = "default_true")]
    pub insert_after_attention: bool,
    #[serde(default = "default_true")]
    pub insert_after_ffn: bool,
}

impl AdapterConfig {
    pub fn new(hidden_size: usize) -> Self {
        AdapterConfig {
            hidden_size,
            insert_after_attention: true,
            insert_after_ffn: true,
        }
    }

    pub fn validate(&self, model_dim: usize) -> Result<()> {
        if self.hidden_size == 0 || self.hidden_size >= model_dim {
            return Err(Error::Config(format!(
                "adapter hidden size must satisfy 0 < m < d, got m={} d={model_dim}",
                self.hidden_size
            )));
        }
        Ok(())
    }

    pub fn sites_per_layer(&self) -> usize {
        usize::from(self.insert_after_attention) + usize::from(self.insert_after_ffn)
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamRole {
    Embedding,
    Attention,
    FeedForward,
    Adapter,
    Norm,
    ClassifierHead,
    MlmHead,
}

impl ParamRole {
    /// Pretrained weights that adapter tuning leaves untouched.
    pub fn is_backbone(self) -> bool {
        matches!(
            self,
            ParamRole::Embedding | ParamRole::Attention | ParamRole::FeedForward
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

/// Down-projection `f1` (d → m) and up-projection `f2` (m → d).
#[derive(Clone, Copy, Debug)]
pub struct AdapterLayer {
    pub down: Linear,
    pub up: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdapterSite {
    Attention,
    FeedForward,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    query: Linear,
    key: Linear,
    value: Linear,
    attn_out: Linear,
    attn_adapter: Option<AdapterLayer>,
    attn_norm: Norm,
    ffn_in: Linear,
    ffn_out: Linear,
    ffn_adapter: Option<AdapterLayer>,
    ffn_norm: Norm,
}

/// Dropout, Mixout and other stochastic behaviour only happen in `Train`.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

/// Padded `batch x seq` token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    /// Right-pads every sequence with `[PAD]` to the longest length.
    pub fn pad<S: AsRef<[u32]>>(seqs: &[S]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let seq = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        if seq == 0 {
            return Err(Error::Empty("sequence"));
        }
        let mut ids = Vec::with_capacity(seqs.len() * seq);
        for s in seqs {
            ids.extend_from_slice(s.as_ref());
            ids.extend(std::iter::repeat_n(PAD_ID, seq - s.as_ref().len()));
        }
        Ok(TokenBatch {
            ids,
            batch: seqs.len(),
            seq,
        })
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }

    fn has_padding(&self) -> bool {
        self.ids.contains(&PAD_ID)
    }
}

/// Hidden states from a forward pass: element 0 is the embedding output,
/// element `i` the output of layer `i`. Each tensor is `batch x seq x d`.
#[derive(Clone, Debug)]
pub struct EncoderOutputs {
    pub hidden: Vec<Tensor>,
    pub pooled: Tensor,
}

/// Tape variables of a forward pass, each `[batch * seq, d]`.
#[derive(Clone, Debug)]
pub struct EncodedVars {
    pub hidden: Vec<Var>,
    pub batch: usize,
    pub seq: usize,
}

impl EncodedVars {
    pub fn last(&self) -> Var {
        *self.hidden.last().expect("at least the embedding output")
    }
}

#[derive(Clone, Debug)]
pub struct EncoderModel {
    config: TransformerConfig,
    adapter: Option<AdapterConfig>,
    num_classes: usize,
    store: ParamStore,
    roles: Vec<ParamRole>,
    token_embedding: ParamId,
    position_embedding: ParamId,
    layers: Vec<EncoderLayer>,
    classifier: Linear,
    mlm_head: Linear,
    mixout: Option<MixoutConfig>,
}

impl HasParams for EncoderModel {
    fn params(&self) -> &ParamStore {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

struct Builder {
    store: ParamStore,
    roles: Vec<ParamRole>,
    backbone: Rng,
    adapters: Rng,
    heads: Rng,
}

enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Clone, Copy)]
enum Stream {
    Backbone,
    Adapter,
    Head,
}

impl Builder {
    fn tensor(&mut self, shape: &[usize], init: Init, stream: Stream) -> Tensor {
        match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::Normal(std) => {
                let rng = match stream {
                    Stream::Backbone => &mut self.backbone,
                    Stream::Adapter => &mut self.adapters,
                    Stream::Head => &mut self.heads,
                };
                let normal = Normal::new(0.0, std).expect("positive std");
                let n = shape.iter().product();
                let data = (0..n).map(|_| normal.sample(rng)).collect();
                Tensor::from_parts(shape.to_vec(), data)
            }
        }
    }

    fn param(
        &mut self,
        name: String,
        shape: &[usize],
        init: Init,
        stream: Stream,
        role: ParamRole,
    ) -> Result<ParamId> {
        let t = self.tensor(shape, init, stream);
        self.roles.push(role);
        self.store.add(Parameter::new(name, t))
    }

    fn linear(
        &mut self,
        prefix: &str,
        n_in: usize,
        n_out: usize,
        w_init: Init,
        stream: Stream,
        role: ParamRole,
    ) -> Result<Linear> {
        Ok(Linear {
            weight: self.param(
                format!("{prefix}.weight"),
                &[n_in, n_out],
                w_init,
                stream,
                role,
            )?,
            bias: self.param(
                format!("{prefix}.bias"),
                &[n_out],
                Init::Zeros,
                stream,
                role,
            )?,
        })
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<Norm> {
        Ok(Norm {
            gain: self.param(
                format!("{prefix}.gain"),
                &[d],
                Init::Ones,
                Stream::Backbone,
                ParamRole::Norm,
            )?,
            bias: self.param(
                format!("{prefix}.bias"),
                &[d],
                Init::Zeros,
                Stream::Backbone,
                ParamRole::Norm,
            )?,
        })
    }

    fn adapter(&mut self, prefix: &str, d: usize, m: usize) -> Result<AdapterLayer> {
        Ok(AdapterLayer {
            down: self.linear(
                &format!("{prefix}.down"),
                d,
                m,
                Init::Normal(ADAPTER_INIT_STD),
                Stream::Adapter,
                ParamRole::Adapter,
            )?,
            up: self.linear(
                &format!("{prefix}.up"),
                m,
                d,
                Init::Zeros,
                Stream::Adapter,
                ParamRole::Adapter,
            )?,
        })
    }
}

impl EncoderModel {
    /// Builds a freshly initialised model. Backbone, adapter and head
    /// weights come from independent streams, so two models with the same
    /// seed share backbone weights whether or not they carry adapters.
    pub fn new(
        config: TransformerConfig,
        adapter: Option<AdapterConfig>,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if let Some(a) = &adapter {
            a.validate(config.model_dim)?;
        }
        if num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        let d = config.model_dim;
        let mut b = Builder {
            store: ParamStore::new(),
            roles: Vec::new(),
            backbone: stream(seed, "init-backbone"),
            adapters: stream(seed, "init-adapter"),
            heads: stream(seed, "init-head"),
        };
        let std = Init::Normal(BACKBONE_INIT_STD);
        let token_embedding = b.param(
            "embeddings.token.weight".into(),
            &[config.vocab_size, d],
            std,
            Stream::Backbone,
            ParamRole::Embedding,
        )?;
        let position_embedding = b.param(
            "embeddings.position.weight".into(),
            &[config.max_seq_len, d],
            Init::Normal(BACKBONE_INIT_STD),
            Stream::Backbone,
            ParamRole::Embedding,
        )?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let p = format!("layer.{i}");
            let attn = |b: &mut Builder, name: &str| {
                b.linear(
                    &format!("{p}.attention.{name}"),
                    d,
                    d,
                    Init::Normal(BACKBONE_INIT_STD),
                    Stream::Backbone,
                    ParamRole::Attention,
                )
            };
            let query = attn(&mut b, "query")?;
            let key = attn(&mut b, "key")?;
            let value = attn(&mut b, "value")?;
            let attn_out = attn(&mut b, "output")?;
            let attn_adapter = match &adapter {
                Some(a) if a.insert_after_attention => {
                    Some(b.adapter(&format!("{p}.adapter_attn"), d, a.hidden_size)?)
                }
                _ => None,
            };
            let attn_norm = b.norm(&format!("{p}.attn_norm"), d)?;
            let ffn_in = b.linear(
                &format!("{p}.ffn.in"),
                d,
                config.ffn_dim,
                Init::Normal(BACKBONE_INIT_STD),
                Stream::Backbone,
                ParamRole::FeedForward,
            )?;
            let ffn_out = b.linear(
                &format!("{p}.ffn.out"),
                config.ffn_dim,
                d,
                Init::Normal(BACKBONE_INIT_STD),
                Stream::Backbone,
                ParamRole::FeedForward,
            )?;
            let ffn_adapter = match &adapter {
                Some(a) if a.insert_after_ffn => {
                    Some(b.adapter(&format!("{p}.adapter_ffn"), d, a.hidden_size)?)
                }
                _ => None,
            };
            let ffn_norm = b.norm(&format!("{p}.ffn_norm"), d)?;
            layers.push(EncoderLayer {
                query,
                key,
                value,
                attn_out,
                attn_adapter,
                attn_norm,
                ffn_in,
                ffn_out,
                ffn_adapter,
                ffn_norm,
            });
        }
        let classifier = b.linear(
            "head.classifier",
            d,
            num_classes,
            Init::Normal(BACKBONE_INIT_STD),
            Stream::Head,
            ParamRole::ClassifierHead,
        )?;
        let mlm_head = b.linear(
            "head.mlm",
            d,
            config.vocab_size,
            Init::Normal(BACKBONE_INIT_STD),
            Stream::Head,
            ParamRole::MlmHead,
        )?;
        Ok(EncoderModel {
            config,
            adapter,
            num_classes,
            store: b.store,
            roles: b.roles,
            token_embedding,
            position_embedding,
            layers,
            classifier,
            mlm_head,
            mixout: None,
        })
    }

    /// Builds a new model that inherits every weight of `self` whose name
    /// and shape match. New parameters (adapters, a resized classifier) are
    /// freshly initialised from `seed`. Every inherited value becomes the
    /// new model's initial snapshot.
    pub fn derive(
        &self,
        adapter: Option<AdapterConfig>,
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut fresh = EncoderModel::new(self.config.clone(), adapter, num_classes, seed)?;
        for p in fresh.store.iter_mut() {
            if let Some(src) = self.store.by_name(p.name()) {
                if src.value().shape() == p.value().shape() {
                    *p = Parameter::new(p.name().to_string(), src.value().clone());
                }
            }
        }
        Ok(fresh)
    }

    /// Reassembles a model from stored parameters, e.g. a checkpoint.
    /// Names, order and shapes must match the architecture exactly.
    pub fn from_parameters(
        config: TransformerConfig,
        adapter: Option<AdapterConfig>,
        num_classes: usize,
        params: Vec<Parameter>,
    ) -> Result<Self> {
        let mut model = EncoderModel::new(config, adapter, num_classes, 0)?;
        model.replace_parameters(params)?;
        Ok(model)
    }

    /// Swaps in externally stored parameters after validating names and
    /// shapes against this architecture.
    pub fn replace_parameters(&mut self, params: Vec<Parameter>) -> Result<()> {
        if params.len() != self.store.len() {
            let found = |i: usize| params.get(i).map_or("nothing", |p| p.name());
            let first = self
                .store
                .iter()
                .enumerate()
                .find(|&(i, a)| a.name() != found(i))
                .map(|(i, a)| format!("{} (found {})", a.name(), found(i)))
                .unwrap_or_else(|| format!("unexpected {}", params[self.store.len()].name()));
            return Err(Error::Config(format!(
                "parameter count mismatch ({} stored vs {} expected), first mismatching parameter {first}",
                params.len(),
                self.store.len()
            )));
        }
        for (mine, theirs) in self.store.iter().zip(&params) {
            if mine.name() != theirs.name() || mine.value().shape() != theirs.value().shape() {
                return Err(Error::Config(format!(
                    "mismatching parameter {} (expected {} {:?}, found {} {:?})",
                    mine.name(),
                    mine.name(),
                    mine.value().shape(),
                    theirs.name(),
                    theirs.value().shape()
                )));
            }
        }
        for (slot, p) in self.store.iter_mut().zip(params) {
            *slot = p;
        }
        Ok(())
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn adapter_config(&self) -> Option<&AdapterConfig> {
        self.adapter.as_ref()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn has_adapters(&self) -> bool {
        self.adapter.is_some()
    }

    pub fn role(&self, id: ParamId) -> ParamRole {
        self.roles[id.0]
    }

    pub fn roles(&self) -> &[ParamRole] {
        &self.roles
    }

    pub fn mixout(&self) -> Option<&MixoutConfig> {
        self.mixout.as_ref()
    }

    pub fn set_mixout(&mut self, mixout: Option<MixoutConfig>) {
        self.mixout = mixout;
    }

    /// True when every backbone weight still equals its initial snapshot.
    pub fn backbone_intact(&self) -> bool {
        self.store
            .iter()
            .zip(&self.roles)
            .filter(|(_, r)| r.is_backbone())
            .all(|(p, _)| p.matches_initial())
    }

    /// True when every frozen parameter still equals its initial snapshot.
    pub fn frozen_intact(&self) -> bool {
        self.store
            .iter()
            .filter(|p| p.frozen)
            .all(Parameter::matches_initial)
    }

    pub fn adapter_layer(&self, layer: usize, site: AdapterSite) -> Option<AdapterLayer> {
        let l = self.layers.get(layer)?;
        match site {
            AdapterSite::Attention => l.attn_adapter,
            AdapterSite::FeedForward => l.ffn_adapter,
        }
    }

    /// Copies an adapter's current weights out of the store.
    pub fn adapter_weights(&self, layer: usize, site: AdapterSite) -> Option<AdapterWeights> {
        let a = self.adapter_layer(layer, site)?;
        let v = |id| self.store.get(id).value().clone();
        Some(AdapterWeights {
            down_weight: v(a.down.weight),
            down_bias: v(a.down.bias),
            up_weight: v(a.up.weight),
            up_bias: v(a.up.bias),
        })
    }

    fn check_tokens(&self, batch: &TokenBatch) -> Result<()> {
        if batch.seq > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: batch.seq,
                max: self.config.max_seq_len,
            });
        }
        let v = self.config.vocab_size;
        if let Some(pos) = batch.ids.iter().position(|&id| id as usize >= v) {
            return Err(Error::TokenOutOfRange {
                id: batch.ids[pos],
                example: pos / batch.seq,
                position: pos % batch.seq,
                vocab_size: v,
            });
        }
        Ok(())
    }

    pub(crate) fn linear(
        &self,
        tape: &mut Tape,
        lin: &Linear,
        x: Var,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let mut w = tape.param(&self.store, lin.weight);
        if let (Mode::Train(rng), Some(mx)) = (&mut *mode, &self.mixout) {
            let p = self.store.get(lin.weight);
            if !p.frozen && mx.p > 0.0 {
                let rows = p.value().shape()[0];
                let masked: Vec<bool> = (0..rows).map(|_| rng.random::<f64>() < mx.p).collect();
                w = tape.mixout(w, p.initial(), &masked, mx.scale())?;
            }
        }
        let b = tape.param(&self.store, lin.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }

    fn dropout(&self, tape: &mut Tape, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let rate = self.config.dropout_rate;
        // Mixout replaces the dropout modules when it is active.
        if self.mixout.is_some() || rate == 0.0 {
            return Ok(x);
        }
        let Mode::Train(rng) = mode else { return Ok(x) };
        let shape = tape.value(x)?.shape().to_vec();
        let keep = 1.0 / (1.0 - rate);
        let n = shape.iter().product();
        let mask = (0..n)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let m = tape.constant(Tensor::from_parts(shape, mask));
        tape.mul(x, m)
    }

    pub(crate) fn adapter_on_tape(
        &self,
        tape: &mut Tape,
        a: &AdapterLayer,
        h: Var,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let down = self.linear(tape, &a.down, h, mode)?;
        let act = tape.tanh(down)?;
        let up = self.linear(tape, &a.up, act, mode)?;
        tape.add(up, h)
    }

    fn norm(&self, tape: &mut Tape, n: &Norm, x: Var) -> Result<Var> {
        let g = tape.param(&self.store, n.gain);
        let b = tape.param(&self.store, n.bias);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape,
        l: &EncoderLayer,
        x: Var,
        mask: Option<Var>,
        bsz: usize,
        seq: usize,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let h = self.config.num_heads;
        let dh = self.config.head_dim();
        let split = |tape: &mut Tape, lin: &Linear, mode: &mut Mode<'_>| -> Result<Var> {
            let y = self.linear(tape, lin, x, mode)?;
            let y = tape.reshape(y, &[bsz, seq, h, dh])?;
            let y = tape.permute(y, &[0, 2, 1, 3])?;
            tape.reshape(y, &[bsz * h, seq, dh])
        };
        let q = split(tape, &l.query, mode)?;
        let k = split(tape, &l.key, mode)?;
        let v = split(tape, &l.value, mode)?;
        let scores = tape.batch_matmul(q, k, true)?;
        let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        if let Some(m) = mask {
            scores = tape.add(scores, m)?;
        }
        let probs = tape.softmax(scores)?;
        let ctx = tape.batch_matmul(probs, v, false)?;
        let ctx = tape.reshape(ctx, &[bsz, h, seq, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[bsz * seq, self.config.model_dim])?;
        self.linear(tape, &l.attn_out, ctx, mode)
    }

    /// Records the encoder on `tape` and returns per-layer hidden states.
    pub fn encode(
        &self,
        tape: &mut Tape,
        batch: &TokenBatch,
        mode: &mut Mode<'_>,
    ) -> Result<EncodedVars> {
        self.check_tokens(batch)?;
        let (bsz, seq) = (batch.batch, batch.seq);
        let tok_table = tape.param(&self.store, self.token_embedding);
        let pos_table = tape.param(&self.store, self.position_embedding);
        let tok_rows: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        let pos_rows: Vec<usize> = (0..bsz).flat_map(|_| 0..seq).collect();
        let tok = tape.gather_rows(tok_table, &tok_rows)?;
        let pos = tape.gather_rows(pos_table, &pos_rows)?;
        let emb = tape.add(tok, pos)?;
        let mut x = self.dropout(tape, emb, mode)?;

        let mask = if batch.has_padding() {
            let h = self.config.num_heads;
            let mut m = vec![0.0; bsz * h * seq * seq];
            for b in 0..bsz {
                let row = batch.row(b);
                for head in 0..h {
                    let base = (b * h + head) * seq * seq;
                    for i in 0..seq {
                        for (j, &id) in row.iter().enumerate() {
                            if id == PAD_ID {
                                m[base + i * seq + j] = MASK_FILL;
                            }
                        }
                    }
                }
            }
            Some(tape.constant(Tensor::from_parts(vec![bsz * h, seq, seq], m)))
        } else {
            None
        };

        let mut hidden = Vec::with_capacity(self.layers.len() + 1);
        hidden.push(x);
        for l in &self.layers {
            let a = self.attention(tape, l, x, mask, bsz, seq, mode)?;
            let mut a = self.dropout(tape, a, mode)?;
            if let Some(ad) = &l.attn_adapter {
                a = self.adapter_on_tape(tape, ad, a, mode)?;
            }
            let res = tape.add(x, a)?;
            x = self.norm(tape, &l.attn_norm, res)?;

            let f = self.linear(tape, &l.ffn_in, x, mode)?;
            let f = tape.gelu(f)?;
            let f = self.linear(tape, &l.ffn_out, f, mode)?;
            let mut f = self.dropout(tape, f, mode)?;
            if let Some(ad) = &l.ffn_adapter {
                f = self.adapter_on_tape(tape, ad, f, mode)?;
            }
            let res = tape.add(x, f)?;
            x = self.norm(tape, &l.ffn_norm, res)?;
            hidden.push(x);
        }
        Ok(EncodedVars {
            hidden,
            batch: bsz,
            seq,
        })
    }

    /// Classification logits `[batch, num_classes]` from the final-layer
    /// first-token representation.
    pub fn classify(
        &self,
        tape: &mut Tape,
        batch: &TokenBatch,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let enc = self.encode(tape, batch, mode)?;
        let first: Vec<usize> = (0..enc.batch).map(|b| b * enc.seq).collect();
        let pooled = tape.gather_rows(enc.last(), &first)?;
        self.linear(tape, &self.classifier, pooled, mode)
    }

    pub fn classification_loss(
        &self,
        tape: &mut Tape,
        batch: &TokenBatch,
        labels: &[usize],
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let logits = self.classify(tape, batch, mode)?;
        tape.cross_entropy(logits, labels)
    }

    /// Mean cross-entropy over masked positions, or `None` when the batch
    /// has no targets.
    pub fn mlm_loss(
        &self,
        tape: &mut Tape,
        masked: &MaskedBatch,
        mode: &mut Mode<'_>,
    ) -> Result<Option<Var>> {
        if masked.targets.is_empty() {
            return Ok(None);
        }
        let enc = self.encode(tape, &masked.batch, mode)?;
        let rows: Vec<usize> = masked
            .targets
            .iter()
            .map(|t| t.row * enc.seq + t.position)
            .collect();
        let picked = tape.gather_rows(enc.last(), &rows)?;
        let logits = self.linear(tape, &self.mlm_head, picked, mode)?;
        let targets: Vec<usize> = masked.targets.iter().map(|t| t.original as usize).collect();
        tape.cross_entropy(logits, &targets).map(Some)
    }

    /// Eval-or-train forward returning plain tensors.
    pub fn encoder_forward(
        &self,
        batch: &TokenBatch,
        mode: &mut Mode<'_>,
    ) -> Result<EncoderOutputs> {
        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, batch, mode)?;
        let d = self.config.model_dim;
        let hidden = enc
            .hidden
            .iter()
            .map(|&v| tape.value(v)?.reshape(&[enc.batch, enc.seq, d]))
            .collect::<Result<Vec<_>>>()?;
        let last = tape.value(enc.last())?;
        let mut pooled = Vec::with_capacity(enc.batch * d);
        for b in 0..enc.batch {
            pooled.extend_from_slice(last.row(b * enc.seq));
        }
        Ok(EncoderOutputs {
            hidden,
            pooled: Tensor::from_parts(vec![enc.batch, d], pooled),
        })
    }

    /// Class predictions in eval mode.
    pub fn predict(&self, batch: &TokenBatch) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let logits = self.classify(&mut tape, batch, &mut Mode::Eval)?;
        let lv = tape.value(logits)?;
        Ok((0..lv.rows())
            .map(|r| {
                let row = lv.row(r);
                // First maximum wins ties.
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                        if v > best.1 {
                            (i, v)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect())
    }
}

#[cfg(test)]
mod tests;
