//! One function per subcommand.

use crate::checkpoint::{load_checkpoint, load_vocab, save_checkpoint};
use crate::config::{PolicyName, RunConfig};
use crate::error::{CliError, Result};
use crate::rundir::{fmt_number, opt_number, write_csv, write_json, RunDirectory};
use adaptlab_core::analysis::{
    default_grid, loss_landscape, lr_sweep, representations_at, rsa_layers, sample_tokens,
    ModelSnapshot, SweepSpec,
};
use adaptlab_core::data::{
    generate_synthetic_task, load_corpus, load_tsv_dir, load_tsv_dir_with_vocab,
    subsample_low_resource, tokenize_corpus, write_tsv_dir, LoadOptions, Split, SplitSizes,
    SyntheticTaskSpec, TaskDataset, VocabSettings, Vocabulary,
};
use adaptlab_core::model::{
    adapter_param_count, closed_form_param_count, AdapterConfig, EncoderModel, TransformerConfig,
};
use adaptlab_core::tuning::{evaluate_split, tapt_pretrain, train, Metric, RunRecord};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Flags shared by `train`, `tapt` and `sweep` that override config keys.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub policy: Option<PolicyName>,
    #[arg(long = "adapter-size")]
    pub adapter_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = self.policy {
            cfg.policy = p;
        }
        if let Some(m) = self.adapter_size {
            cfg.adapter_size = m;
        }
        if let Some(lr) = self.lr {
            cfg.lr = Some(lr);
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
    }
}

#[derive(Clone, Debug, clap::Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory with train/dev/test TSV files.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint directory to start from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        self.overrides.apply(&mut cfg);
        if self.data.is_some() {
            cfg.data.clone_from(&self.data);
        }
        if self.init.is_some() {
            cfg.init.clone_from(&self.init);
        }
        Ok(cfg)
    }
}

#[derive(Serialize)]
struct Timing {
    duration_secs: f64,
}

fn write_timing(dir: &RunDirectory, start: Instant) -> Result<()> {
    write_json(
        &dir.timing(),
        &Timing {
            duration_secs: start.elapsed().as_secs_f64(),
        },
    )
}

fn require_vocab(dir: &Path) -> Result<Vocabulary> {
    load_vocab(dir)?
        .ok_or_else(|| CliError::checkpoint(dir, "no vocab.json next to the checkpoint"))
}

fn require_data(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.data.clone().ok_or_else(|| {
        CliError::Usage("no dataset given: pass --data or set \"data\" in the config".into())
    })
}

/// Loads the dataset and the starting model (fresh, or the `init`
/// checkpoint without a task head), adopting the checkpoint architecture.
fn task_and_base(cfg: &mut RunConfig) -> Result<(TaskDataset, EncoderModel)> {
    let data = require_data(cfg)?;
    let (ds, base) = match cfg.init.clone() {
        Some(init) => {
            let base = load_checkpoint(&init)?;
            let vocab = require_vocab(&init)?;
            cfg.adopt_architecture(base.config());
            (
                load_tsv_dir_with_vocab(&data, &vocab, cfg.max_seq_len)?,
                Some(base),
            )
        }
        None => {
            let opts = LoadOptions {
                vocab: VocabSettings {
                    min_freq: cfg.min_freq,
                },
                max_seq_len: cfg.max_seq_len,
            };
            (load_tsv_dir(&data, &opts)?, None)
        }
    };
    let ds = match cfg.subsample {
        Some(k) => subsample_low_resource(&ds, k, cfg.seed, cfg.subsample_stratified)?,
        None => ds,
    };
    let base = match base {
        Some(b) => b,
        None => EncoderModel::new(
            cfg.transformer(ds.vocab.len()),
            None,
            ds.num_classes(),
            cfg.seed,
        )?,
    };
    Ok((ds, base))
}

fn eval_rows(record: &RunRecord) -> Vec<Vec<String>> {
    record
        .evaluations
        .iter()
        .map(|e| {
            vec![
                e.step.to_string(),
                e.epoch.to_string(),
                opt_number(e.train_loss),
                opt_number(e.dev_metric),
                opt_number(e.dev_loss),
            ]
        })
        .collect()
}

/// `train`: supervised tuning with dev-based checkpoint selection.
pub fn cmd_train(args: &RunArgs) -> Result<()> {
    let start = Instant::now();
    let mut cfg = args.resolve()?;
    let (ds, base) = task_and_base(&mut cfg)?;
    let cfg = cfg.resolve();
    let dir = RunDirectory::create(&args.out)?;
    cfg.save(&dir.config())?;

    let policy = cfg.policy();
    let mut model = base.derive(cfg.adapter(), ds.num_classes(), cfg.seed)?;
    save_checkpoint(&model, &dir.checkpoint("init"), None, 0, Some(&ds.vocab))?;
    let record = train(&mut model, &ds, &policy, &cfg.train_config())?;
    let (name, step) = match &record.selected {
        Some(s) => ("best", s.step),
        None => ("final", record.total_steps),
    };
    save_checkpoint(
        &model,
        &dir.checkpoint(name),
        Some(policy.label()),
        step,
        Some(&ds.vocab),
    )?;

    write_json(&dir.record(), &record)?;
    write_csv(
        &dir.metrics(),
        &["step", "epoch", "train_loss", "dev_metric", "dev_loss"],
        &eval_rows(&record),
    )?;
    write_timing(&dir, start)?;
    if let Some(s) = &record.selected {
        println!(
            "selected step {} (epoch {}), dev {}",
            s.step,
            s.epoch,
            fmt_number(s.dev_metric)
        );
    }
    if let Some(t) = record.test_metric {
        println!("test {}", fmt_number(t));
    }
    Ok(())
}

#[derive(Clone, Debug, clap::Args)]
pub struct TaptArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Unlabeled text, one document per line; used instead of the training texts of --data.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

/// `tapt`: masked-LM pretraining on the task's unlabeled text.
pub fn cmd_tapt(args: &TaptArgs) -> Result<()> {
    let start = Instant::now();
    let mut cfg = args.run.resolve()?;
    if args.corpus.is_some() {
        cfg.corpus.clone_from(&args.corpus);
    }
    let base = match cfg.init.clone() {
        Some(init) => {
            let b = load_checkpoint(&init)?;
            cfg.adopt_architecture(b.config());
            Some((b, require_vocab(&init)?))
        }
        None => None,
    };
    let (corpus, vocab, base) = match (&cfg.corpus, &cfg.data) {
        (Some(path), _) => {
            let vocab = match &base {
                Some((_, v)) => v.clone(),
                None => {
                    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
                    tokenize_corpus(
                        &lines,
                        &VocabSettings {
                            min_freq: cfg.min_freq,
                        },
                    )?
                    .0
                }
            };
            (
                load_corpus(path, &vocab, cfg.max_seq_len)?,
                vocab,
                base.map(|b| b.0),
            )
        }
        (None, Some(data)) => {
            let ds = match &base {
                Some((_, v)) => load_tsv_dir_with_vocab(data, v, cfg.max_seq_len)?,
                None => load_tsv_dir(
                    data,
                    &LoadOptions {
                        vocab: VocabSettings {
                            min_freq: cfg.min_freq,
                        },
                        max_seq_len: cfg.max_seq_len,
                    },
                )?,
            };
            let corpus = ds.train.iter().map(|e| e.ids.clone()).collect();
            (corpus, ds.vocab, base.map(|b| b.0))
        }
        (None, None) => return Err(CliError::Usage("tapt needs --corpus or --data".into())),
    };
    let cfg = cfg.resolve();
    let dir = RunDirectory::create(&args.run.out)?;
    cfg.save(&dir.config())?;

    let base = match base {
        Some(b) => b,
        None => EncoderModel::new(cfg.transformer(vocab.len()), None, 2, cfg.seed)?,
    };
    let mut model = base.derive(cfg.adapter(), base.num_classes(), cfg.seed)?;
    save_checkpoint(&model, &dir.checkpoint("init"), None, 0, Some(&vocab))?;
    let policy = cfg.policy();
    let record = tapt_pretrain(&mut model, &corpus, &policy, &cfg.train_config())?;
    save_checkpoint(
        &model,
        &dir.checkpoint("final"),
        Some(policy.label()),
        record.total_steps,
        Some(&vocab),
    )?;

    write_json(&dir.record(), &record)?;
    let rows: Vec<Vec<String>> = record
        .evaluations
        .iter()
        .map(|e| {
            vec![
                e.step.to_string(),
                e.epoch.to_string(),
                opt_number(e.train_loss),
                opt_number(e.dev_loss),
            ]
        })
        .collect();
    write_csv(
        &dir.metrics(),
        &["step", "epoch", "train_loss", "mlm_loss"],
        &rows,
    )?;
    write_timing(&dir, start)?;
    if let (Some(first), Some(last)) = (record.evaluations.first(), record.evaluations.last()) {
        println!(
            "mlm loss {} -> {}",
            opt_number(first.dev_loss),
            opt_number(last.dev_loss)
        );
    }
    Ok(())
}

#[derive(Clone, Debug, clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    #[arg(long, default_value = "accuracy", value_parser = parse_metric)]
    pub metric: Metric,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    s.parse().map_err(|e: adaptlab_core::Error| e.to_string())
}

fn parse_metric(s: &str) -> std::result::Result<Metric, String> {
    s.parse().map_err(|e: adaptlab_core::Error| e.to_string())
}

fn model_and_data(model: &Path, data: &Path) -> Result<(EncoderModel, TaskDataset)> {
    let m = load_checkpoint(model)?;
    let vocab = require_vocab(model)?;
    let ds = load_tsv_dir_with_vocab(data, &vocab, m.config().max_seq_len)?;
    Ok((m, ds))
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Dev => "dev",
        Split::Test => "test",
    }
}

#[derive(Serialize)]
struct EvalRecord {
    model: PathBuf,
    split: Split,
    metric: Metric,
    value: f64,
    degenerate: bool,
    loss: f64,
}

/// `eval`: metric and mean loss of a checkpoint on one split.
pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let start = Instant::now();
    let (model, ds) = model_and_data(&args.model, &args.data)?;
    let eval = evaluate_split(&model, ds.split(args.split), args.metric)?;
    let dir = RunDirectory::create(&args.out)?;
    write_json(
        &dir.record(),
        &EvalRecord {
            model: args.model.clone(),
            split: args.split,
            metric: args.metric,
            value: eval.metric.value,
            degenerate: eval.metric.degenerate,
            loss: eval.loss,
        },
    )?;
    write_csv(
        &dir.metrics(),
        &["split", "metric", "loss"],
        &[vec![
            split_name(args.split).to_string(),
            fmt_number(eval.metric.value),
            fmt_number(eval.loss),
        ]],
    )?;
    write_timing(&dir, start)?;
    println!(
        "{} {} loss {}",
        split_name(args.split),
        fmt_number(eval.metric.value),
        fmt_number(eval.loss)
    );
    Ok(())
}

#[derive(Clone, Debug, clap::Args)]
pub struct RsaArgs {
    #[arg(long = "model-a")]
    pub model_a: PathBuf,
    #[arg(long = "model-b")]
    pub model_b: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    #[arg(long = "sample-size", default_value_t = 512)]
    pub sample_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct RsaRecord {
    model_a: PathBuf,
    model_b: PathBuf,
    split: Split,
    tokens: usize,
    per_layer: Vec<f64>,
    warnings: Vec<String>,
}

/// `rsa`: per-layer similarity between two checkpoints on shared tokens.
pub fn cmd_rsa(args: &RsaArgs) -> Result<()> {
    let start = Instant::now();
    let (a, ds) = model_and_data(&args.model_a, &args.data)?;
    let b = load_checkpoint(&args.model_b)?;
    if let Some(vb) = load_vocab(&args.model_b)? {
        if vb != ds.vocab {
            return Err(CliError::checkpoint(
                &args.model_b,
                "vocabulary differs from model-a",
            ));
        }
    }
    let seqs: Vec<&[u32]> = ds
        .split(args.split)
        .iter()
        .map(|e| e.ids.as_slice())
        .collect();
    let cfg = adaptlab_core::analysis::RSAConfig {
        sample_size: args.sample_size,
        seed: args.seed,
        ..Default::default()
    };
    let (samples, warning) = sample_tokens(&seqs, &cfg)?;
    let ra = representations_at(&a, "model-a", &seqs, &samples)?;
    let rb = representations_at(&b, "model-b", &seqs, &samples)?;
    let result = rsa_layers(&ra, &rb)?;

    let dir = RunDirectory::create(&args.out)?;
    let rows: Vec<Vec<String>> = result
        .per_layer
        .iter()
        .enumerate()
        .map(|(l, s)| vec![l.to_string(), fmt_number(*s)])
        .collect();
    write_csv(&dir.metrics(), &["layer", "score"], &rows)?;
    write_json(
        &dir.record(),
        &RsaRecord {
            model_a: args.model_a.clone(),
            model_b: args.model_b.clone(),
            split: args.split,
            tokens: samples.len(),
            per_layer: result.per_layer.clone(),
            warnings: warning.into_iter().collect(),
        },
    )?;
    write_timing(&dir, start)?;
    for r in rows {
        println!("layer {} {}", r[0], r[1]);
    }
    Ok(())
}

#[derive(Clone, Debug, clap::Args)]
pub struct LandscapeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "train", value_parser = parse_split)]
    pub split: Split,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

/// `landscape`: loss along the line from the checkpoint's initial snapshot
/// to its current weights.
pub fn cmd_landscape(args: &LandscapeArgs) -> Result<()> {
    let start = Instant::now();
    let (mut model, ds) = model_and_data(&args.model, &args.data)?;
    let theta1 = ModelSnapshot::gather(&model);
    let theta0 = ModelSnapshot::initial(&model);
    let curve = loss_landscape(
        &mut model,
        &theta1,
        &theta0,
        ds.split(args.split),
        &default_grid(),
    )?;
    let dir = RunDirectory::create(&args.out)?;
    let rows: Vec<Vec<String>> = curve
        .alphas
        .iter()
        .zip(&curve.losses)
        .map(|(a, l)| vec![fmt_number(*a), fmt_number(*l)])
        .collect();
    write_csv(&dir.metrics(), &["alpha", "loss"], &rows)?;
    write_json(&dir.record(), &curve)?;
    write_timing(&dir, start)?;
    Ok(())
}

/// `sweep`: learning rate x seed grid of training runs.
pub fn cmd_sweep(args: &RunArgs) -> Result<()> {
    let start = Instant::now();
    let mut cfg = args.resolve()?;
    let (ds, base) = task_and_base(&mut cfg)?;
    let cfg = cfg.resolve();
    let dir = RunDirectory::create(&args.out)?;
    cfg.save(&dir.config())?;
    let policy = cfg.policy();
    let train_cfg = cfg.train_config();
    let spec = SweepSpec {
        base: &base,
        data: &ds,
        policy: &policy,
        train: &train_cfg,
    };
    let result = lr_sweep(&spec, &cfg.sweep_lrs, &cfg.sweep_seeds)?;
    let rows: Vec<Vec<String>> = result
        .cells
        .iter()
        .map(|c| {
            vec![
                fmt_number(c.lr),
                c.seed.to_string(),
                fmt_number(c.metric),
                c.failed.to_string(),
            ]
        })
        .collect();
    write_csv(&dir.metrics(), &["lr", "seed", "metric", "failed"], &rows)?;
    write_json(&dir.record(), &result)?;
    write_timing(&dir, start)?;
    for (lr, q) in &result.per_lr {
        println!(
            "lr {} median {} iqr {}",
            fmt_number(*lr),
            fmt_number(q.median),
            fmt_number(q.iqr())
        );
    }
    Ok(())
}

#[derive(Clone, Debug, clap::Args)]
pub struct ParamsArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "vocab-size", default_value_t = 205)]
    pub vocab_size: usize,
    #[arg(long = "num-classes", default_value_t = 2)]
    pub num_classes: usize,
    /// Also write metrics.csv here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Reference size of BERT-base used for the adapter fractions.
pub const BERT_BASE_PARAMS: usize = 110_000_000;

pub fn bert_base() -> TransformerConfig {
    TransformerConfig {
        num_layers: 12,
        model_dim: 768,
        num_heads: 12,
        ffn_dim: 3072,
        vocab_size: 30522,
        max_seq_len: 512,
        dropout_rate: 0.1,
    }
}

/// One row of the `params` table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamRow {
    pub model: String,
    pub adapter_size: usize,
    pub adapter_params: usize,
    pub total: usize,
    pub fraction_of_total: f64,
    pub fraction_of_reference: Option<f64>,
}

pub fn params_table(cfg: &RunConfig, vocab_size: usize, num_classes: usize) -> Vec<ParamRow> {
    let mut rows = Vec::new();
    let toy = cfg.transformer(vocab_size);
    let a = AdapterConfig::new(cfg.adapter_size);
    let count = adapter_param_count(toy.model_dim, toy.num_layers, &a);
    let total = closed_form_param_count(&toy, Some(&a), num_classes);
    rows.push(ParamRow {
        model: "config".into(),
        adapter_size: a.hidden_size,
        adapter_params: count,
        total,
        fraction_of_total: count as f64 / total as f64,
        fraction_of_reference: None,
    });
    let bert = bert_base();
    for m in [64, 128, 256] {
        let a = AdapterConfig::new(m);
        let count = adapter_param_count(bert.model_dim, bert.num_layers, &a);
        let total = closed_form_param_count(&bert, Some(&a), num_classes);
        rows.push(ParamRow {
            model: "bert-base".into(),
            adapter_size: m,
            adapter_params: count,
            total,
            fraction_of_total: count as f64 / total as f64,
            fraction_of_reference: Some(count as f64 / BERT_BASE_PARAMS as f64),
        });
    }
    rows
}

/// `params`: adapter parameter counts for the configured model and BERT-base.
pub fn cmd_params(args: &ParamsArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let rows = params_table(&cfg, args.vocab_size, args.num_classes);
    let header = [
        "model",
        "adapter_size",
        "adapter_params",
        "total",
        "fraction_of_total",
        "fraction_of_110m",
    ];
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.model.clone(),
                r.adapter_size.to_string(),
                r.adapter_params.to_string(),
                r.total.to_string(),
                fmt_number(r.fraction_of_total),
                opt_number(r.fraction_of_reference),
            ]
        })
        .collect();
    println!("{}", header.join("\t"));
    for c in &cells {
        println!("{}", c.join("\t"));
    }
    if let Some(out) = &args.out {
        let dir = RunDirectory::create(out)?;
        write_csv(&dir.metrics(), &header, &cells)?;
        write_json(&dir.record(), &rows)?;
    }
    Ok(())
}

#[derive(Clone, Debug, clap::Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON task spec; missing keys take defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub train: usize,
    #[arg(long, default_value_t = 200)]
    pub dev: usize,
    #[arg(long, default_value_t = 500)]
    pub test: usize,
}

/// `synth`: writes a synthetic keyword task as TSV files plus `spec.json`.
pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let spec = match &args.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read spec {}: {e}", p.display())))?;
            let mut value: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("invalid spec {}: {e}", p.display())))?;
            let mut full =
                serde_json::to_value(SyntheticTaskSpec::default()).expect("spec serializes");
            if let (Some(f), Some(v)) = (full.as_object_mut(), value.as_object_mut()) {
                f.append(v);
            }
            serde_json::from_value(full)
                .map_err(|e| CliError::Usage(format!("invalid spec {}: {e}", p.display())))?
        }
        None => SyntheticTaskSpec {
            seed: args.seed,
            ..Default::default()
        },
    };
    let sizes = SplitSizes {
        train: args.train,
        dev: args.dev,
        test: args.test,
    };
    let ds = generate_synthetic_task(&spec, sizes)?;
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    write_tsv_dir(&ds, &args.out)?;
    write_json(&args.out.join("spec.json"), &spec)?;
    println!(
        "wrote {} / {} / {} examples to {}",
        sizes.train,
        sizes.dev,
        sizes.test,
        args.out.display()
    );
    Ok(())
}
