use super::vocab::{tokenize_corpus, VocabSettings, Vocabulary};
use crate::rng::stream;
use crate::{Error, Result};
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// `[CLS] tokens [SEP]` ids with a class label. Padding is added per batch.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledExample {
    pub ids: Vec<u32>,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Parse(format!("unknown split {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub train: Vec<LabeledExample>,
    pub dev: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub label_names: Vec<String>,
    pub vocab: Vocabulary,
    /// Where the data came from: a directory path or a synthetic spec digest.
    pub provenance: String,
}

impl TaskDataset {
    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn split(&self, split: Split) -> &[LabeledExample] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// Checks that every label lies in `[0, num_classes)`.
    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes();
        for ex in self.train.iter().chain(&self.dev).chain(&self.test) {
            if ex.label >= c {
                return Err(Error::Invalid(format!(
                    "label {} outside [0, {c})",
                    ex.label
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadOptions {
    pub vocab: VocabSettings,
    pub max_seq_len: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            vocab: VocabSettings::default(),
            max_seq_len: 64,
        }
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn parse_tsv(path: &Path) -> Result<Vec<(String, String)>> {
    let mut rows = Vec::new();
    for (n, line) in read_lines(path)?.into_iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (text, label) = line.rsplit_once('\t').ok_or_else(|| {
            Error::Parse(format!(
                "{}:{}: expected text<TAB>label",
                path.display(),
                n + 1
            ))
        })?;
        rows.push((text.to_string(), label.trim().to_string()));
    }
    Ok(rows)
}

fn label_order(labels: &[&str]) -> Vec<String> {
    let mut uniq: Vec<String> = labels.iter().map(|s| s.to_string()).collect();
    uniq.sort();
    uniq.dedup();
    if uniq.iter().all(|l| l.parse::<i64>().is_ok()) {
        uniq.sort_by_key(|l| l.parse::<i64>().unwrap());
    }
    uniq
}

/// Loads `train.tsv`, `dev.tsv` and `test.tsv` from `dir`. The vocabulary
/// is built from the training texts only.
pub fn load_tsv_dir(dir: &Path, opts: &LoadOptions) -> Result<TaskDataset> {
    load_splits(dir, opts.max_seq_len, |texts| {
        tokenize_corpus(texts, &opts.vocab).map(|(v, _)| v)
    })
}

/// Like [`load_tsv_dir`] but encodes every split with an existing
/// vocabulary, e.g. the one a checkpoint was trained with.
pub fn load_tsv_dir_with_vocab(
    dir: &Path,
    vocab: &Vocabulary,
    max_seq_len: usize,
) -> Result<TaskDataset> {
    load_splits(dir, max_seq_len, |_| Ok(vocab.clone()))
}

fn load_splits(
    dir: &Path,
    max_seq_len: usize,
    make_vocab: impl FnOnce(&[&str]) -> Result<Vocabulary>,
) -> Result<TaskDataset> {
    let train = parse_tsv(&dir.join("train.tsv"))?;
    let dev = parse_tsv(&dir.join("dev.tsv"))?;
    let test = parse_tsv(&dir.join("test.tsv"))?;
    if train.is_empty() {
        return Err(Error::Empty("train split"));
    }
    let texts: Vec<&str> = train.iter().map(|(t, _)| t.as_str()).collect();
    let vocab = make_vocab(&texts)?;
    let label_names = label_order(&train.iter().map(|(_, l)| l.as_str()).collect::<Vec<_>>());
    let label_id = |l: &str| -> Result<usize> {
        label_names
            .iter()
            .position(|n| n == l)
            .ok_or_else(|| Error::Parse(format!("label {l} does not occur in train.tsv")))
    };
    let encode = |rows: &[(String, String)]| -> Result<Vec<LabeledExample>> {
        rows.iter()
            .map(|(t, l)| {
                Ok(LabeledExample {
                    ids: vocab.encode_example(t, max_seq_len),
                    label: label_id(l)?,
                })
            })
            .collect()
    };
    let ds = TaskDataset {
        train: encode(&train)?,
        dev: encode(&dev)?,
        test: encode(&test)?,
        label_names: label_names.clone(),
        vocab: vocab.clone(),
        provenance: dir.display().to_string(),
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes the three splits as TSV files, decoding ids back to tokens.
pub fn write_tsv_dir(ds: &TaskDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, split) in [
        ("train.tsv", &ds.train),
        ("dev.tsv", &ds.dev),
        ("test.tsv", &ds.test),
    ] {
        let mut out = String::new();
        for ex in split {
            out.push_str(&ds.vocab.decode(&ex.ids).join(" "));
            out.push('\t');
            out.push_str(&ds.label_names[ex.label]);
            out.push('\n');
        }
        let path = dir.join(name);
        std::fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// One document per line, encoded with an existing vocabulary.
pub fn load_corpus(path: &Path, vocab: &Vocabulary, max_seq_len: usize) -> Result<Vec<Vec<u32>>> {
    let docs: Vec<Vec<u32>> = read_lines(path)?
        .iter()
        .filter(|l| !l.trim().is_empty())
        .map(|l| vocab.encode_example(l, max_seq_len))
        .collect();
    if docs.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    Ok(docs)
}

/// Keeps `k` training examples drawn uniformly without replacement; dev and
/// test are untouched. With `stratified`, each class keeps a share of `k`
/// proportional to its frequency (largest remainders get the leftovers).
pub fn subsample_low_resource(
    ds: &TaskDataset,
    k: usize,
    seed: u64,
    stratified: bool,
) -> Result<TaskDataset> {
    let n = ds.train.len();
    if k > n {
        return Err(Error::Invalid(format!(
            "cannot sample {k} examples from {n}"
        )));
    }
    let mut rng = stream(seed, "subsample");
    let mut picked: Vec<usize> = if stratified {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, ex) in ds.train.iter().enumerate() {
            by_class.entry(ex.label).or_default().push(i);
        }
        let mut quotas: Vec<(usize, usize, f64)> = by_class
            .iter()
            .map(|(&c, idx)| {
                let exact = k as f64 * idx.len() as f64 / n as f64;
                (c, exact.floor() as usize, exact - exact.floor())
            })
            .collect();
        let mut left = k - quotas.iter().map(|q| q.1).sum::<usize>();
        let mut order: Vec<usize> = (0..quotas.len()).collect();
        order.sort_by(|&a, &b| quotas[b].2.total_cmp(&quotas[a].2).then(a.cmp(&b)));
        for i in order {
            if left == 0 {
                break;
            }
            quotas[i].1 += 1;
            left -= 1;
        }
        let mut out = Vec::with_capacity(k);
        for (c, quota, _) in quotas {
            let mut idx = by_class[&c].clone();
            idx.shuffle(&mut rng);
            out.extend(idx.into_iter().take(quota));
        }
        out
    } else {
        index::sample(&mut rng, n, k).into_vec()
    };
    picked.sort_unstable();
    Ok(TaskDataset {
        train: picked.iter().map(|&i| ds.train[i].clone()).collect(),
        dev: ds.dev.clone(),
        test: ds.test.clone(),
        label_names: ds.label_names.clone(),
        vocab: ds.vocab.clone(),
        provenance: format!("{} (subsample k={k} seed={seed})", ds.provenance),
    })
}
