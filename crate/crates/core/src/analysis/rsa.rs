use crate::data::{CLS_ID, PAD_ID, SEP_ID};
use crate::model::{EncoderModel, Mode, TokenBatch};
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::tuning::EVAL_BATCH;
use crate::{Error, Result};
use rand::seq::index;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RSAConfig {
    pub sample_size: usize,
    pub seed: u64,
    pub skip_tokens: Vec<u32>,
}

impl Default for RSAConfig {
    fn default() -> Self {
        RSAConfig {
            sample_size: 512,
            seed: 0,
            skip_tokens: vec![PAD_ID, CLS_ID, SEP_ID],
        }
    }
}

/// One sampled token occurrence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenSample {
    pub example: usize,
    pub position: usize,
}

/// Per-layer representations of the same sampled tokens. `layers[0]` is the
/// embedding output and `layers[i]` the output of encoder layer `i`; each
/// is `n x d` with rows in `samples` order.
#[derive(Clone, Debug)]
pub struct RepresentationSet {
    pub source: String,
    pub samples: Vec<TokenSample>,
    pub layers: Vec<Tensor>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RSAResult {
    /// Indexed like [`RepresentationSet::layers`].
    pub per_layer: Vec<f64>,
}

/// Draws up to `cfg.sample_size` token positions uniformly without
/// replacement, skipping `cfg.skip_tokens`. Returns the sorted sample and a
/// warning when fewer eligible tokens exist than requested.
pub fn sample_tokens<S: AsRef<[u32]>>(
    sequences: &[S],
    cfg: &RSAConfig,
) -> Result<(Vec<TokenSample>, Option<String>)> {
    if cfg.sample_size < 3 {
        return Err(Error::Config("RSA sample size must be at least 3".into()));
    }
    let eligible: Vec<TokenSample> = sequences
        .iter()
        .enumerate()
        .flat_map(|(example, s)| {
            s.as_ref()
                .iter()
                .enumerate()
                .filter(|(_, id)| !cfg.skip_tokens.contains(id))
                .map(move |(position, _)| TokenSample { example, position })
        })
        .collect();
    if eligible.len() < 3 {
        return Err(Error::Invalid(format!(
            "only {} eligible tokens, RSA needs at least 3",
            eligible.len()
        )));
    }
    if eligible.len() <= cfg.sample_size {
        let warning = (eligible.len() < cfg.sample_size).then(|| {
            format!(
                "requested {} tokens but only {} are eligible; using all",
                cfg.sample_size,
                eligible.len()
            )
        });
        return Ok((eligible, warning));
    }
    let mut rng = stream(cfg.seed, "rsa-sample");
    let mut picked: Vec<TokenSample> = index::sample(&mut rng, eligible.len(), cfg.sample_size)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    picked.sort_unstable();
    Ok((picked, None))
}

/// Eval-mode hidden states of `model` at the given token positions.
pub fn representations_at<S: AsRef<[u32]>>(
    model: &EncoderModel,
    source: &str,
    sequences: &[S],
    samples: &[TokenSample],
) -> Result<RepresentationSet> {
    let mut by_example: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (row, s) in samples.iter().enumerate() {
        let seq = sequences.get(s.example).ok_or_else(|| {
            Error::Invalid(format!("sample refers to missing example {}", s.example))
        })?;
        if s.position >= seq.as_ref().len() {
            return Err(Error::Invalid(format!(
                "sample position {} beyond example {} of length {}",
                s.position,
                s.example,
                seq.as_ref().len()
            )));
        }
        by_example.entry(s.example).or_default().push(row);
    }
    let d = model.config().model_dim;
    let n_layers = model.config().num_layers + 1;
    let mut layers = vec![vec![0.0; samples.len() * d]; n_layers];
    let examples: Vec<usize> = by_example.keys().copied().collect();
    for chunk in examples.chunks(EVAL_BATCH) {
        let seqs: Vec<&[u32]> = chunk.iter().map(|&e| sequences[e].as_ref()).collect();
        let batch = TokenBatch::pad(&seqs)?;
        let out = model.encoder_forward(&batch, &mut Mode::Eval)?;
        for (b, e) in chunk.iter().enumerate() {
            for &row in &by_example[e] {
                let pos = samples[row].position;
                let src = (b * batch.seq + pos) * d;
                for (layer, h) in out.hidden.iter().enumerate() {
                    layers[layer][row * d..(row + 1) * d].copy_from_slice(&h.data()[src..src + d]);
                }
            }
        }
    }
    Ok(RepresentationSet {
        source: source.to_string(),
        samples: samples.to_vec(),
        layers: layers
            .into_iter()
            .map(|data| Tensor::new(vec![samples.len(), d], data))
            .collect::<Result<_>>()?,
        warnings: Vec::new(),
    })
}

/// Samples tokens per `cfg` and extracts every layer's representations.
/// Pass the returned `samples` to [`representations_at`] for the other
/// models of a comparison.
pub fn collect_representations<S: AsRef<[u32]>>(
    model: &EncoderModel,
    source: &str,
    sequences: &[S],
    cfg: &RSAConfig,
) -> Result<RepresentationSet> {
    let (samples, warning) = sample_tokens(sequences, cfg)?;
    let mut set = representations_at(model, source, sequences, &samples)?;
    set.warnings.extend(warning);
    Ok(set)
}

fn cosine_upper_triangle(m: &Tensor) -> Result<Vec<f64>> {
    let n = m.rows();
    let unit: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let row = m.row(i);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                Err(Error::ZeroNormRow(i))
            } else {
                Ok(row.iter().map(|x| x / norm).collect())
            }
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push(unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum());
        }
    }
    Ok(out)
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "first similarity matrix is constant",
        ));
    }
    if syy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "second similarity matrix is constant",
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation between the strict upper triangles of the cosine
/// similarity matrices of `a` (`n x d`) and `b` (`n x d'`).
pub fn rsa_score(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.rows() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "rsa_score",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if a.rows() < 3 {
        return Err(Error::Invalid("RSA needs at least 3 rows".into()));
    }
    pearson(&cosine_upper_triangle(a)?, &cosine_upper_triangle(b)?)
}

/// Layer-by-layer RSA between two sets built from the same samples.
pub fn rsa_layers(a: &RepresentationSet, b: &RepresentationSet) -> Result<RSAResult> {
    if a.samples != b.samples {
        return Err(Error::Invalid(format!(
            "representation sets {} and {} were built from different token samples",
            a.source, b.source
        )));
    }
    if a.layers.len() != b.layers.len() {
        return Err(Error::Invalid(
            "representation sets have different depths".into(),
        ));
    }
    let per_layer = a
        .layers
        .iter()
        .zip(&b.layers)
        .map(|(x, y)| rsa_score(x, y))
        .collect::<Result<_>>()?;
    Ok(RSAResult { per_layer })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn hand_example_is_minus_one() {
        let a = m(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let b = m(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        assert!((rsa_score(&a, &b).unwrap() + 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_row_and_constant_matrix_are_errors() {
        let a = m(&[&[1.0, 0.0], &[0.0, 0.0], &[1.0, 1.0]]);
        assert!(matches!(rsa_score(&a, &a), Err(Error::ZeroNormRow(1))));
        let flat = m(&[&[1.0, 0.0], &[2.0, 0.0], &[3.0, 0.0]]);
        let b = m(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        assert!(matches!(
            rsa_score(&flat, &b),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn sampling_skips_specials_and_exhausts_small_corpora() {
        let seqs = vec![
            vec![CLS_ID, 7, 8, SEP_ID, PAD_ID],
            vec![CLS_ID, 9, 10, 11, SEP_ID],
        ];
        let (s, warning) = sample_tokens(&seqs, &RSAConfig::default()).unwrap();
        assert_eq!(s.len(), 5);
        assert!(warning.is_some());
        for t in &s {
            assert!(![PAD_ID, CLS_ID, SEP_ID].contains(&seqs[t.example][t.position]));
        }
        assert!(sample_tokens(&[vec![CLS_ID, 7, 8, SEP_ID]], &RSAConfig::default()).is_err());
    }

    #[test]
    fn sampling_is_seeded() {
        let seqs: Vec<Vec<u32>> = (0..50)
            .map(|i| (0..20).map(|j| 5 + ((i * j) % 17) as u32).collect())
            .collect();
        let cfg = RSAConfig {
            sample_size: 100,
            ..RSAConfig::default()
        };
        let (a, _) = sample_tokens(&seqs, &cfg).unwrap();
        let (b, _) = sample_tokens(&seqs, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
        let (c, _) = sample_tokens(&seqs, &RSAConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, c);
    }
}
