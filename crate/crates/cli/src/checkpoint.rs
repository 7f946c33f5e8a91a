//! On-disk checkpoints: `manifest.json` plus `params.bin`, a blob of
//! little-endian binary64 values. The blob holds every parameter's current
//! value in manifest order, followed by every parameter's initial snapshot.

use crate::error::{CliError, Result};
use crate::rundir::{read_json, write_json};
use adaptlab_core::data::Vocabulary;
use adaptlab_core::model::{AdapterConfig, EncoderModel, TransformerConfig};
use adaptlab_core::tensor::{HasParams, Parameter, Tensor};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "params.bin";
const VOCAB: &str = "vocab.json";

/// Byte range inside the blob.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
    pub value: Span,
    pub initial: Span,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: TransformerConfig,
    pub adapter: Option<AdapterConfig>,
    pub num_classes: usize,
    pub policy: Option<String>,
    pub step: usize,
    pub parameters: Vec<ParamEntry>,
}

/// Writes `model` (and optionally its vocabulary) to directory `dir`.
pub fn save_checkpoint(
    model: &EncoderModel,
    dir: &Path,
    policy: Option<&str>,
    step: usize,
    vocab: Option<&Vocabulary>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let params: Vec<&Parameter> = model.params().iter().collect();
    let total: usize = params.iter().map(|p| p.len()).sum();
    let mut blob = Vec::with_capacity(2 * total * 8);
    let mut entries = Vec::with_capacity(params.len());
    for p in &params {
        let offset = blob.len() as u64;
        blob.extend(p.value().data().iter().flat_map(|v| v.to_le_bytes()));
        entries.push(ParamEntry {
            name: p.name().to_string(),
            shape: p.value().shape().to_vec(),
            frozen: p.frozen,
            value: Span {
                offset,
                length: blob.len() as u64 - offset,
            },
            initial: Span {
                offset: 0,
                length: 0,
            },
        });
    }
    for (p, e) in params.iter().zip(&mut entries) {
        let offset = blob.len() as u64;
        blob.extend(p.initial().data().iter().flat_map(|v| v.to_le_bytes()));
        e.initial = Span {
            offset,
            length: blob.len() as u64 - offset,
        };
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: model.config().clone(),
        adapter: model.adapter_config().cloned(),
        num_classes: model.num_classes(),
        policy: policy.map(str::to_string),
        step,
        parameters: entries,
    };
    let blob_path = dir.join(BLOB);
    std::fs::write(&blob_path, blob).map_err(|e| CliError::io(&blob_path, e))?;
    write_json(&dir.join(MANIFEST), &manifest)?;
    if let Some(v) = vocab {
        write_json(&dir.join(VOCAB), v)?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CliError::checkpoint(
            dir,
            format!("unsupported format version {}", manifest.format_version),
        ));
    }
    Ok(manifest)
}

fn decode(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

/// Reads the stored parameters after validating the blob layout.
fn read_parameters(dir: &Path, manifest: &Manifest) -> Result<Vec<Parameter>> {
    let blob_path = dir.join(BLOB);
    let blob = std::fs::read(&blob_path).map_err(|e| CliError::io(&blob_path, e))?;
    let mut expected = 0u64;
    let spans = manifest
        .parameters
        .iter()
        .map(|p| (p, p.value))
        .chain(manifest.parameters.iter().map(|p| (p, p.initial)));
    for (p, span) in spans {
        let numel: usize = p.shape.iter().product();
        if span.offset != expected || span.length != 8 * numel as u64 {
            return Err(CliError::checkpoint(
                dir,
                format!(
                    "parameter {} has a non-contiguous or mis-sized span",
                    p.name
                ),
            ));
        }
        expected += span.length;
    }
    if blob.len() as u64 != expected {
        return Err(CliError::checkpoint(
            dir,
            format!(
                "blob holds {} bytes, manifest describes {expected}",
                blob.len()
            ),
        ));
    }
    let slice = |s: Span| &blob[s.offset as usize..(s.offset + s.length) as usize];
    manifest
        .parameters
        .iter()
        .map(|p| {
            let value = Tensor::new(p.shape.clone(), decode(slice(p.value)))?;
            let initial = Tensor::new(p.shape.clone(), decode(slice(p.initial)))?;
            Ok(Parameter::restore(
                p.name.clone(),
                value,
                initial,
                p.frozen,
            )?)
        })
        .collect()
}

/// Loads a checkpoint with the architecture recorded in its manifest.
pub fn load_checkpoint(dir: &Path) -> Result<EncoderModel> {
    let m = read_manifest(dir)?;
    let params = read_parameters(dir, &m)?;
    Ok(EncoderModel::from_parameters(
        m.model,
        m.adapter,
        m.num_classes,
        params,
    )?)
}

/// Loads stored parameters into the given architecture; any difference in
/// names or shapes is reported by the first mismatching parameter.
pub fn load_checkpoint_as(
    dir: &Path,
    config: TransformerConfig,
    adapter: Option<AdapterConfig>,
    num_classes: usize,
) -> Result<EncoderModel> {
    let m = read_manifest(dir)?;
    let params = read_parameters(dir, &m)?;
    Ok(EncoderModel::from_parameters(
        config,
        adapter,
        num_classes,
        params,
    )?)
}

/// The vocabulary stored next to a checkpoint, if any.
pub fn load_vocab(dir: &Path) -> Result<Option<Vocabulary>> {
    let path = dir.join(VOCAB);
    if !path.exists() {
        return Ok(None);
    }
    read_json(&path).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use adaptlab_core::model::{Mode, TokenBatch};

    fn model() -> EncoderModel {
        let cfg = TransformerConfig {
            num_layers: 1,
            model_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            vocab_size: 12,
            max_seq_len: 6,
            dropout_rate: 0.1,
        };
        let mut m = EncoderModel::new(cfg, Some(AdapterConfig::new(2)), 3, 4).unwrap();
        let id = m.params().id("layer.0.ffn.in.weight").unwrap();
        m.params_mut().get_mut(id).set_value(&[0.25; 128]).unwrap();
        m.params_mut().get_mut(id).frozen = true;
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        save_checkpoint(&m, dir.path(), Some("adapter"), 7, None).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        for (a, b) in m.params().iter().zip(back.params().iter()) {
            assert_eq!(a.name(), b.name());
            assert!(a.value().bit_eq(b.value()));
            assert!(a.initial().bit_eq(b.initial()));
            assert_eq!(a.frozen, b.frozen);
        }
        let batch = TokenBatch::pad(&[vec![1u32, 6, 7, 2]]).unwrap();
        let x = m.encoder_forward(&batch, &mut Mode::Eval).unwrap();
        let y = back.encoder_forward(&batch, &mut Mode::Eval).unwrap();
        assert!(x.pooled.bit_eq(&y.pooled));
        assert_eq!(read_manifest(dir.path()).unwrap().step, 7);
    }

    #[test]
    fn truncated_blob_and_unknown_version_fail() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model(), dir.path(), None, 0, None).unwrap();
        let blob = dir.path().join(BLOB);
        let bytes = std::fs::read(&blob).unwrap();
        std::fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
        std::fs::write(&blob, &bytes).unwrap();
        let path = dir.path().join(MANIFEST);
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(
            &path,
            text.replace("\"format_version\": 1", "\"format_version\": 9"),
        )
        .unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn mismatched_architecture_names_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        save_checkpoint(&m, dir.path(), None, 0, None).unwrap();
        let err = load_checkpoint_as(dir.path(), m.config().clone(), None, 3)
            .unwrap_err()
            .to_string();
        assert!(err.contains("layer.0.adapter_attn.down.weight"), "{err}");
    }
}
