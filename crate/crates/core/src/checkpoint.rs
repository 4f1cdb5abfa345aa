//! Model checkpoints: every parameter as a named `f32` array plus a JSON
//! block with the model config, vocabulary, seed and held-out videos.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::autograd::ParamStore;
use crate::container::{self, F32Array};
use crate::corpus::{write_atomic, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ReportModel};

pub const CHECKPOINT_FILE: &str = "model.safetensors";
const FORMAT: &str = "graphreport-checkpoint-1";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub seed: u64,
    pub val_videos: Vec<u32>,
    pub model: ReportModel,
    pub params: ParamStore,
}

/// A directory resolves to the checkpoint file inside it.
pub fn resolve(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CHECKPOINT_FILE)
    } else {
        path.to_path_buf()
    }
}

fn json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn encode_checkpoint(
    config: &ModelConfig,
    vocab: &Vocabulary,
    seed: u64,
    val_videos: &[u32],
    params: &ParamStore,
) -> Result<Vec<u8>> {
    let arrays: BTreeMap<String, F32Array> = params
        .iter()
        .map(|(_, name, m)| {
            (
                name.to_string(),
                F32Array {
                    shape: vec![m.rows(), m.cols()],
                    values: m.as_slice().iter().map(|&v| v as f32).collect(),
                },
            )
        })
        .collect();
    let metadata = BTreeMap::from([
        ("format".to_string(), FORMAT.to_string()),
        ("config".to_string(), json(config)?),
        ("vocab".to_string(), json(&vocab.tokens())?),
        ("seed".to_string(), seed.to_string()),
        ("val_videos".to_string(), json(&val_videos)?),
    ]);
    container::encode(&arrays, &metadata)
}

pub fn save_checkpoint(
    path: &Path,
    config: &ModelConfig,
    vocab: &Vocabulary,
    seed: u64,
    val_videos: &[u32],
    params: &ParamStore,
) -> Result<()> {
    let bytes = encode_checkpoint(config, vocab, seed, val_videos, params)?;
    write_atomic(path, &bytes)
}

fn meta<'a>(m: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    m.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("missing `{key}` in checkpoint metadata")))
}

fn parse<T: serde::de::DeserializeOwned>(s: &str, what: &str) -> Result<T> {
    serde_json::from_str(s).map_err(|e| Error::Checkpoint(format!("bad {what}: {e}")))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (arrays, metadata) = container::decode(bytes)?;
    if meta(&metadata, "format")? != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format `{}`", meta(&metadata, "format")?)));
    }
    let config: ModelConfig = parse(meta(&metadata, "config")?, "config")?;
    let vocab = Vocabulary::from_tokens(parse(meta(&metadata, "vocab")?, "vocabulary")?)?;
    let seed: u64 = meta(&metadata, "seed")?
        .parse()
        .map_err(|e| Error::Checkpoint(format!("bad seed: {e}")))?;
    let val_videos: Vec<u32> = parse(meta(&metadata, "val_videos")?, "val_videos")?;
    let (model, mut params) = ReportModel::new(&config, vocab.len(), seed)?;
    if arrays.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} arrays, model expects {}",
            arrays.len(),
            params.len()
        )));
    }
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let name = params.name(id).to_string();
        let arr = arrays
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        let target = params.get_mut(id);
        if arr.shape != [target.rows(), target.cols()] {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, expected {:?}",
                arr.shape,
                [target.rows(), target.cols()]
            )));
        }
        for (dst, &src) in target.as_mut_slice().iter_mut().zip(&arr.values) {
            *dst = src as f64;
        }
    }
    Ok(Checkpoint {
        config,
        vocab,
        seed,
        val_videos,
        model,
        params,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let path = resolve(path);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderConfig;

    fn setup() -> (ModelConfig, Vocabulary, ParamStore) {
        let config = ModelConfig {
            feature_width: 4,
            ip_hidden: [4, 4],
            decoder: DecoderConfig {
                d_model: 8,
                heads: 2,
                encoder_layers: 1,
                decoder_layers: 1,
                ff_width: 8,
                max_len: 8,
            },
            ..ModelConfig::default()
        };
        let vocab = Vocabulary::from_tokens(
            ["<pad>", "<bos>", "<eos>", "<unk>", "kidney"].iter().map(|s| s.to_string()).collect(),
        )
        .unwrap();
        let (_, mut params) = ReportModel::new(&config, vocab.len(), 9).unwrap();
        params.quantize_f32();
        (config, vocab, params)
    }

    #[test]
    fn round_trip_restores_parameters() {
        let (config, vocab, params) = setup();
        let bytes = encode_checkpoint(&config, &vocab, 9, &[4], &params).unwrap();
        let ck = decode_checkpoint(&bytes).unwrap();
        assert_eq!(ck.params, params);
        assert_eq!(ck.config, config);
        assert_eq!(ck.vocab, vocab);
        assert_eq!(ck.val_videos, vec![4]);
        assert_eq!(encode_checkpoint(&config, &vocab, 9, &[4], &ck.params).unwrap(), bytes);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (config, vocab, params) = setup();
        let mut other = config.clone();
        other.feature_width = 6;
        let bytes = encode_checkpoint(&other, &vocab, 9, &[], &params).unwrap();
        let err = decode_checkpoint(&bytes).unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");
    }
}
