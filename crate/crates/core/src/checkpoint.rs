//! Checkpoint directories: `meta.json`, `vocab.json` and `params.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::nn::TinyDims;
use crate::params::{ParamStore, TensorRecord};
use crate::scalar::Scalar;
use crate::text::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub hidden_dim: usize,
    pub dims: TinyDims,
    pub vocab_hash: String,
    pub seed: u64,
    pub config: serde_json::Value,
}

const META: &str = "meta.json";
const VOCAB: &str = "vocab.json";
const PARAMS: &str = "params.json";

pub fn save<T: Scalar>(dir: &Path, meta: &CheckpointMeta, vocab: &Vocab, store: &ParamStore<T>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join(VOCAB), &serde_json::to_vec(vocab.tokens())?)?;
    write_atomic(&dir.join(PARAMS), &serde_json::to_vec(&store.to_snapshot())?)?;
    write_atomic(&dir.join(META), &serde_json::to_vec_pretty(meta)?)?;
    Ok(())
}

/// Everything stored in a checkpoint directory, with the vocabulary hash
/// and model kind already verified.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub vocab: Vocab,
    pub params: Vec<TensorRecord>,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load(dir: &Path, expected_kind: &str) -> Result<Checkpoint> {
    let meta: CheckpointMeta = serde_json::from_slice(&read(&dir.join(META))?)?;
    if meta.kind != expected_kind {
        return Err(Error::Checkpoint(format!(
            "{} holds a `{}` model, expected `{expected_kind}`",
            dir.display(),
            meta.kind
        )));
    }
    let tokens: Vec<String> = serde_json::from_slice(&read(&dir.join(VOCAB))?)?;
    let vocab = Vocab::from_tokens(tokens);
    if vocab.hash() != meta.vocab_hash {
        return Err(Error::Checkpoint(format!(
            "{}: vocabulary hash mismatch (meta {}, file {})",
            dir.display(),
            meta.vocab_hash,
            vocab.hash()
        )));
    }
    let params = serde_json::from_slice(&read(&dir.join(PARAMS))?)?;
    Ok(Checkpoint { meta, vocab, params })
}
