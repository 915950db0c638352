//! Encoder and generator contracts and their tiny transformer backends.
//!
//! The tiny backends are small enough to train end to end on a desktop CPU
//! in seconds. Full-scale pretrained backbones are a configuration choice
//! ([`BackendChoice::Pretrained`]) that validates but cannot be executed by
//! this build.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{self, CheckpointMeta};
use crate::error::{Error, Result};
use crate::nn::{TinyDims, Transformer};
use crate::params::{xavier, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::text::{PieceTokenizer, TokenSequence, WordTokenizer};
use crate::training::{train_loop, TrainingConfig};

/// Which backbone family a pipeline runs on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendChoice {
    Tiny,
    /// Identifier of a pretrained checkpoint, e.g. `roberta-base`.
    Pretrained(String),
}

impl fmt::Display for BackendChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendChoice::Tiny => f.write_str("tiny"),
            BackendChoice::Pretrained(id) => write!(f, "pretrained:{id}"),
        }
    }
}

impl FromStr for BackendChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "tiny" => Ok(BackendChoice::Tiny),
            other => match other.strip_prefix("pretrained:") {
                Some(id) if !id.trim().is_empty() => Ok(BackendChoice::Pretrained(id.trim().into())),
                _ => Err(Error::Config(format!(
                    "backend `{other}`: expected `tiny` or `pretrained:<identifier>`"
                ))),
            },
        }
    }
}

impl Serialize for BackendChoice {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BackendChoice {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Contract for sequence encoders: one `hidden_dim` vector per input token.
pub trait EncoderBackend {
    fn hidden_dim(&self) -> usize;
    fn max_len(&self) -> usize;
    fn tokenizer(&self) -> &WordTokenizer;
    /// Contextual states (`ids.len()` × `hidden_dim`). `ids` must already
    /// fit in `max_len`.
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, ids: &[usize]) -> Var;
}

/// Contract for text generators used by the explainer.
pub trait GeneratorBackend {
    fn tokenizer(&self) -> &PieceTokenizer;
    fn max_new_tokens(&self) -> usize;
    fn is_trained(&self) -> bool;
    /// Fine-tunes on whole texts; returns the mean loss per epoch.
    fn fine_tune(&mut self, texts: &[String], config: &TrainingConfig) -> Result<Vec<f64>>;
    /// Mean per-token negative log-likelihood of `texts`.
    fn mean_nll(&self, texts: &[String]) -> Result<f64>;
    /// Greedy continuation of `prompt`, stopping at end-of-text, newline or
    /// `max_new_tokens`.
    fn greedy_decode(&self, prompt: &str) -> Result<String>;
}

/// Clips `ids` to `max_len`, logging a warning when anything is dropped.
pub fn fit_to_length(ids: &[usize], max_len: usize, what: &str) -> Vec<usize> {
    if ids.len() > max_len {
        log::warn!(
            "{what}: truncating {} tokens to the backend limit of {max_len}",
            ids.len()
        );
        ids[..max_len].to_vec()
    } else {
        ids.to_vec()
    }
}

/// Evaluation-mode encoding of a token sequence.
pub fn encode<T: Scalar, E: EncoderBackend>(
    encoder: &E,
    store: &ParamStore<T>,
    tokens: &TokenSequence,
) -> Result<Array2<T>> {
    if tokens.is_empty() {
        return Err(Error::Empty("token sequence"));
    }
    let ids = fit_to_length(&tokens.ids(), encoder.max_len(), "encode");
    let mut g = Graph::new();
    let h = encoder.forward(&mut g, store, &ids);
    Ok(g.value(h).clone())
}

/// Bidirectional tiny transformer encoder. Its parameters live in the store
/// of the model that owns it.
#[derive(Debug, Clone)]
pub struct TinyEncoder {
    tokenizer: WordTokenizer,
    net: Transformer,
}

impl TinyEncoder {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        tokenizer: WordTokenizer,
        dims: TinyDims,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let net = Transformer::register(store, prefix, tokenizer.vocab().len(), dims, false, rng);
        TinyEncoder { tokenizer, net }
    }

    pub fn dims(&self) -> TinyDims {
        self.net.dims()
    }
}

impl EncoderBackend for TinyEncoder {
    fn hidden_dim(&self) -> usize {
        self.net.dims().hidden_dim
    }

    fn max_len(&self) -> usize {
        self.net.dims().max_len
    }

    fn tokenizer(&self) -> &WordTokenizer {
        &self.tokenizer
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, ids: &[usize]) -> Var {
        self.net.forward(g, store, ids)
    }
}

/// Causal tiny transformer language model over [`PieceTokenizer`] pieces.
#[derive(Debug, Clone)]
pub struct TinyGenerator<T: Scalar> {
    tokenizer: PieceTokenizer,
    store: ParamStore<T>,
    net: Transformer,
    head_weight: ParamId,
    head_bias: ParamId,
    max_new_tokens: usize,
    seed: u64,
    trained: bool,
}

impl<T: Scalar> TinyGenerator<T> {
    pub const DEFAULT_MAX_NEW_TOKENS: usize = 64;
    pub const KIND: &'static str = "generator";

    pub fn new(tokenizer: PieceTokenizer, dims: TinyDims, max_new_tokens: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let vocab = tokenizer.vocab().len();
        let net = Transformer::register(&mut store, "gen", vocab, dims, true, &mut rng);
        let head_weight = store.add("gen.head.weight", xavier(dims.hidden_dim, vocab, &mut rng));
        let head_bias = store.add("gen.head.bias", Array2::zeros((1, vocab)));
        TinyGenerator {
            tokenizer,
            store,
            net,
            head_weight,
            head_bias,
            max_new_tokens: max_new_tokens.max(1),
            seed,
            trained: false,
        }
    }

    pub fn save(&self, dir: &Path, config: &TrainingConfig) -> Result<()> {
        let vocab = self.tokenizer.vocab();
        let meta = CheckpointMeta {
            kind: Self::KIND.into(),
            hidden_dim: self.dims().hidden_dim,
            dims: self.dims(),
            vocab_hash: vocab.hash(),
            seed: self.seed,
            config: serde_json::json!({
                "training": config,
                "max_new_tokens": self.max_new_tokens,
            }),
        };
        checkpoint::save(dir, &meta, vocab, &self.store)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ck = checkpoint::load(dir, Self::KIND)?;
        let max_new_tokens = ck.meta.config["max_new_tokens"]
            .as_u64()
            .map_or(Self::DEFAULT_MAX_NEW_TOKENS, |n| n as usize);
        let mut model = Self::new(PieceTokenizer::new(ck.vocab), ck.meta.dims, max_new_tokens, ck.meta.seed);
        model.store.load_snapshot(&ck.params)?;
        model.trained = true;
        Ok(model)
    }

    pub fn dims(&self) -> TinyDims {
        self.net.dims()
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    fn logits(&self, g: &mut Graph<T>, store: &ParamStore<T>, hidden: Var) -> Var {
        let w = g.param(store, self.head_weight);
        let b = g.param(store, self.head_bias);
        let z = g.matmul(hidden, w);
        g.add_row(z, b)
    }

    /// Ids of `text` followed by end-of-text, clipped to the context size.
    fn training_ids(&self, text: &str) -> Vec<usize> {
        let mut ids = self.tokenizer.encode(text);
        ids.push(self.tokenizer.eot_id());
        fit_to_length(&ids, self.net.dims().max_len, "generator text")
    }

    fn lm_loss(&self, g: &mut Graph<T>, store: &ParamStore<T>, ids: &[usize]) -> Option<Var> {
        if ids.len() < 2 {
            return None;
        }
        let inputs = &ids[..ids.len() - 1];
        let targets: Vec<Option<usize>> = ids[1..].iter().map(|&t| Some(t)).collect();
        let h = self.net.forward(g, store, inputs);
        let logits = self.logits(g, store, h);
        Some(g.cross_entropy(logits, &targets))
    }

    /// Greedy next-token choice; ties go to the lowest id.
    fn next_token(&self, ids: &[usize]) -> usize {
        let mut g = Graph::new();
        let h = self.net.forward(&mut g, &self.store, ids);
        let last = g.slice_rows(h, ids.len() - 1, 1);
        let logits = self.logits(&mut g, &self.store, last);
        let row = g.value(logits).row(0);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best
    }
}

impl<T: Scalar> GeneratorBackend for TinyGenerator<T> {
    fn tokenizer(&self) -> &PieceTokenizer {
        &self.tokenizer
    }

    fn max_new_tokens(&self) -> usize {
        self.max_new_tokens
    }

    fn is_trained(&self) -> bool {
        self.trained
    }

    fn fine_tune(&mut self, texts: &[String], config: &TrainingConfig) -> Result<Vec<f64>> {
        if texts.is_empty() {
            return Err(Error::Config("generator fine-tuning needs at least one text".into()));
        }
        config.validate()?;
        let encoded: Vec<Vec<usize>> = texts.iter().map(|t| self.training_ids(t)).collect();
        let this = &*self;
        let mut store = this.store.clone();
        let losses = train_loop(&mut store, encoded.len(), config, |g, s, i, _| {
            this.lm_loss(g, s, &encoded[i])
                .unwrap_or_else(|| g.input(Array2::zeros((1, 1))))
        })?;
        self.store = store;
        self.trained = true;
        Ok(losses)
    }

    fn mean_nll(&self, texts: &[String]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for t in texts {
            let ids = self.training_ids(t);
            let mut g = Graph::new();
            if let Some(l) = self.lm_loss(&mut g, &self.store, &ids) {
                let n = ids.len() - 1;
                total += g.scalar(l).as_f64() * n as f64;
                count += n;
            }
        }
        if count == 0 {
            return Err(Error::Empty("evaluation texts"));
        }
        Ok(total / count as f64)
    }

    fn greedy_decode(&self, prompt: &str) -> Result<String> {
        let mut ids = self.tokenizer.encode(prompt);
        let max_len = self.net.dims().max_len;
        if ids.is_empty() {
            return Err(Error::Empty("prompt"));
        }
        if ids.len() >= max_len {
            return Err(Error::TooLong {
                len: ids.len(),
                max: max_len,
            });
        }
        let eot = self.tokenizer.eot_id();
        let newline = self.tokenizer.newline_id();
        if ids.last() == Some(&eot) {
            return Ok(String::new());
        }
        let start = ids.len();
        while ids.len() - start < self.max_new_tokens && ids.len() < max_len {
            let next = self.next_token(&ids);
            if next == eot || Some(next) == newline {
                break;
            }
            ids.push(next);
        }
        Ok(self.tokenizer.decode(&ids[start..]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dims() -> TinyDims {
        TinyDims {
            hidden_dim: 16,
            heads: 2,
            layers: 2,
            ff_dim: 32,
            max_len: 48,
        }
    }

    #[test]
    fn backend_choice_parses() {
        assert_eq!("tiny".parse::<BackendChoice>().unwrap(), BackendChoice::Tiny);
        assert_eq!(
            "pretrained:roberta-base".parse::<BackendChoice>().unwrap(),
            BackendChoice::Pretrained("roberta-base".into())
        );
        assert!("pretrained:".parse::<BackendChoice>().is_err());
        assert!("huge".parse::<BackendChoice>().is_err());
    }

    #[test]
    fn encode_shape_and_determinism() {
        let tok = WordTokenizer::fit(["a man is playing the drums ."]);
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = TinyEncoder::register(&mut store, "enc", tok.clone(), TinyDims::default(), &mut rng);
        let seq = TokenSequence {
            tokens: tok.tokenize("A man is playing the drums."),
        };
        assert_eq!(seq.len(), 7);
        let a = encode(&enc, &store, &seq).unwrap();
        let b = encode(&enc, &store, &seq).unwrap();
        assert_eq!(a.dim(), (7, 32));
        assert_eq!(a, b);
        assert!(encode(&enc, &store, &TokenSequence::default()).is_err());
    }

    #[test]
    fn over_length_input_is_truncated() {
        let tok = WordTokenizer::fit(["x"]);
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dims = TinyDims {
            max_len: 8,
            ..TinyDims::default()
        };
        let enc = TinyEncoder::register(&mut store, "enc", tok.clone(), dims, &mut rng);
        let seq = TokenSequence {
            tokens: tok.tokenize(&"x ".repeat(12)),
        };
        assert_eq!(encode(&enc, &store, &seq).unwrap().nrows(), 8);
    }

    #[test]
    fn fine_tuning_lowers_nll_and_overfits_one_completion() {
        let text = "Premise: a dog runs.\nExplanation: dogs can run.".to_string();
        let texts = vec![text.clone(); 50];
        let tok = PieceTokenizer::fit([text.as_str()]);
        let mut generator = TinyGenerator::<f32>::new(tok, tiny_dims(), 64, 1);
        let before = generator.mean_nll(&texts[..1]).unwrap();
        let config = TrainingConfig {
            batch_size: 10,
            learning_rate: 3e-3,
            epochs: 20,
            seed: 3,
        };
        let losses = generator.fine_tune(&texts, &config).unwrap();
        let after = generator.mean_nll(&texts[..1]).unwrap();
        assert!(after < before);
        // within-noise monotone decrease over the first five epochs
        for w in losses[..5].windows(2) {
            assert!(w[1] <= w[0] * 1.05, "{losses:?}");
        }
        let out = generator.greedy_decode("Premise: a dog runs.\nExplanation:").unwrap();
        assert_eq!(out, " dogs can run.");
        assert_eq!(out, generator.greedy_decode("Premise: a dog runs.\nExplanation:").unwrap());
    }

    #[test]
    fn decode_edge_cases() {
        let tok = PieceTokenizer::fit(["a b"]);
        let generator = TinyGenerator::<f32>::new(tok, tiny_dims(), 4, 0);
        assert_eq!(generator.greedy_decode("a b<|endoftext|>").unwrap(), "");
        let long = "a".repeat(1) + &" b".repeat(60);
        assert!(matches!(generator.greedy_decode(&long), Err(Error::TooLong { .. })));
        let out = generator.greedy_decode("a").unwrap();
        let pieces = generator.tokenizer().encode(&out);
        assert!(pieces.len() <= 4);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let tok = PieceTokenizer::fit(["a b c"]);
        let generator = TinyGenerator::<f32>::new(tok, tiny_dims(), 5, 9);
        generator.save(dir.path(), &TrainingConfig::generator_tiny()).unwrap();
        let back = TinyGenerator::<f32>::load(dir.path()).unwrap();
        assert!(back.is_trained());
        assert_eq!(back.max_new_tokens(), 5);
        assert_eq!(back.store().to_snapshot(), generator.store().to_snapshot());
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let tok = PieceTokenizer::fit(["a"]);
        let mut generator = TinyGenerator::<f32>::new(tok, tiny_dims(), 4, 0);
        let before = generator.store().to_snapshot();
        let err = generator.fine_tune(&[], &TrainingConfig::generator_tiny());
        assert!(matches!(err, Err(Error::Config(_))));
        assert_eq!(before, generator.store().to_snapshot());
    }
}
