//! Label-aware rationalizer: marks the hypothesis tokens that justify a
//! given label, using premise-to-hypothesis cross attention.

use std::path::Path;

use ndarray::{concatenate, s, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows, Graph, Var};
use crate::backends::{fit_to_length, EncoderBackend, TinyEncoder};
use crate::checkpoint::{self, CheckpointMeta};
use crate::corpus::{mask_from_highlights, AnnotatedInstance, NliInstance, RationaleMask};
use crate::error::{Error, Result};
use crate::label::Label;
use crate::nn::TinyDims;
use crate::params::{xavier, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::text::{TokenSequence, WordTokenizer};
use crate::training::{train_loop, TrainingConfig};

/// Index of the rationale class in the two-way output.
pub const RATIONALE_CLASS: usize = 1;

/// `<s> label <s> premise <s>`
pub fn build_premise_sequence(tokenizer: &WordTokenizer, label: Label, premise: &str) -> TokenSequence {
    let mut seq = TokenSequence::default();
    seq.push(tokenizer.sep());
    seq.extend(tokenizer.tokenize(label.as_str()));
    seq.push(tokenizer.sep());
    seq.extend(tokenizer.tokenize(premise));
    seq.push(tokenizer.sep());
    seq
}

/// `<s> hypothesis <s>`; token spans index into `hypothesis`.
pub fn build_hypothesis_sequence(tokenizer: &WordTokenizer, hypothesis: &str) -> TokenSequence {
    let mut seq = TokenSequence::default();
    seq.push(tokenizer.sep());
    seq.extend(tokenizer.tokenize(hypothesis));
    seq.push(tokenizer.sep());
    seq
}

/// Attention of each hypothesis token over the premise sequence and the
/// fused hypothesis representation.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedHypothesis<T> {
    pub attention: Array2<T>,
    pub fused: Array2<T>,
}

/// `A[i][j] ∝ exp(hh_i · tanh(W1ᵀ hp_j))`, normalised over `j`.
pub fn cross_attention<T: Scalar>(hh: &Array2<T>, hp: &Array2<T>, w1: &Array2<T>) -> Result<Array2<T>> {
    let d = hh.ncols();
    if hp.ncols() != d || w1.dim() != (d, d) {
        return Err(Error::shape(
            "cross_attention",
            format!("Hh {:?}, Hp {:?}, W1 {:?}", hh.dim(), hp.dim(), w1.dim()),
        ));
    }
    if hh.nrows() == 0 || hp.nrows() == 0 {
        return Err(Error::shape("cross_attention", "empty sequence"));
    }
    let keys = hp.dot(w1).mapv(|v| v.tanh());
    Ok(softmax_rows(&hh.dot(&keys.t())))
}

/// Row `i` is `[hh_i, max over rows of Hp, Σ_k A[i][k] hp_k]`.
pub fn fuse<T: Scalar>(hh: &Array2<T>, hp: &Array2<T>, attention: &Array2<T>) -> Result<Array2<T>> {
    if hp.ncols() != hh.ncols() || attention.dim() != (hh.nrows(), hp.nrows()) || hp.nrows() == 0 {
        return Err(Error::shape(
            "fuse",
            format!("Hh {:?}, Hp {:?}, A {:?}", hh.dim(), hp.dim(), attention.dim()),
        ));
    }
    let pooled = hp.fold_axis(Axis(0), T::neg_infinity(), |&m, &v| m.max(v));
    let pooled = pooled
        .insert_axis(Axis(0))
        .broadcast((hh.nrows(), hh.ncols()))
        .expect("broadcast pooled row")
        .to_owned();
    let attended = attention.dot(hp);
    Ok(concatenate![Axis(1), hh.view(), pooled.view(), attended.view()])
}

/// One supervised example: the gold label in the premise sequence and the
/// annotated mask over the hypothesis sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct RationaleExample {
    pub label: Label,
    pub instance: NliInstance,
    pub mask: RationaleMask,
}

/// Gold-label examples built from annotator highlights.
pub fn rationale_examples(tokenizer: &WordTokenizer, data: &[AnnotatedInstance]) -> Result<Vec<RationaleExample>> {
    data.iter()
        .map(|a| {
            let seq = build_hypothesis_sequence(tokenizer, &a.base.hypothesis);
            Ok(RationaleExample {
                label: a.base.gold_label,
                instance: a.base.clone(),
                mask: mask_from_highlights(a, &seq.tokens)?,
            })
        })
        .collect()
}

/// One line of the rationale prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationalePrediction {
    pub instance_id: String,
    pub label: Label,
    pub token_probs: Vec<f64>,
    pub token_labels: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct RationalizerModel<T: Scalar> {
    store: ParamStore<T>,
    encoder: TinyEncoder,
    w1: ParamId,
    w2: ParamId,
    seed: u64,
    trained: bool,
}

impl<T: Scalar> RationalizerModel<T> {
    pub const KIND: &'static str = "rationalizer";

    pub fn new(tokenizer: WordTokenizer, dims: TinyDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = TinyEncoder::register(&mut store, "enc", tokenizer, dims, &mut rng);
        let d = dims.hidden_dim;
        let w1 = store.add("rat.w1", xavier(d, d, &mut rng));
        let w2 = store.add("rat.w2", xavier(2, 3 * d, &mut rng));
        RationalizerModel {
            store,
            encoder,
            w1,
            w2,
            seed,
            trained: false,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.encoder.hidden_dim()
    }

    pub fn tokenizer(&self) -> &WordTokenizer {
        self.encoder.tokenizer()
    }

    pub fn encoder(&self) -> &TinyEncoder {
        &self.encoder
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn w1(&self) -> &Array2<T> {
        self.store.get(self.w1)
    }

    pub fn w2(&self) -> &Array2<T> {
        self.store.get(self.w2)
    }

    pub fn w1_id(&self) -> ParamId {
        self.w1
    }

    pub fn w2_id(&self) -> ParamId {
        self.w2
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Marks externally set parameters as usable for prediction.
    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    fn sequences(&self, label: Label, premise: &str, hypothesis: &str) -> (Vec<usize>, TokenSequence) {
        let tok = self.tokenizer();
        let max = self.encoder.max_len();
        let p = fit_to_length(&build_premise_sequence(tok, label, premise).ids(), max, "premise sequence");
        (p, build_hypothesis_sequence(tok, hypothesis))
    }

    /// Graph of the two-way logits for each encoded hypothesis position.
    pub fn logits(&self, g: &mut Graph<T>, store: &ParamStore<T>, premise_ids: &[usize], hyp_ids: &[usize]) -> Var {
        let hp = self.encoder.forward(g, store, premise_ids);
        let hh = self.encoder.forward(g, store, hyp_ids);
        let w1 = g.param(store, self.w1);
        let w2 = g.param(store, self.w2);
        let keys = g.matmul(hp, w1);
        let keys = g.tanh(keys);
        let scores = g.matmul_nt(hh, keys);
        let attention = g.softmax_rows(scores);
        let pooled = g.max_rows(hp);
        let pooled = g.broadcast_rows(pooled, hyp_ids.len());
        let attended = g.matmul(attention, hp);
        let fused = g.concat_cols(&[hh, pooled, attended]);
        g.matmul_nt(fused, w2)
    }

    /// Mean token cross-entropy of one example. Separator positions and
    /// positions beyond the encoder limit carry no target.
    pub fn example_loss(&self, g: &mut Graph<T>, store: &ParamStore<T>, example: &RationaleExample) -> Var {
        let (p, h) = self.sequences(example.label, &example.instance.premise, &example.instance.hypothesis);
        let h_ids = fit_to_length(&h.ids(), self.encoder.max_len(), "hypothesis sequence");
        let targets: Vec<Option<usize>> = h
            .tokens
            .iter()
            .zip(&example.mask.token_labels)
            .take(h_ids.len())
            .map(|(t, &y)| (!t.is_special()).then_some(y as usize))
            .collect();
        let logits = self.logits(g, store, &p, &h_ids);
        g.cross_entropy(logits, &targets)
    }

    /// Attention and fused representation for inspection.
    pub fn fused(&self, label: Label, premise: &str, hypothesis: &str) -> Result<FusedHypothesis<T>> {
        let (p, h) = self.sequences(label, premise, hypothesis);
        let h_ids = fit_to_length(&h.ids(), self.encoder.max_len(), "hypothesis sequence");
        let mut g = Graph::new();
        let hp = self.encoder.forward(&mut g, &self.store, &p);
        let hh = self.encoder.forward(&mut g, &self.store, &h_ids);
        let attention = cross_attention(g.value(hh), g.value(hp), self.w1())?;
        let fused = fuse(g.value(hh), g.value(hp), &attention)?;
        Ok(FusedHypothesis { attention, fused })
    }

    /// Per-token rationale probabilities over `<s> hypothesis <s>`.
    pub fn predict_rationales(&self, label: Label, instance: &NliInstance) -> Result<RationaleMask> {
        if !self.trained {
            return Err(Error::Untrained("rationalizer"));
        }
        let (p, h) = self.sequences(label, &instance.premise, &instance.hypothesis);
        let h_ids = fit_to_length(&h.ids(), self.encoder.max_len(), "hypothesis sequence");
        let mut g = Graph::new();
        let logits = self.logits(&mut g, &self.store, &p, &h_ids);
        let probs = softmax_rows(g.value(logits));
        let mut out: Vec<f64> = probs.slice(s![.., RATIONALE_CLASS]).iter().map(|v| v.as_f64()).collect();
        out.resize(h.len(), 0.0);
        let special: Vec<bool> = h.tokens.iter().map(|t| t.is_special()).collect();
        Ok(RationaleMask::from_probs(out, &special))
    }

    pub fn prediction_record(&self, label: Label, instance: &NliInstance) -> Result<RationalePrediction> {
        let mask = self.predict_rationales(label, instance)?;
        Ok(RationalePrediction {
            instance_id: instance.instance_id.clone(),
            label,
            token_probs: mask.token_probs,
            token_labels: mask.token_labels,
        })
    }

    pub fn save(&self, dir: &Path, config: &TrainingConfig) -> Result<()> {
        let vocab = self.tokenizer().vocab();
        let meta = CheckpointMeta {
            kind: Self::KIND.into(),
            hidden_dim: self.hidden_dim(),
            dims: self.encoder.dims(),
            vocab_hash: vocab.hash(),
            seed: self.seed,
            config: serde_json::to_value(config)?,
        };
        checkpoint::save(dir, &meta, vocab, &self.store)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ck = checkpoint::load(dir, Self::KIND)?;
        let mut model = Self::new(WordTokenizer::new(ck.vocab), ck.meta.dims, ck.meta.seed);
        model.store.load_snapshot(&ck.params)?;
        model.trained = true;
        Ok(model)
    }
}

/// Checks that every gold mask matches its hypothesis sequence.
fn check_alignment(tokenizer: &WordTokenizer, data: &[RationaleExample]) -> Result<()> {
    for ex in data {
        let h = build_hypothesis_sequence(tokenizer, &ex.instance.hypothesis);
        if h.len() != ex.mask.len() {
            return Err(Error::Consistency(format!(
                "{}: gold mask has {} entries for {} hypothesis tokens",
                ex.instance.instance_id,
                ex.mask.len(),
                h.len()
            )));
        }
    }
    Ok(())
}

/// Token-level two-way training on gold masks; returns per-epoch losses.
pub fn train_rationalizer<T: Scalar>(
    model: &mut RationalizerModel<T>,
    data: &[RationaleExample],
    config: &TrainingConfig,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Empty("rationalizer training set"));
    }
    check_alignment(model.tokenizer(), data)?;
    let mut store = model.store.clone();
    let this = &*model;
    let losses = train_loop(&mut store, data.len(), config, |g, s, i, _| {
        this.example_loss(g, s, &data[i])
    })?;
    model.store = store;
    model.trained = true;
    Ok(losses)
}

/// Fraction of non-separator hypothesis tokens whose predicted label
/// matches the gold mask.
pub fn token_accuracy<T: Scalar>(model: &RationalizerModel<T>, data: &[RationaleExample]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for ex in data {
        let pred = model.predict_rationales(ex.label, &ex.instance)?;
        let h = build_hypothesis_sequence(model.tokenizer(), &ex.instance.hypothesis);
        for ((t, p), g) in h.tokens.iter().zip(&pred.token_labels).zip(&ex.mask.token_labels) {
            if !t.is_special() {
                total += 1;
                hits += usize::from(p == g);
            }
        }
    }
    if total == 0 {
        return Err(Error::Empty("rationale evaluation set"));
    }
    Ok(hits as f64 / total as f64)
}
