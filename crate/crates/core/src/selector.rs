//! NLI classifier shared by the instance selector and the inference model,
//! plus the two explanation selection strategies.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backends::{fit_to_length, EncoderBackend, TinyEncoder};
use crate::checkpoint::{self, CheckpointMeta};
use crate::corpus::NliInstance;
use crate::error::{Error, Result};
use crate::inference::{build_sequence, InferenceInput};
use crate::label::{Label, LabelDistribution, PerLabel};
use crate::nn::TinyDims;
use crate::params::{xavier, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::text::{TokenSequence, WordTokenizer};
use crate::training::{train_loop, TrainingConfig};

/// Encoder with a `softmax(tanh(U1·h0)·U2)` head on the first token.
#[derive(Debug, Clone)]
pub struct NliClassifier<T: Scalar> {
    kind: String,
    store: ParamStore<T>,
    encoder: TinyEncoder,
    u1: ParamId,
    u2: ParamId,
    seed: u64,
    trained: bool,
}

impl<T: Scalar> NliClassifier<T> {
    pub fn new(kind: &str, tokenizer: WordTokenizer, dims: TinyDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = TinyEncoder::register(&mut store, "enc", tokenizer, dims, &mut rng);
        let d = dims.hidden_dim;
        let u1 = store.add("head.u1", xavier(d, d, &mut rng));
        let u2 = store.add("head.u2", xavier(d, 3, &mut rng));
        NliClassifier {
            kind: kind.to_string(),
            store,
            encoder,
            u1,
            u2,
            seed,
            trained: false,
        }
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn tokenizer(&self) -> &WordTokenizer {
        self.encoder.tokenizer()
    }

    pub fn max_len(&self) -> usize {
        self.encoder.max_len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.encoder.hidden_dim()
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn u1_id(&self) -> ParamId {
        self.u1
    }

    pub fn u2_id(&self) -> ParamId {
        self.u2
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    /// 1×3 logits for a sequence of ids.
    pub fn logits(&self, g: &mut Graph<T>, store: &ParamStore<T>, ids: &[usize]) -> Var {
        let h = self.encoder.forward(g, store, ids);
        let h0 = g.slice_rows(h, 0, 1);
        let u1 = g.param(store, self.u1);
        let u2 = g.param(store, self.u2);
        let z = g.matmul_nt(h0, u1);
        let z = g.tanh(z);
        g.matmul(z, u2)
    }

    pub fn classify_sequence(&self, seq: &TokenSequence) -> Result<LabelDistribution<T>> {
        if !self.trained {
            return Err(Error::Untrained("classifier"));
        }
        if seq.is_empty() {
            return Err(Error::Empty("classifier input"));
        }
        let ids = fit_to_length(&seq.ids(), self.max_len(), "classifier input");
        let mut g = Graph::new();
        let z = self.logits(&mut g, &self.store, &ids);
        let row = g.value(z);
        Ok(LabelDistribution::from_logits([row[[0, 0]], row[[0, 1]], row[[0, 2]]]))
    }

    /// Distribution over labels for `<s>p<s>h<s>`.
    pub fn classify(&self, premise: &str, hypothesis: &str) -> Result<LabelDistribution<T>> {
        let input = InferenceInput::base(premise, hypothesis);
        let seq = build_sequence(self.tokenizer(), &input, self.max_len())?;
        self.classify_sequence(&seq)
    }

    pub fn save(&self, dir: &Path, config: &TrainingConfig) -> Result<()> {
        let vocab = self.tokenizer().vocab();
        let meta = CheckpointMeta {
            kind: self.kind.clone(),
            hidden_dim: self.hidden_dim(),
            dims: self.encoder.dims(),
            vocab_hash: vocab.hash(),
            seed: self.seed,
            config: serde_json::to_value(config)?,
        };
        checkpoint::save(dir, &meta, vocab, &self.store)
    }

    pub fn load(dir: &Path, kind: &str) -> Result<Self> {
        let ck = checkpoint::load(dir, kind)?;
        let mut model = Self::new(kind, WordTokenizer::new(ck.vocab), ck.meta.dims, ck.meta.seed);
        model.store.load_snapshot(&ck.params)?;
        model.trained = true;
        Ok(model)
    }

    pub(crate) fn set_store(&mut self, store: ParamStore<T>) {
        self.store = store;
        self.trained = true;
    }
}

/// Standard three-way cross-entropy training on gold labels.
pub fn train_selector<T: Scalar>(
    model: &mut NliClassifier<T>,
    data: &[NliInstance],
    config: &TrainingConfig,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Empty("selector training set"));
    }
    let seqs = data
        .iter()
        .map(|d| {
            let seq = build_sequence(model.tokenizer(), &InferenceInput::base(&d.premise, &d.hypothesis), model.max_len())?;
            Ok(seq.ids())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut store = model.store.clone();
    let this = &*model;
    let losses = train_loop(&mut store, data.len(), config, |g, s, i, _| {
        let z = this.logits(g, s, &seqs[i]);
        g.cross_entropy(z, &[Some(data[i].gold_label.index())])
    })?;
    model.set_store(store);
    Ok(losses)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionStrategy {
    Max,
    Prob,
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionStrategy::Max => "max",
            SelectionStrategy::Prob => "prob",
        })
    }
}

impl FromStr for SelectionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "max" => Ok(SelectionStrategy::Max),
            "prob" => Ok(SelectionStrategy::Prob),
            other => Err(Error::Config(format!("strategy `{other}`: expected `max` or `prob`"))),
        }
    }
}

/// Explanation of the most probable label; ties go to the earlier label.
pub fn select_max<'a, S, T: Scalar>(explanations: &'a PerLabel<S>, dist: &LabelDistribution<T>) -> (Label, &'a S) {
    let label = dist.argmax();
    (label, explanations.get(label))
}

/// Draws a label from `dist` with one uniform variate.
pub fn sample_label<T: Scalar, R: Rng + ?Sized>(dist: &LabelDistribution<T>, rng: &mut R) -> Label {
    let u: f64 = rng.random();
    let probs = dist.to_f64();
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return Label::ALL[i];
        }
    }
    // rounding left `cum` just below 1: take the last label with mass
    let last = probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    Label::ALL[last]
}

pub fn select_sample<'a, S, T: Scalar, R: Rng + ?Sized>(
    explanations: &'a PerLabel<S>,
    dist: &LabelDistribution<T>,
    rng: &mut R,
) -> (Label, &'a S) {
    let label = sample_label(dist, rng);
    (label, explanations.get(label))
}

/// One line of the selection dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub instance_id: String,
    pub dist: [f64; 3],
    pub selected_label: Label,
    pub strategy: SelectionStrategy,
    pub seed: u64,
}

/// Convenience: a zero-filled head, used in tests of degenerate outputs.
pub fn zero_head<T: Scalar>(model: &mut NliClassifier<T>) {
    let id = model.u2_id();
    let shape = model.store().get(id).dim();
    *model.store_mut().get_mut(id) = Array2::zeros(shape);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triple() -> PerLabel<String> {
        PerLabel::from_fn(|l| format!("because {l}"))
    }

    fn dist(p: [f64; 3]) -> LabelDistribution<f64> {
        LabelDistribution::new(p).unwrap()
    }

    #[test]
    fn max_selection_and_ties() {
        let t = triple();
        assert_eq!(select_max(&t, &dist([0.1, 0.2, 0.7])).0, Label::Contradiction);
        let (l, e) = select_max(&t, &dist([0.5, 0.5, 0.0]));
        assert_eq!(l, Label::Entailment);
        assert_eq!(e, "because entailment");
    }

    #[test]
    fn sampling_is_seeded_and_respects_degenerate_dists() {
        let t = triple();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert_eq!(select_sample(&t, &dist([1.0, 0.0, 0.0]), &mut rng).0, Label::Entailment);
            assert_eq!(select_sample(&t, &dist([0.0, 0.0, 1.0]), &mut rng).0, Label::Contradiction);
        }
        let d = dist([0.2, 0.3, 0.5]);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| sample_label(&d, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn classify_contracts() {
        let tok = WordTokenizer::fit(["a dog runs", "a cat sleeps"]);
        let mut model = NliClassifier::<f64>::new("selector", tok, TinyDims::default(), 0);
        assert!(matches!(model.classify("a dog", "a cat"), Err(Error::Untrained(_))));
        model.mark_trained();
        let d = model.classify("a dog runs", "a cat sleeps").unwrap();
        assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(d, model.classify("a dog runs", "a cat sleeps").unwrap());
        zero_head(&mut model);
        let d = model.classify("a dog runs", "a cat sleeps").unwrap();
        for p in d.probs() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(d.argmax(), Label::Entailment);
    }

    #[test]
    fn single_class_supervision() {
        let tok = WordTokenizer::fit(["a dog runs", "a cat sleeps", "birds fly"]);
        let data: Vec<NliInstance> = ["a dog runs", "a cat sleeps", "birds fly"]
            .iter()
            .enumerate()
            .map(|(i, p)| NliInstance::new(i.to_string(), p, "a cat", Label::Neutral).unwrap())
            .collect();
        let mut model = NliClassifier::<f32>::new("selector", tok, TinyDims::default(), 0);
        assert!(matches!(train_selector(&mut model, &[], &TrainingConfig::classifier_tiny()), Err(Error::Empty(_))));
        let config = TrainingConfig {
            epochs: 10,
            ..TrainingConfig::classifier_tiny()
        };
        train_selector(&mut model, &data, &config).unwrap();
        for d in &data {
            assert_eq!(model.classify(&d.premise, "birds").unwrap().argmax(), Label::Neutral);
        }
    }

    #[test]
    fn strategy_parses() {
        assert_eq!("prob".parse::<SelectionStrategy>().unwrap(), SelectionStrategy::Prob);
        assert!("best".parse::<SelectionStrategy>().is_err());
    }
}
