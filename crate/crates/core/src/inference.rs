//! Final label prediction from premise, hypothesis and a selected
//! explanation, trained against the selector's soft distribution.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{Label, LabelDistribution, PerLabel};
use crate::scalar::Scalar;
use crate::selector::{select_max, select_sample, NliClassifier, SelectionStrategy};
use crate::text::{TokenSequence, WordTokenizer};
use crate::training::{train_loop, TrainingConfig};

/// Clamp applied to predicted probabilities before the log.
pub const EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceMode {
    Base,
    Expl,
    All,
}

impl InferenceMode {
    pub const ALL: [InferenceMode; 3] = [InferenceMode::Base, InferenceMode::Expl, InferenceMode::All];

    pub fn as_str(self) -> &'static str {
        match self {
            InferenceMode::Base => "base",
            InferenceMode::Expl => "expl",
            InferenceMode::All => "all",
        }
    }

    pub fn uses_explanation(self) -> bool {
        self != InferenceMode::Base
    }
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "base" => Ok(InferenceMode::Base),
            "expl" => Ok(InferenceMode::Expl),
            "all" => Ok(InferenceMode::All),
            other => Err(Error::Config(format!("mode `{other}`: expected base, expl or all"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferenceInput {
    pub mode: InferenceMode,
    pub premise: String,
    pub hypothesis: String,
    pub explanation: Option<String>,
}

impl InferenceInput {
    pub fn base(premise: &str, hypothesis: &str) -> Self {
        InferenceInput {
            mode: InferenceMode::Base,
            premise: premise.to_string(),
            hypothesis: hypothesis.to_string(),
            explanation: None,
        }
    }

    /// Builds an input for `mode`; the explanation is dropped for `base`.
    pub fn for_mode(mode: InferenceMode, premise: &str, hypothesis: &str, explanation: &str) -> Self {
        InferenceInput {
            mode,
            premise: premise.to_string(),
            hypothesis: hypothesis.to_string(),
            explanation: mode.uses_explanation().then(|| explanation.to_string()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.mode, &self.explanation) {
            (InferenceMode::Base, Some(_)) => Err(Error::Consistency("base inputs carry no explanation".into())),
            (InferenceMode::Expl | InferenceMode::All, None) => {
                Err(Error::Consistency(format!("{} inputs need an explanation", self.mode)))
            }
            _ => Ok(()),
        }
    }
}

/// `<s>p<s>h<s>`, `<s>e<s>` or `<s>p<s>h<s>e<s>` depending on the mode.
/// When too long for `max_len` the explanation is shortened first, then
/// the premise from its end; the hypothesis is never cut.
pub fn build_sequence(tokenizer: &WordTokenizer, input: &InferenceInput, max_len: usize) -> Result<TokenSequence> {
    input.validate()?;
    let mut premise = Vec::new();
    let mut hypothesis = Vec::new();
    if input.mode != InferenceMode::Expl {
        premise = tokenizer.tokenize(&input.premise);
        hypothesis = tokenizer.tokenize(&input.hypothesis);
    }
    let mut explanation = input
        .explanation
        .as_deref()
        .map(|e| tokenizer.tokenize(e))
        .unwrap_or_default();
    let segments = match input.mode {
        InferenceMode::Base => 2,
        InferenceMode::Expl => 1,
        InferenceMode::All => 3,
    };
    let fixed = segments + 1 + hypothesis.len();
    if fixed > max_len {
        return Err(Error::TooLong { len: fixed, max: max_len });
    }
    let budget = max_len - fixed;
    if premise.len() + explanation.len() > budget {
        log::warn!("inference input truncated to {max_len} tokens");
        let keep_expl = budget.saturating_sub(premise.len());
        explanation.truncate(keep_expl);
        premise.truncate(budget - explanation.len());
    }

    let mut seq = TokenSequence::default();
    seq.push(tokenizer.sep());
    if input.mode != InferenceMode::Expl {
        seq.extend(premise);
        seq.push(tokenizer.sep());
        seq.extend(hypothesis);
        seq.push(tokenizer.sep());
    }
    if input.mode.uses_explanation() {
        seq.extend(explanation);
        seq.push(tokenizer.sep());
    }
    Ok(seq)
}

/// `−Σ_l target_l · log max(p_l, ε)`.
pub fn soft_cross_entropy<T: Scalar>(p: &LabelDistribution<T>, target: &LabelDistribution<T>) -> T {
    let eps = T::of(EPSILON);
    p.probs()
        .iter()
        .zip(target.probs())
        .map(|(&pl, tl)| -tl * pl.max(eps).ln())
        .sum()
}

/// Gradient of [`soft_cross_entropy`] of `softmax(logits)` with respect to
/// the logits.
pub fn soft_cross_entropy_logit_grad<T: Scalar>(logits: [T; 3], target: &LabelDistribution<T>) -> [T; 3] {
    let p = LabelDistribution::from_logits(logits).probs();
    let g = crate::autograd::soft_cross_entropy_grad_row(&p, &target.probs(), T::of(EPSILON));
    [g[0], g[1], g[2]]
}

/// One training instance for the inference model: its candidate
/// explanations and the selector distribution used as soft target and as
/// the selection estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceItem<T> {
    pub instance_id: String,
    pub premise: String,
    pub hypothesis: String,
    pub explanations: PerLabel<String>,
    pub target: LabelDistribution<T>,
}

/// Random stream for selecting the explanation of item `index` in `epoch`.
pub fn selection_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// Explanation label picked for `item` in `epoch`.
pub fn training_selection<T: Scalar>(
    item: &InferenceItem<T>,
    strategy: SelectionStrategy,
    seed: u64,
    epoch: usize,
    index: usize,
) -> Label {
    match strategy {
        SelectionStrategy::Max => select_max(&item.explanations, &item.target).0,
        SelectionStrategy::Prob => select_sample(&item.explanations, &item.target, &mut selection_rng(seed, epoch, index)).0,
    }
}

/// Minimises the mean soft cross-entropy. Each epoch re-selects every
/// instance's explanation with `strategy`.
pub fn train_inference<T: Scalar>(
    model: &mut NliClassifier<T>,
    mode: InferenceMode,
    items: &[InferenceItem<T>],
    strategy: SelectionStrategy,
    config: &TrainingConfig,
) -> Result<Vec<f64>> {
    if items.is_empty() {
        return Err(Error::Empty("inference training set"));
    }
    let targets: Vec<Array2<T>> = items
        .iter()
        .map(|it| Array2::from_shape_vec((1, 3), it.target.probs().to_vec()).expect("1x3"))
        .collect();
    // sequences are fixed for base and for max selection; otherwise built per epoch
    let mut store = model.store().clone();
    let this = &*model;
    let tok = this.tokenizer();
    let sequence = |i: usize, epoch: usize| -> Result<Vec<usize>> {
        let item = &items[i];
        let label = training_selection(item, strategy, config.seed, epoch, i);
        let input = InferenceInput::for_mode(mode, &item.premise, &item.hypothesis, item.explanations.get(label));
        Ok(build_sequence(tok, &input, this.max_len())?.ids())
    };
    for i in 0..items.len() {
        sequence(i, 0)?;
    }
    let losses = train_loop(&mut store, items.len(), config, |g, s, i, epoch| {
        let ids = sequence(i, epoch).expect("validated before training");
        let z = this.logits(g, s, &ids);
        g.soft_cross_entropy(z, &targets[i], T::of(EPSILON))
    })?;
    model.set_store(store);
    Ok(losses)
}

pub fn predict<T: Scalar>(model: &NliClassifier<T>, input: &InferenceInput) -> Result<(Label, LabelDistribution<T>)> {
    let seq = build_sequence(model.tokenizer(), input, model.max_len())?;
    let dist = model.classify_sequence(&seq)?;
    Ok((dist.argmax(), dist))
}

/// One line of the inference prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferencePrediction {
    pub instance_id: String,
    pub mode: InferenceMode,
    pub selected_label_input: Option<Label>,
    pub predicted_label: Label,
    pub probs: [f64; 3],
}
