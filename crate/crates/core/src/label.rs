//! NLI labels, per-label containers and label distributions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Gold or candidate NLI label. The declaration order is the global
/// component order used by every distribution and by all tie-breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Entailment,
    Neutral,
    Contradiction,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Entailment, Label::Neutral, Label::Contradiction];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Self::ALL.get(i).copied()
    }

    /// Word inserted into the rationalizer premise sequence.
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Entailment => "entailment",
            Label::Neutral => "neutral",
            Label::Contradiction => "contradiction",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "entailment" | "entail" | "e" => Ok(Label::Entailment),
            "neutral" | "n" => Ok(Label::Neutral),
            "contradiction" | "contradict" | "c" => Ok(Label::Contradiction),
            other => Err(Error::UnknownLabel(other.to_string())),
        }
    }
}

/// One value per label, always all three.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PerLabel<V> {
    pub entailment: V,
    pub neutral: V,
    pub contradiction: V,
}

impl<V> PerLabel<V> {
    pub fn from_fn(mut f: impl FnMut(Label) -> V) -> Self {
        PerLabel {
            entailment: f(Label::Entailment),
            neutral: f(Label::Neutral),
            contradiction: f(Label::Contradiction),
        }
    }

    pub fn try_from_fn<E>(mut f: impl FnMut(Label) -> Result<V, E>) -> Result<Self, E> {
        Ok(PerLabel {
            entailment: f(Label::Entailment)?,
            neutral: f(Label::Neutral)?,
            contradiction: f(Label::Contradiction)?,
        })
    }

    pub fn get(&self, label: Label) -> &V {
        match label {
            Label::Entailment => &self.entailment,
            Label::Neutral => &self.neutral,
            Label::Contradiction => &self.contradiction,
        }
    }

    pub fn get_mut(&mut self, label: Label) -> &mut V {
        match label {
            Label::Entailment => &mut self.entailment,
            Label::Neutral => &mut self.neutral,
            Label::Contradiction => &mut self.contradiction,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Label, &V)> {
        Label::ALL.into_iter().map(move |l| (l, self.get(l)))
    }

    pub fn map<U>(&self, mut f: impl FnMut(Label, &V) -> U) -> PerLabel<U> {
        PerLabel::from_fn(|l| f(l, self.get(l)))
    }
}

/// Probability vector over (entailment, neutral, contradiction).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct LabelDistribution<T> {
    probs: [T; 3],
}

impl<T: Scalar> LabelDistribution<T> {
    pub const TOLERANCE: f64 = 1e-6;

    pub fn new(probs: [T; 3]) -> Result<Self> {
        let mut sum = 0.0;
        for p in probs {
            let p = p.as_f64();
            if !(0.0..=1.0).contains(&p) || p.is_nan() {
                return Err(Error::Distribution(format!("component {p} outside [0, 1]")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > Self::TOLERANCE {
            return Err(Error::Distribution(format!("components sum to {sum}")));
        }
        Ok(LabelDistribution { probs })
    }

    pub fn uniform() -> Self {
        let third = T::one() / T::of(3.0);
        LabelDistribution {
            probs: [third; 3],
        }
    }

    pub fn one_hot(label: Label) -> Self {
        let mut probs = [T::zero(); 3];
        probs[label.index()] = T::one();
        LabelDistribution { probs }
    }

    /// Softmax over three logits.
    pub fn from_logits(logits: [T; 3]) -> Self {
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let exps = logits.map(|z| (z - max).exp());
        let total = exps[0] + exps[1] + exps[2];
        LabelDistribution {
            probs: exps.map(|e| e / total),
        }
    }

    pub fn probs(&self) -> [T; 3] {
        self.probs
    }

    pub fn prob(&self, label: Label) -> T {
        self.probs[label.index()]
    }

    /// Most probable label; exact ties go to the earliest label in
    /// (entailment, neutral, contradiction) order.
    pub fn argmax(&self) -> Label {
        let mut best = 0;
        for i in 1..3 {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        Label::ALL[best]
    }

    pub fn to_f64(&self) -> [f64; 3] {
        self.probs.map(Scalar::as_f64)
    }

    pub fn cast<U: Scalar>(&self) -> LabelDistribution<U> {
        LabelDistribution {
            probs: self.probs.map(|p| U::of(p.as_f64())),
        }
    }
}
