//! Rationale-bracketed generation prompts, label-blind generator training
//! and per-label explanation generation.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::backends::GeneratorBackend;
use crate::corpus::{AnnotatedInstance, NliInstance, RationaleMask};
use crate::error::{Error, Result};
use crate::label::{Label, PerLabel};
use crate::rationalizer::{build_hypothesis_sequence, RationalizerModel};
use crate::scalar::Scalar;
use crate::training::TrainingConfig;
use crate::text::{word_core, word_spans, Token};

/// Substituted when the generator produces nothing.
pub const EMPTY_EXPLANATION: &str = "no explanation";
pub const FLAG_EMPTY_GENERATION: &str = "empty_generation";

/// Rationale flags over the whitespace-delimited words of a hypothesis.
pub type WordMask = Vec<bool>;

/// A word is a rationale word when any of its tokens is labelled 1.
/// `tokens` must carry byte spans into `hypothesis` and align with `mask`.
pub fn project_to_words(hypothesis: &str, tokens: &[Token], mask: &RationaleMask) -> Result<WordMask> {
    if tokens.len() != mask.len() {
        return Err(Error::Consistency(format!(
            "rationale mask has {} entries for {} tokens",
            mask.len(),
            tokens.len()
        )));
    }
    let words = word_spans(hypothesis);
    let mut out = vec![false; words.len()];
    for (t, &y) in tokens.iter().zip(&mask.token_labels) {
        let (Some((s, e)), 1) = (t.span, y) else { continue };
        if e > hypothesis.len() {
            return Err(Error::Consistency(format!("token `{}` lies outside the hypothesis", t.text)));
        }
        for (w, &(ws, we)) in words.iter().enumerate() {
            if s < we && ws < e {
                out[w] = true;
            }
        }
    }
    Ok(out)
}

/// Word mask of a rationalizer output for `hypothesis`.
pub fn word_mask_for<T: Scalar>(rationalizer: &RationalizerModel<T>, hypothesis: &str, mask: &RationaleMask) -> Result<WordMask> {
    let seq = build_hypothesis_sequence(rationalizer.tokenizer(), hypothesis);
    project_to_words(hypothesis, &seq.tokens, mask)
}

/// Texts of the marked words (their alphanumeric cores).
pub fn rationale_words(hypothesis: &str, mask: &[bool]) -> Vec<String> {
    word_spans(hypothesis)
        .into_iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|((s, e), _)| {
            let (cs, ce) = word_core(&hypothesis[s..e]);
            hypothesis[s + cs..s + ce].to_string()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationPrompt {
    pub premise: String,
    pub hypothesis: String,
    pub word_mask: WordMask,
    pub explanation: Option<String>,
}

fn check_field(what: &str, text: &str, line: usize) -> Result<()> {
    if text.contains('\n') || text.contains('\r') {
        return Err(Error::PromptParse {
            line,
            reason: format!("{what} contains a line break"),
        });
    }
    Ok(())
}

fn bracketed(hypothesis: &str, mask: &[bool]) -> String {
    let mut out = String::with_capacity(hypothesis.len() + 4 * mask.len());
    let mut last = 0;
    for ((s, e), &m) in word_spans(hypothesis).into_iter().zip(mask) {
        out.push_str(&hypothesis[last..s]);
        let word = &hypothesis[s..e];
        if m {
            let (cs, ce) = word_core(word);
            out.push_str(&word[..cs]);
            out.push('[');
            out.push_str(&word[cs..ce]);
            out.push(']');
            out.push_str(&word[ce..]);
        } else {
            out.push_str(word);
        }
        last = e;
    }
    out.push_str(&hypothesis[last..]);
    out
}

/// `Premise: P\nHypothesis: H*\nExplanation:` with ` E` appended when
/// given. Rationale words of `H*` carry square brackets around their
/// alphanumeric core. The label never appears.
pub fn build_prompt(premise: &str, hypothesis: &str, mask: &[bool], explanation: Option<&str>) -> Result<String> {
    check_field("premise", premise, 1)?;
    check_field("hypothesis", hypothesis, 2)?;
    if hypothesis.contains(['[', ']']) {
        return Err(Error::PromptParse {
            line: 2,
            reason: "hypothesis contains a square bracket".into(),
        });
    }
    let words = word_spans(hypothesis).len();
    if mask.len() != words {
        return Err(Error::Consistency(format!(
            "word mask has {} entries for {words} hypothesis words",
            mask.len()
        )));
    }
    let mut out = format!("Premise: {premise}\nHypothesis: {}\nExplanation:", bracketed(hypothesis, mask));
    if let Some(e) = explanation {
        check_field("explanation", e, 3)?;
        if e.trim().is_empty() {
            return Err(Error::PromptParse {
                line: 3,
                reason: "explanation is empty".into(),
            });
        }
        out.push(' ');
        out.push_str(e);
    }
    Ok(out)
}

fn unbracket_word(word: &str) -> Option<(String, bool)> {
    let opens = word.matches('[').count();
    let closes = word.matches(']').count();
    match (opens, closes) {
        (0, 0) => Some((word.to_string(), false)),
        (1, 1) => {
            let o = word.find('[')?;
            let c = word.find(']')?;
            if c <= o + 1 {
                return None;
            }
            let plain = format!("{}{}{}", &word[..o], &word[o + 1..c], &word[c + 1..]);
            Some((plain, true))
        }
        _ => None,
    }
}

/// Inverse of [`build_prompt`] on its image.
pub fn parse_prompt(text: &str) -> Result<GenerationPrompt> {
    let lines: Vec<&str> = text.split('\n').collect();
    let err = |line: usize, reason: &str| Error::PromptParse {
        line,
        reason: reason.to_string(),
    };
    let premise = lines
        .first()
        .and_then(|l| l.strip_prefix("Premise: "))
        .ok_or_else(|| err(1, "expected `Premise: `"))?;
    let hyp_line = lines
        .get(1)
        .and_then(|l| l.strip_prefix("Hypothesis: "))
        .ok_or_else(|| err(2, "expected `Hypothesis: `"))?;
    let expl_line = lines.get(2).ok_or_else(|| err(3, "missing `Explanation:` line"))?;
    if lines.len() > 3 {
        return Err(err(4, "unexpected text after the explanation line"));
    }
    let explanation = match expl_line.strip_prefix("Explanation:") {
        Some("") => None,
        Some(rest) => Some(
            rest.strip_prefix(' ')
                .ok_or_else(|| err(3, "expected a space after `Explanation:`"))?
                .to_string(),
        ),
        None => return Err(err(3, "expected `Explanation:`")),
    };

    let mut hypothesis = String::with_capacity(hyp_line.len());
    let mut mask = Vec::new();
    let mut last = 0;
    for (s, e) in word_spans(hyp_line) {
        hypothesis.push_str(&hyp_line[last..s]);
        let (plain, marked) =
            unbracket_word(&hyp_line[s..e]).ok_or_else(|| err(2, "malformed rationale brackets"))?;
        hypothesis.push_str(&plain);
        mask.push(marked);
        last = e;
    }
    hypothesis.push_str(&hyp_line[last..]);

    let rebuilt = build_prompt(premise, &hypothesis, &mask, explanation.as_deref())
        .map_err(|_| err(2, "prompt is not in canonical form"))?;
    if rebuilt != text {
        return Err(err(2, "rationale brackets must enclose the alphanumeric core of a word"));
    }
    Ok(GenerationPrompt {
        premise: premise.to_string(),
        hypothesis,
        word_mask: mask,
        explanation,
    })
}

/// Training prompts with gold highlights and gold explanations.
pub fn training_prompts(data: &[AnnotatedInstance]) -> Result<Vec<String>> {
    data.iter()
        .map(|a| {
            build_prompt(
                &a.base.premise,
                &a.base.hypothesis,
                &a.word_mask(),
                Some(&a.gold_explanation),
            )
        })
        .collect()
}

/// Fine-tunes one generator for all labels. Fails before training when any
/// instance is in `held_out`.
pub fn train_generator<G: GeneratorBackend>(
    backend: &mut G,
    data: &[AnnotatedInstance],
    held_out: Option<&HashSet<String>>,
    config: &TrainingConfig,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Empty("generator training set"));
    }
    if let Some(ids) = held_out {
        if let Some(a) = data.iter().find(|a| ids.contains(a.id())) {
            return Err(Error::Consistency(format!(
                "{} is a held-out non-informative instance and cannot train the generator",
                a.id()
            )));
        }
    }
    let prompts = training_prompts(data)?;
    backend.fine_tune(&prompts, config)
}

/// Decoded continuation after `Explanation:`, trimmed.
pub fn generate_explanation<G: GeneratorBackend>(
    backend: &G,
    premise: &str,
    hypothesis: &str,
    mask: &[bool],
) -> Result<String> {
    if !backend.is_trained() {
        return Err(Error::Untrained("generator"));
    }
    let prompt = build_prompt(premise, hypothesis, mask, None)?;
    let text = backend.greedy_decode(&prompt)?;
    let text = text.trim();
    if text.is_empty() {
        return Err(Error::EmptyGeneration);
    }
    Ok(text.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplanationTriple {
    pub by_label: PerLabel<String>,
    pub rationale_by_label: PerLabel<RationaleMask>,
    pub word_mask_by_label: PerLabel<WordMask>,
}

/// One explanation per candidate label, each conditioned on that label's
/// predicted rationales. Gold explanations are never consulted.
pub fn generate_triple<T: Scalar, G: GeneratorBackend>(
    rationalizer: &RationalizerModel<T>,
    backend: &G,
    instance: &NliInstance,
) -> Result<ExplanationTriple> {
    let tag = |label: Label| move |e: Error| Error::ForLabel {
        label,
        source: Box::new(e),
    };
    let rationale_by_label = PerLabel::try_from_fn(|l| rationalizer.predict_rationales(l, instance).map_err(tag(l)))?;
    let word_mask_by_label = PerLabel::try_from_fn(|l| {
        word_mask_for(rationalizer, &instance.hypothesis, rationale_by_label.get(l)).map_err(tag(l))
    })?;
    let by_label = PerLabel::try_from_fn(|l| {
        generate_explanation(backend, &instance.premise, &instance.hypothesis, word_mask_by_label.get(l))
            .map_err(tag(l))
    })?;
    Ok(ExplanationTriple {
        by_label,
        rationale_by_label,
        word_mask_by_label,
    })
}

/// One line of the explanation cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub instance_id: String,
    pub label: Label,
    pub rationale_words: Vec<String>,
    pub word_mask: Vec<bool>,
    pub explanation: String,
    #[serde(default)]
    pub flags: Vec<String>,
}

/// Cache records for all three labels of one instance. An empty generation
/// becomes [`EMPTY_EXPLANATION`] with a flag instead of an error.
pub fn explanation_records<T: Scalar, G: GeneratorBackend>(
    rationalizer: &RationalizerModel<T>,
    backend: &G,
    instance: &NliInstance,
) -> Result<Vec<ExplanationRecord>> {
    Label::ALL
        .iter()
        .map(|&label| {
            let tag = |e: Error| Error::ForLabel {
                label,
                source: Box::new(e),
            };
            let mask = rationalizer.predict_rationales(label, instance).map_err(tag)?;
            let words = word_mask_for(rationalizer, &instance.hypothesis, &mask).map_err(tag)?;
            let mut flags = Vec::new();
            let explanation = match generate_explanation(backend, &instance.premise, &instance.hypothesis, &words) {
                Ok(e) => e,
                Err(Error::EmptyGeneration) => {
                    log::warn!("{} [{label}]: empty generation, using sentinel", instance.instance_id);
                    flags.push(FLAG_EMPTY_GENERATION.to_string());
                    EMPTY_EXPLANATION.to_string()
                }
                Err(e) => return Err(tag(e)),
            };
            Ok(ExplanationRecord {
                instance_id: instance.instance_id.clone(),
                label,
                rationale_words: rationale_words(&instance.hypothesis, &words),
                word_mask: words,
                explanation,
                flags,
            })
        })
        .collect()
}

/// True when `prompt` mentions a label word that is not already part of
/// the premise or hypothesis.
pub fn leaks_label(prompt: &str, premise: &str, hypothesis: &str) -> bool {
    let lower = prompt.to_lowercase();
    let source = format!("{premise}\n{hypothesis}").to_lowercase();
    Label::ALL
        .iter()
        .any(|l| lower.contains(l.as_str()) && !source.contains(l.as_str()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::WordTokenizer;

    #[test]
    fn brackets_whole_words() {
        let p = build_prompt(
            "A man playing an electric guitar on stage.",
            "A man is playing a musical instrument.",
            &[false, false, false, true, false, true, true],
            None,
        )
        .unwrap();
        assert_eq!(
            p,
            "Premise: A man playing an electric guitar on stage.\n\
             Hypothesis: A man is [playing] a [musical] [instrument].\nExplanation:"
        );
        let parsed = parse_prompt(&p).unwrap();
        assert_eq!(parsed.hypothesis, "A man is playing a musical instrument.");
        assert_eq!(parsed.explanation, None);
    }

    #[test]
    fn empty_mask_leaves_hypothesis_alone() {
        let p = build_prompt("P.", "Two dogs run.", &[false; 3], Some("Dogs run.")).unwrap();
        assert_eq!(p, "Premise: P.\nHypothesis: Two dogs run.\nExplanation: Dogs run.");
        let back = parse_prompt(&p).unwrap();
        assert_eq!(back.explanation.as_deref(), Some("Dogs run."));
        assert_eq!(back.word_mask, vec![false; 3]);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let e = parse_prompt("Premise: a\nHypothesis: b").unwrap_err();
        assert!(matches!(e, Error::PromptParse { line: 3, .. }));
        let e = parse_prompt("Premise: a\nHypothesis: a [b c\nExplanation:").unwrap_err();
        assert!(matches!(e, Error::PromptParse { line: 2, .. }));
        let e = parse_prompt("Premise: a\nHypothesis: x[b]y\nExplanation:").unwrap_err();
        assert!(matches!(e, Error::PromptParse { line: 2, .. }));
        let e = parse_prompt("Premise a\nHypothesis: b\nExplanation:").unwrap_err();
        assert!(matches!(e, Error::PromptParse { line: 1, .. }));
        assert!(build_prompt("a", "b [c]", &[false, false], None).is_err());
        assert!(build_prompt("a", "b c", &[false], None).is_err());
    }

    #[test]
    fn token_masks_project_to_words() {
        let tok = WordTokenizer::fit(["a dog's toy."]);
        let hyp = "A dog's toy.";
        let seq = build_hypothesis_sequence(&tok, hyp);
        // <s> A dog ' s toy . <s>
        let mask = RationaleMask::from_labels(vec![0, 0, 0, 0, 1, 0, 0, 0]);
        let words = project_to_words(hyp, &seq.tokens, &mask).unwrap();
        assert_eq!(words, vec![false, true, false]);
        assert_eq!(rationale_words(hyp, &words), vec!["dog's"]);
        assert!(project_to_words(hyp, &seq.tokens, &RationaleMask::from_labels(vec![0])).is_err());
    }

    #[test]
    fn label_leak_detection() {
        assert!(!leaks_label("Premise: a\nHypothesis: b\nExplanation:", "a", "b"));
        assert!(leaks_label("Premise: a neutral b", "a", "b"));
        assert!(!leaks_label("Premise: a neutral b", "a neutral b", "c"));
    }
}
