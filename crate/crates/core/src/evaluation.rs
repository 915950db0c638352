//! Metrics, faithfulness and spurious-explanation probes, and the
//! terminal-driven annotation session.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{NliInstance, RationaleMask};
use crate::error::{Error, Result};
use crate::inference::{predict, InferenceInput, InferenceMode};
use crate::io::{append_jsonl, read_jsonl};
use crate::label::{Label, LabelDistribution, PerLabel};
use crate::scalar::Scalar;
use crate::selector::{select_max, NliClassifier};

pub fn accuracy(preds: &[Label], golds: &[Label]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::Consistency(format!(
            "{} predictions for {} gold labels",
            preds.len(),
            golds.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Empty("accuracy inputs"));
    }
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Share of the most frequent label.
pub fn majority_baseline(golds: &[Label]) -> Result<f64> {
    if golds.is_empty() {
        return Err(Error::Empty("gold labels"));
    }
    let counts = PerLabel::from_fn(|l| golds.iter().filter(|&&g| g == l).count());
    let best = counts.iter().map(|(_, &c)| c).max().unwrap_or(0);
    Ok(best as f64 / golds.len() as f64)
}

/// Pooled token confusion counts with the derived rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenPrf {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Micro-averaged precision, recall and F1 of rationale tokens.
pub fn token_prf(preds: &[RationaleMask], golds: &[RationaleMask]) -> Result<TokenPrf> {
    if preds.len() != golds.len() {
        return Err(Error::Consistency(format!("{} predicted masks for {} gold masks", preds.len(), golds.len())));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (i, (p, g)) in preds.iter().zip(golds).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Consistency(format!(
                "mask pair {i}: {} predicted vs {} gold tokens",
                p.len(),
                g.len()
            )));
        }
        for (&a, &b) in p.token_labels.iter().zip(&g.token_labels) {
            match (a != 0, b != 0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    // harmonic mean of precision and recall, in count form
    let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
    Ok(TokenPrf {
        tp,
        fp,
        fn_,
        precision,
        recall,
        f1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub values: BTreeMap<String, f64>,
    pub n: usize,
    pub seed: u64,
}

impl MetricReport {
    pub fn new(name: impl Into<String>, n: usize, seed: u64) -> Self {
        MetricReport {
            name: name.into(),
            values: BTreeMap::new(),
            n,
            seed,
        }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.values.insert(key.to_string(), value);
        self
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} (n={}, seed={})", self.name, self.n, self.seed)?;
        let width = self.values.keys().map(String::len).max().unwrap_or(0);
        for (k, v) in &self.values {
            writeln!(f, "  {k:<width$}  {v:>8.4}")?;
        }
        Ok(())
    }
}

/// An evaluation instance with the explanation chosen for it.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplainedInstance {
    pub instance: NliInstance,
    pub explanation: String,
}

fn mode_accuracy<T: Scalar>(model: &NliClassifier<T>, mode: InferenceMode, data: &[ExplainedInstance]) -> Result<f64> {
    let preds = data
        .iter()
        .map(|d| {
            let input = InferenceInput::for_mode(mode, &d.instance.premise, &d.instance.hypothesis, &d.explanation);
            predict(model, &input).map(|(l, _)| l)
        })
        .collect::<Result<Vec<_>>>()?;
    let golds: Vec<Label> = data.iter().map(|d| d.instance.gold_label).collect();
    accuracy(&preds, &golds)
}

/// Accuracy with data and explanation (`all`), data only (`base`) and
/// explanation only (`expl`), plus the two gaps.
pub fn faithfulness_probe<T: Scalar>(
    models: &[(InferenceMode, &NliClassifier<T>)],
    data: &[ExplainedInstance],
    seed: u64,
) -> Result<MetricReport> {
    if data.is_empty() {
        return Err(Error::Empty("faithfulness dataset"));
    }
    let find = |mode: InferenceMode| {
        models
            .iter()
            .find(|(m, _)| *m == mode)
            .map(|(_, model)| *model)
            .ok_or_else(|| Error::Consistency(format!("faithfulness probe needs a `{mode}` model")))
    };
    let de = mode_accuracy(find(InferenceMode::All)?, InferenceMode::All, data)?;
    let d = mode_accuracy(find(InferenceMode::Base)?, InferenceMode::Base, data)?;
    let e = mode_accuracy(find(InferenceMode::Expl)?, InferenceMode::Expl, data)?;
    let golds: Vec<Label> = data.iter().map(|x| x.instance.gold_label).collect();
    Ok(MetricReport::new("faithfulness", data.len(), seed)
        .with("acc_d_e", de)
        .with("acc_d", d)
        .with("acc_e", e)
        .with("delta_de_minus_d", de - d)
        .with("delta_de_minus_e", de - e)
        .with("majority", majority_baseline(&golds)?))
}

/// An instance with its three candidate explanations and the selector's
/// distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateInstance<T> {
    pub instance: NliInstance,
    pub explanations: PerLabel<String>,
    pub dist: LabelDistribution<T>,
}

/// Accuracy of `model` when fed the best-selected explanation versus one
/// picked uniformly at random per instance.
pub fn spurious_probe<T: Scalar>(
    model: &NliClassifier<T>,
    mode: InferenceMode,
    data: &[CandidateInstance<T>],
    seed: u64,
) -> Result<MetricReport> {
    if data.is_empty() {
        return Err(Error::Empty("spurious probe dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = Vec::with_capacity(data.len());
    let mut rand = Vec::with_capacity(data.len());
    for c in data {
        let (_, e) = select_max(&c.explanations, &c.dist);
        best.push(ExplainedInstance {
            instance: c.instance.clone(),
            explanation: e.clone(),
        });
        let pick = Label::ALL[rng.random_range(0..3)];
        rand.push(ExplainedInstance {
            instance: c.instance.clone(),
            explanation: c.explanations.get(pick).clone(),
        });
    }
    let b = mode_accuracy(model, mode, &best)?;
    let r = mode_accuracy(model, mode, &rand)?;
    Ok(MetricReport::new("spurious", data.len(), seed)
        .with("acc_best", b)
        .with("acc_rand", r)
        .with("gap", b - r))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Question {
    RationaleContainsKeyInfo,
    ExplanationContainsRationaleInfo,
}

impl Question {
    pub fn text(self) -> &'static str {
        match self {
            Question::RationaleContainsKeyInfo => {
                "Do the predicted rationales contain the key information of the gold rationales?"
            }
            Question::ExplanationContainsRationaleInfo => {
                "Is the information of the rationales contained in the explanation?"
            }
        }
    }
}

impl std::str::FromStr for Question {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rationale" | "rationale_contains_key_info" => Ok(Question::RationaleContainsKeyInfo),
            "relevance" | "explanation_contains_rationale_info" => Ok(Question::ExplanationContainsRationaleInfo),
            other => Err(Error::Config(format!("question `{other}`: expected rationale or relevance"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub instance_id: String,
    pub annotator_id: String,
    pub question: Question,
    pub judgment: u8,
    pub timestamp: u64,
}

/// What an annotator is shown for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub instance_id: String,
    pub premise: String,
    pub hypothesis: String,
    pub rationale_words: Vec<String>,
    #[serde(default)]
    pub gold_rationale_words: Vec<String>,
    #[serde(default)]
    pub explanation: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutcome {
    /// Every record of this annotator and question, earlier sessions included.
    pub records: Vec<AnnotationRecord>,
    pub completed: bool,
}

fn show<W: Write>(out: &mut W, i: usize, total: usize, s: &EvalSample, q: Question) -> std::io::Result<()> {
    writeln!(out, "\n[{}/{total}] {}", i + 1, s.instance_id)?;
    writeln!(out, "Premise:    {}", s.premise)?;
    writeln!(out, "Hypothesis: {}", s.hypothesis)?;
    writeln!(out, "Rationales: {}", s.rationale_words.join(", "))?;
    if q == Question::RationaleContainsKeyInfo {
        writeln!(out, "Gold:       {}", s.gold_rationale_words.join(", "))?;
    }
    if let Some(e) = &s.explanation {
        writeln!(out, "Explanation: {e}")?;
    }
    writeln!(out, "{}", q.text())?;
    write!(out, "[y/n, q to stop] > ")?;
    out.flush()
}

/// Asks `question` about each sample not yet judged by `annotator` in
/// `path`, appending each answer to `path` as soon as it is given. Stops
/// early on `q` or end of input.
pub fn human_eval_session<R: BufRead, W: Write>(
    samples: &[EvalSample],
    question: Question,
    annotator: &str,
    path: &Path,
    input: &mut R,
    output: &mut W,
) -> Result<SessionOutcome> {
    let mine = |r: &AnnotationRecord| r.annotator_id == annotator && r.question == question;
    let mut records: Vec<AnnotationRecord> = if path.exists() {
        read_jsonl::<AnnotationRecord>(path)?.into_iter().filter(|r| mine(r)).collect()
    } else {
        Vec::new()
    };
    let done: HashSet<String> = records.iter().map(|r| r.instance_id.clone()).collect();
    let pending: Vec<&EvalSample> = samples.iter().filter(|s| !done.contains(&s.instance_id)).collect();
    let io_err = |e| Error::io(path, e);
    let offset = samples.len() - pending.len();
    for (k, sample) in pending.into_iter().enumerate() {
        let judgment = loop {
            show(output, offset + k, samples.len(), sample, question).map_err(io_err)?;
            let mut line = String::new();
            if input.read_line(&mut line).map_err(io_err)? == 0 {
                return Ok(SessionOutcome {
                    records,
                    completed: false,
                });
            }
            match line.trim().to_ascii_lowercase().as_str() {
                "y" | "yes" => break 1,
                "n" | "no" => break 0,
                "q" | "quit" => {
                    return Ok(SessionOutcome {
                        records,
                        completed: false,
                    })
                }
                _ => writeln!(output, "please answer y or n").map_err(io_err)?,
            }
        };
        let record = AnnotationRecord {
            instance_id: sample.instance_id.clone(),
            annotator_id: annotator.to_string(),
            question,
            judgment,
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        };
        append_jsonl(path, &record)?;
        records.push(record);
    }
    Ok(SessionOutcome {
        records,
        completed: true,
    })
}

/// Raw agreement and Cohen's kappa of two annotators over the same ids.
/// Kappa is 1.0 when chance agreement is 1 and the annotators agree fully.
pub fn agreement(a: &[AnnotationRecord], b: &[AnnotationRecord]) -> Result<(f64, f64)> {
    let index = |rs: &[AnnotationRecord]| -> Result<HashMap<String, u8>> {
        let mut m = HashMap::new();
        for r in rs {
            if r.judgment > 1 {
                return Err(Error::Consistency(format!("{}: judgment {} is not binary", r.instance_id, r.judgment)));
            }
            if m.insert(r.instance_id.clone(), r.judgment).is_some() {
                return Err(Error::Consistency(format!("{} judged twice by one annotator", r.instance_id)));
            }
        }
        Ok(m)
    };
    let (ma, mb) = (index(a)?, index(b)?);
    if ma.is_empty() {
        return Err(Error::Empty("annotation records"));
    }
    let ids_a: HashSet<&String> = ma.keys().collect();
    let ids_b: HashSet<&String> = mb.keys().collect();
    if ids_a != ids_b {
        return Err(Error::Consistency("annotators judged different instance sets".into()));
    }
    let n = ma.len() as f64;
    let mut agree = 0.0;
    let (mut pos_a, mut pos_b) = (0.0, 0.0);
    for (id, &ja) in &ma {
        let jb = mb[id];
        agree += f64::from(u8::from(ja == jb));
        pos_a += f64::from(ja);
        pos_b += f64::from(jb);
    }
    let po = agree / n;
    let (pa, pb) = (pos_a / n, pos_b / n);
    let pe = pa * pb + (1.0 - pa) * (1.0 - pb);
    let kappa = if (1.0 - pe).abs() < 1e-12 {
        if po == 1.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (po - pe) / (1.0 - pe)
    };
    Ok((po, kappa))
}
