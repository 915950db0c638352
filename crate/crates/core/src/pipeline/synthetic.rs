//! Templated e-SNLI style corpus for desk-scale runs. In every template the
//! highlighted hypothesis word is the one that decides the label.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{AnnotatedInstance, NliInstance};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::label::Label;

pub const MIN_INSTANCES: usize = 30;

const PERSONS: &[&str] = &["man", "woman", "boy", "girl", "worker", "chef", "student", "child"];
const VERBS: &[&str] = &["holding", "carrying", "throwing", "painting", "cleaning", "lifting"];
const COLORS: &[&str] = &["red", "blue", "green", "yellow", "black", "white"];
const OBJECTS: &[(&str, &str)] = &[
    ("ball", "toy"),
    ("kite", "toy"),
    ("chair", "piece of furniture"),
    ("table", "piece of furniture"),
    ("box", "container"),
    ("bottle", "container"),
];
const PLACES: &[&str] = &["park", "beach", "street", "garden", "field"];
const PURPOSES: &[&str] = &["picnic", "race", "party", "concert"];
const RECIPIENTS: &[&str] = &["friend", "teacher", "neighbor", "brother"];
const ANIMALS: &[&str] = &["dogs", "cats", "birds", "horses", "sheep"];
const ACTIVITIES: &[&str] = &["running", "sleeping", "playing", "eating"];
const NUMBERS: &[&str] = &["Two", "Three", "Four", "Five"];
const ANIMAL_ADJS: &[&str] = &["young", "hungry", "tired", "small"];
const OBJECT_ADJS: &[&str] = &["expensive", "heavy", "old", "new"];

/// Share of instances whose explanation just restates the hypothesis.
const RESTATEMENT_RATE: f64 = 0.04;

struct Draft {
    premise: String,
    hypothesis: String,
    highlight: Vec<usize>,
    explanation: String,
}

fn pick<'a, T, R: Rng>(rng: &mut R, items: &'a [T]) -> &'a T {
    &items[rng.random_range(0..items.len())]
}

fn word_index(hypothesis: &str, word: &str) -> usize {
    hypothesis
        .split_whitespace()
        .position(|w| w.trim_end_matches('.') == word)
        .expect("template word present")
}

fn draft(hypothesis: String, premise: String, marked: &[&str], explanation: String) -> Draft {
    let highlight = marked.iter().map(|w| word_index(&hypothesis, w)).collect();
    Draft {
        premise,
        hypothesis,
        highlight,
        explanation,
    }
}

fn location<R: Rng>(rng: &mut R, label: Label) -> Draft {
    let (person, verb, color) = (pick(rng, PERSONS), pick(rng, VERBS), pick(rng, COLORS));
    let (object, _) = pick(rng, OBJECTS);
    let place = pick(rng, PLACES);
    let premise = format!("A {person} is {verb} a {color} {object} in the {place}.");
    match label {
        Label::Entailment => draft(
            format!("A {person} is {verb} a {object} outdoors."),
            premise,
            &["outdoors"],
            format!("The {place} is outdoors."),
        ),
        Label::Neutral => {
            let purpose = pick(rng, PURPOSES);
            draft(
                format!("A {person} is {verb} a {object} for a {purpose}."),
                premise,
                &[purpose],
                format!("Being in the {place} is not necessarily for a {purpose}."),
            )
        }
        Label::Contradiction => draft(
            format!("A {person} is {verb} a {object} indoors."),
            premise,
            &["indoors"],
            format!("Someone in the {place} cannot be indoors."),
        ),
    }
}

fn count<R: Rng>(rng: &mut R, label: Label) -> Draft {
    let (number, animals, act) = (pick(rng, NUMBERS), pick(rng, ANIMALS), pick(rng, ACTIVITIES));
    let place = pick(rng, PLACES);
    let premise = format!("{number} {animals} are {act} in the {place}.");
    let lower = number.to_lowercase();
    match label {
        Label::Entailment => draft(
            format!("Some {animals} are {act}."),
            premise,
            &["Some"],
            format!("{number} {animals} are also some {animals}."),
        ),
        Label::Neutral => {
            let adj = pick(rng, ANIMAL_ADJS);
            draft(
                format!("{number} {adj} {animals} are {act}."),
                premise,
                &[adj],
                format!("The {animals} are not necessarily {adj}."),
            )
        }
        Label::Contradiction => draft(
            format!("No {animals} are {act}."),
            premise,
            &["No"],
            format!("If {lower} {animals} are {act} there cannot be no {animals} {act}."),
        ),
    }
}

fn object<R: Rng>(rng: &mut R, label: Label) -> Draft {
    let (person, verb) = (pick(rng, PERSONS), pick(rng, VERBS));
    let (object, kind) = pick(rng, OBJECTS);
    let place = pick(rng, PLACES);
    let premise = format!("A {person} is {verb} a {object} near the {place}.");
    match label {
        Label::Entailment => {
            let head = kind.rsplit(' ').next().unwrap_or(kind);
            draft(
                format!("A {person} is {verb} a {kind}."),
                premise,
                &[head],
                format!("A {object} is a kind of {kind}."),
            )
        }
        Label::Neutral => {
            let recipient = pick(rng, RECIPIENTS);
            draft(
                format!("A {person} is {verb} a {object} for a {recipient}."),
                premise,
                &[recipient],
                format!("The {object} is not necessarily for a {recipient}."),
            )
        }
        Label::Contradiction => draft(
            format!("A {person} is {verb} nothing."),
            premise,
            &["nothing"],
            format!("Someone {verb} a {object} cannot be {verb} nothing."),
        ),
    }
}

fn color<R: Rng>(rng: &mut R, label: Label) -> Draft {
    let (person, verb, color) = (pick(rng, PERSONS), pick(rng, VERBS), pick(rng, COLORS));
    let (object, _) = pick(rng, OBJECTS);
    let premise = format!("A {person} is {verb} a {color} {object}.");
    match label {
        Label::Entailment => draft(
            format!("The {object} is {color}."),
            premise,
            &[color],
            format!("A {color} {object} is {color}."),
        ),
        Label::Neutral => {
            let adj = pick(rng, OBJECT_ADJS);
            draft(
                format!("The {object} is {adj}."),
                premise,
                &[adj],
                format!("A {color} {object} is not necessarily {adj}."),
            )
        }
        Label::Contradiction => {
            let other = loop {
                let c = pick(rng, COLORS);
                if c != color {
                    break c;
                }
            };
            draft(
                format!("The {object} is {other}."),
                premise,
                &[other],
                format!("A {color} {object} cannot be {other}."),
            )
        }
    }
}

/// `n` instances with labels balanced within one. Ids are
/// `syn-{seed}-{index}` in output order.
pub fn make_synthetic_corpus(seed: u64, n: usize) -> Result<Vec<AnnotatedInstance>> {
    if n < MIN_INSTANCES {
        return Err(Error::Config(format!(
            "synthetic corpus needs at least {MIN_INSTANCES} instances, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<Label> = (0..n).map(|i| Label::ALL[i % 3]).collect();
    labels.shuffle(&mut rng);
    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let family: f64 = rng.random();
            let mut d = if family < 0.3 {
                location(&mut rng, label)
            } else if family < 0.6 {
                count(&mut rng, label)
            } else if family < 0.9 {
                object(&mut rng, label)
            } else {
                color(&mut rng, label)
            };
            if rng.random::<f64>() < RESTATEMENT_RATE {
                d.explanation = d.hypothesis.clone();
            }
            let spans = d.highlight.iter().map(|&w| (w, w + 1)).collect();
            let base = NliInstance::new(format!("syn-{seed}-{i:05}"), &d.premise, &d.hypothesis, label)?;
            AnnotatedInstance::new(base, spans, &d.explanation)
        })
        .collect()
}

/// Train/dev/test partition in 70/15/15 proportions, in corpus order.
pub fn split_corpus(mut all: Vec<AnnotatedInstance>) -> (Vec<AnnotatedInstance>, Vec<AnnotatedInstance>, Vec<AnnotatedInstance>) {
    let n = all.len();
    let dev_n = n * 15 / 100;
    let train_n = n - 2 * dev_n;
    let test = all.split_off(train_n + dev_n);
    let dev = all.split_off(train_n);
    (all, dev, test)
}

/// Writes instances in the e-SNLI column layout.
pub fn write_esnli_csv(path: &Path, instances: &[AnnotatedInstance]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    w.write_record([
        "pairID",
        "gold_label",
        "Sentence1",
        "Sentence2",
        "Explanation_1",
        "Sentence2_Highlighted_1",
    ])
    .map_err(csv_err)?;
    for a in instances {
        let highlights: Vec<String> = a
            .highlight_spans
            .iter()
            .flat_map(|&(s, e)| s..e)
            .map(|i| i.to_string())
            .collect();
        let highlights = if highlights.is_empty() {
            "{}".to_string()
        } else {
            highlights.join(",")
        };
        w.write_record([
            a.id(),
            a.base.gold_label.as_str(),
            &a.base.premise,
            &a.base.hypothesis,
            &a.gold_explanation,
            &highlights,
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Writes `train.csv`, `dev.csv` and `test.csv` under `dir`.
pub fn write_synthetic_splits(dir: &Path, seed: u64, n: usize) -> Result<()> {
    let (train, dev, test) = split_corpus(make_synthetic_corpus(seed, n)?);
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_esnli_csv(&dir.join("train.csv"), &train)?;
    write_esnli_csv(&dir.join("dev.csv"), &dev)?;
    write_esnli_csv(&dir.join("test.csv"), &test)
}
