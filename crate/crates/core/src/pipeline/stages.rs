//! Stage runners. Every stage reads its inputs from the cache directory,
//! writes its artifacts atomically and records itself in the manifest.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{BackendChoice, TinyGenerator};
use crate::corpus::{
    filter_noninformative, load_esnli, load_nli, AnnotatedInstance, CanonicalRecord, NliInstance, SplitName,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    accuracy, agreement, faithfulness_probe, human_eval_session, majority_baseline, spurious_probe, token_prf,
    AnnotationRecord, CandidateInstance, EvalSample, ExplainedInstance, MetricReport, Question, SessionOutcome,
};
use crate::explainer::{build_prompt, explanation_records, leaks_label, train_generator, training_prompts, ExplanationRecord, FLAG_EMPTY_GENERATION};
use crate::inference::{predict, train_inference, training_selection, InferenceInput, InferenceItem, InferenceMode, InferencePrediction};
use crate::io::{read_jsonl, sha256_bytes, sha256_file, write_atomic, write_jsonl};
use crate::label::{Label, LabelDistribution, PerLabel};
use crate::rationalizer::{rationale_examples, token_accuracy, train_rationalizer, RationalizerModel};
use crate::selector::{train_selector, NliClassifier, SelectionRecord, SelectionStrategy};
use crate::text::{PieceTokenizer, Vocab, WordTokenizer, EOT};

use super::config::PipelineConfig;
use super::manifest::{RunManifest, Stage};

/// Scalar type of every model the pipeline trains.
pub type F = f32;

const SELECTOR_KIND: &str = "selector";
const INFERENCE_KIND: &str = "inference";

// Stage seed offsets.
const SEED_RATIONALIZER: u64 = 1;
const SEED_GENERATOR: u64 = 2;
const SEED_SELECTOR: u64 = 3;
const SEED_INFERENCE: u64 = 4;
const SEED_PROBE: u64 = 6;
const SEED_HUMAN_EVAL: u64 = 7;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Run even when upstream stages are missing and ignore cached outputs.
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub reports: Vec<MetricReport>,
    pub artifacts: Vec<PathBuf>,
}

/// Splits carried through the pipeline. `transfer` has no annotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Split {
    Train,
    Dev,
    Test,
    Transfer,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
            Split::Transfer => "transfer",
        }
    }
}

/// Where every artifact lives.
#[derive(Debug, Clone)]
pub struct Layout {
    pub cache: PathBuf,
    pub checkpoints: PathBuf,
}

impl Layout {
    pub fn new(config: &PipelineConfig) -> Self {
        Layout {
            cache: config.cache_dir().to_path_buf(),
            checkpoints: config.checkpoint_dir(),
        }
    }

    fn data(&self, split: Split) -> PathBuf {
        self.cache.join("data").join(format!("{}.jsonl", split.as_str()))
    }

    fn held_out(&self) -> PathBuf {
        self.cache.join("data/held_out.json")
    }

    fn encoder_vocab(&self) -> PathBuf {
        self.cache.join("vocab/encoder.json")
    }

    fn generator_vocab(&self) -> PathBuf {
        self.cache.join("vocab/generator.json")
    }

    fn explanations(&self, split: Split) -> PathBuf {
        self.cache.join("explanations").join(format!("{}.jsonl", split.as_str()))
    }

    fn explanation_key(&self) -> PathBuf {
        self.cache.join("explanations/cache_key.json")
    }

    fn selections(&self, split: Split) -> PathBuf {
        self.cache.join("selections").join(format!("{}.jsonl", split.as_str()))
    }

    fn predictions(&self, split: Split) -> PathBuf {
        self.cache.join("predictions").join(format!("{}.jsonl", split.as_str()))
    }

    fn rationales(&self) -> PathBuf {
        self.cache.join("rationales/dev.jsonl")
    }

    pub fn report(&self, stage: Stage) -> PathBuf {
        self.cache.join("reports").join(format!("{stage}.jsonl"))
    }

    pub fn human_eval_samples(&self) -> PathBuf {
        self.cache.join("human_eval/samples.jsonl")
    }

    pub fn annotations(&self, question: Question) -> PathBuf {
        let name = serde_json::to_value(question)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_else(|| "annotations".into());
        self.cache.join("human_eval").join(format!("{name}.jsonl"))
    }

    fn rationalizer(&self) -> PathBuf {
        self.checkpoints.join("rationalizer")
    }

    fn generator(&self) -> PathBuf {
        self.checkpoints.join("generator")
    }

    fn selector(&self) -> PathBuf {
        self.checkpoints.join("selector")
    }

    fn inference(&self, mode: InferenceMode) -> PathBuf {
        self.checkpoints.join(format!("inference_{mode}"))
    }
}

/// Runs one stage and records it in the manifest.
pub fn run_stage(config: &PipelineConfig, stage: Stage, opts: RunOptions) -> Result<StageOutcome> {
    config.validate().map_err(|e| tag(stage, e))?;
    let layout = Layout::new(config);
    let mut manifest = RunManifest::load(&layout.cache).map_err(|e| tag(stage, e))?;
    if !opts.force {
        manifest.check_upstream(&layout.cache, stage)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Stage {
            stage: stage.to_string(),
            message: format!("worker pool: {e}"),
        })?;
    let start = Instant::now();
    log::info!("running {stage}");
    let outcome = pool
        .install(|| execute(config, &layout, stage, opts))
        .and_then(|mut outcome| {
            if !outcome.reports.is_empty() {
                let path = layout.report(stage);
                write_jsonl(&path, &outcome.reports)?;
                outcome.artifacts.push(path);
            }
            let snapshot = serde_json::to_value(config)?;
            let secs = start.elapsed().as_secs_f64();
            manifest.record(&layout.cache, stage, &outcome.artifacts, secs, snapshot)?;
            manifest.save(&layout.cache)?;
            Ok(outcome)
        })
        .map_err(|e| tag(stage, e))?;
    log::info!("{stage} finished in {:.1}s", start.elapsed().as_secs_f64());
    Ok(outcome)
}

/// Runs every stage from `prepare` through `probe` in order.
pub fn run_all(config: &PipelineConfig, opts: RunOptions) -> Result<Vec<StageOutcome>> {
    Stage::ALL
        .into_iter()
        .filter(|&s| s != Stage::HumanEval)
        .map(|s| run_stage(config, s, opts))
        .collect()
}

fn tag(stage: Stage, e: Error) -> Error {
    match e {
        Error::MissingUpstream { .. } | Error::Stage { .. } => e,
        other => Error::Stage {
            stage: stage.to_string(),
            message: other.to_string(),
        },
    }
}

fn execute(config: &PipelineConfig, layout: &Layout, stage: Stage, opts: RunOptions) -> Result<StageOutcome> {
    let (reports, artifacts) = match stage {
        Stage::Prepare => prepare(config, layout)?,
        Stage::TrainRationalizer => rationalizer_stage(config, layout)?,
        Stage::TrainGenerator => generator_stage(config, layout)?,
        Stage::Generate => generate_stage(config, layout, opts)?,
        Stage::TrainSelector => selector_stage(config, layout)?,
        Stage::Select => select_stage(config, layout)?,
        Stage::TrainInference => inference_stage(config, layout)?,
        Stage::Evaluate => evaluate_stage(config, layout)?,
        Stage::Probe => probe_stage(config, layout)?,
        Stage::HumanEval => human_eval_stage(config, layout)?,
    };
    Ok(StageOutcome {
        stage,
        reports,
        artifacts,
    })
}

type Produced = Result<(Vec<MetricReport>, Vec<PathBuf>)>;

fn require_tiny(choice: &BackendChoice) -> Result<()> {
    match choice {
        BackendChoice::Tiny => Ok(()),
        BackendChoice::Pretrained(id) => Err(Error::BackendUnavailable(id.clone())),
    }
}

fn transfer_present(layout: &Layout) -> bool {
    layout.data(Split::Transfer).is_file()
}

fn eval_splits(layout: &Layout) -> Vec<Split> {
    let mut s = vec![Split::Dev, Split::Test];
    if transfer_present(layout) {
        s.push(Split::Transfer);
    }
    s
}

fn all_splits(layout: &Layout) -> Vec<Split> {
    let mut s = vec![Split::Train];
    s.extend(eval_splits(layout));
    s
}

fn read_records(layout: &Layout, split: Split) -> Result<Vec<CanonicalRecord>> {
    read_jsonl(&layout.data(split))
}

fn read_nli(layout: &Layout, split: Split) -> Result<Vec<NliInstance>> {
    read_records(layout, split)?.iter().map(CanonicalRecord::to_nli).collect()
}

fn read_annotated(layout: &Layout, split: Split) -> Result<Vec<AnnotatedInstance>> {
    read_records(layout, split)?
        .iter()
        .map(|r| {
            r.to_annotated()
                .unwrap_or_else(|| Err(Error::Consistency(format!("{}: no gold explanation", r.instance_id))))
        })
        .collect()
}

fn read_vocab(path: &Path) -> Result<Vocab> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Vocab::from_tokens(serde_json::from_slice(&bytes)?))
}

fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    write_atomic(path, &serde_json::to_vec(vocab.tokens())?)
}

fn prepare(config: &PipelineConfig, layout: &Layout) -> Produced {
    let cols = &config.columns;
    let p = &config.paths;
    let train = load_esnli(&p.train, SplitName::Train, cols)?;
    let dev = load_esnli(&p.dev, SplitName::Dev, cols)?;
    let test = load_esnli(&p.test, SplitName::Test, cols)?;
    if train.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    let (kept, held) = filter_noninformative(&train);
    let mut artifacts = Vec::new();
    let mut report = MetricReport::new("prepare", train.len(), config.seed)
        .with("train", train.len() as f64)
        .with("dev", dev.len() as f64)
        .with("test", test.len() as f64)
        .with("held_out_noninformative", held.len() as f64)
        .with("skipped_rows", (train.skipped + dev.skipped + test.skipped) as f64);

    for (split, data) in [(Split::Train, &train), (Split::Dev, &dev), (Split::Test, &test)] {
        let recs: Vec<CanonicalRecord> = data.instances.iter().map(CanonicalRecord::from).collect();
        let path = layout.data(split);
        write_jsonl(&path, &recs)?;
        artifacts.push(path);
    }
    if let Some(t) = &p.transfer {
        let transfer = load_nli(t, SplitName::DevMatched, cols)?;
        report = report.with("transfer", transfer.len() as f64);
        let recs: Vec<CanonicalRecord> = transfer.instances.iter().map(CanonicalRecord::from).collect();
        let path = layout.data(Split::Transfer);
        write_jsonl(&path, &recs)?;
        artifacts.push(path);
    } else if layout.data(Split::Transfer).exists() {
        let path = layout.data(Split::Transfer);
        std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
    }

    let held_ids: Vec<&str> = held.instances.iter().map(|a| a.id()).collect();
    write_atomic(&layout.held_out(), &serde_json::to_vec_pretty(&held_ids)?)?;
    artifacts.push(layout.held_out());

    let texts = train
        .instances
        .iter()
        .flat_map(|a| [a.base.premise.as_str(), a.base.hypothesis.as_str(), a.gold_explanation.as_str()]);
    let encoder = WordTokenizer::fit(texts);
    write_vocab(&layout.encoder_vocab(), encoder.vocab())?;
    artifacts.push(layout.encoder_vocab());

    let prompts = training_prompts(&kept.instances)?;
    let generator = PieceTokenizer::fit(prompts.iter().map(String::as_str).chain([EOT]));
    write_vocab(&layout.generator_vocab(), generator.vocab())?;
    artifacts.push(layout.generator_vocab());

    report = report
        .with("encoder_vocab", encoder.vocab().len() as f64)
        .with("generator_vocab", generator.vocab().len() as f64);
    Ok((vec![report], artifacts))
}

fn encoder_tokenizer(layout: &Layout) -> Result<WordTokenizer> {
    Ok(WordTokenizer::new(read_vocab(&layout.encoder_vocab())?))
}

fn held_out_ids(layout: &Layout) -> Result<HashSet<String>> {
    let path = layout.held_out();
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn rationalizer_stage(config: &PipelineConfig, layout: &Layout) -> Produced {
    require_tiny(&config.backend.encoder)?;
    let seed = config.stage_seed(SEED_RATIONALIZER);
    let tok = encoder_tokenizer(layout)?;
    let train = read_annotated(layout, Split::Train)?;
    let dev = read_annotated(layout, Split::Dev)?;
    let mut model = RationalizerModel::<F>::new(tok.clone(), config.tiny.encoder, seed);
    let examples = rationale_examples(&tok, &train)?;
    let training = config.training.rationalizer.clone().with_seed(seed);
    let losses = train_rationalizer(&mut model, &examples, &training)?;
    model.save(&layout.rationalizer(), &training)?;

    let mut report = MetricReport::new("rationalizer", train.len(), seed)
        .with("final_loss", losses.last().copied().unwrap_or(f64::NAN))
        .with("train_token_accuracy", token_accuracy(&model, &examples)?);
    let mut artifacts = checkpoint_files(&layout.rationalizer());
    if !dev.is_empty() {
        let dev_examples = rationale_examples(&tok, &dev)?;
        let preds = dev_examples
            .par_iter()
            .map(|ex| model.predict_rationales(ex.label, &ex.instance))
            .collect::<Result<Vec<_>>>()?;
        let golds: Vec<_> = dev_examples.iter().map(|ex| ex.mask.clone()).collect();
        let prf = token_prf(&preds, &golds)?;
        report = report
            .with("dev_token_accuracy", token_accuracy(&model, &dev_examples)?)
            .with("dev_precision", prf.precision)
            .with("dev_recall", prf.recall)
            .with("dev_f1", prf.f1);
        let dump = dev
            .par_iter()
            .map(|a| model.prediction_record(a.base.gold_label, &a.base))
            .collect::<Result<Vec<_>>>()?;
        write_jsonl(&layout.rationales(), &dump)?;
        artifacts.push(layout.rationales());
    }
    Ok((vec![report], artifacts))
}

fn checkpoint_files(dir: &Path) -> Vec<PathBuf> {
    ["meta.json", "vocab.json", "params.json"].iter().map(|f| dir.join(f)).collect()
}

fn generator_stage(config: &PipelineConfig, layout: &Layout) -> Produced {
    require_tiny(&config.backend.generator)?;
    let seed = config.stage_seed(SEED_GENERATOR);
    let tok = PieceTokenizer::new(read_vocab(&layout.generator_vocab())?);
    let held = held_out_ids(layout)?;
    let kept: Vec<AnnotatedInstance> = read_annotated(layout, Split::Train)?
        .into_iter()
        .filter(|a| !held.contains(a.id()))
        .collect();
    let mut generator = TinyGenerator::<F>::new(tok, config.tiny.generator, config.tiny.max_new_tokens, seed);
    let training = config.training.generator.clone().with_seed(seed);
    let losses = train_generator(&mut generator, &kept, Some(&held), &training)?;
    generator.save(&layout.generator(), &training)?;
    let report = MetricReport::new("generator", kept.len(), seed)
        .with("final_loss", losses.last().copied().unwrap_or(f64::NAN))
        .with("held_out", held.len() as f64);
    Ok((vec![report], checkpoint_files(&layout.generator())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ExplanationCacheKey {
    rationalizer: String,
    generator: String,
    data: Vec<(String, String)>,
}

fn explanation_cache_key(layout: &Layout) -> Result<ExplanationCacheKey> {
    let data = all_splits(layout)
        .into_iter()
        .map(|s| Ok((s.as_str().to_string(), sha256_file(&layout.data(s))?)))
        .collect::<Result<_>>()?;
    Ok(ExplanationCacheKey {
        rationalizer: sha256_file(&layout.rationalizer().join("params.json"))?,
        generator: sha256_file(&layout.generator().join("params.json"))?,
        data,
    })
}

fn generate_stage(config: &PipelineConfig, layout: &Layout, opts: RunOptions) -> Produced {
    require_tiny(&config.backend.encoder)?;
    require_tiny(&config.backend.generator)?;
    let splits = all_splits(layout);
    let key = explanation_cache_key(layout)?;
    let key_bytes = serde_json::to_vec_pretty(&key)?;
    let cached = !opts.force
        && std::fs::read(layout.explanation_key()).is_ok_and(|b| b == key_bytes)
        && splits.iter().all(|&s| layout.explanations(s).is_file());

    let rationalizer = RationalizerModel::<F>::load(&layout.rationalizer())?;
    let generator = TinyGenerator::<F>::load(&layout.generator())?;
    let mut total = 0usize;
    let mut empty = 0usize;
    let mut leaks = 0usize;
    let mut artifacts = Vec::new();
    for split in splits {
        let data = read_nli(layout, split)?;
        let records: Vec<ExplanationRecord> = if cached {
            log::info!("reusing cached {} explanations", split.as_str());
            read_jsonl(&layout.explanations(split))?
        } else {
            let per_instance = data
                .par_iter()
                .map(|inst| explanation_records(&rationalizer, &generator, inst))
                .collect::<Result<Vec<_>>>()?;
            let flat: Vec<ExplanationRecord> = per_instance.into_iter().flatten().collect();
            write_jsonl(&layout.explanations(split), &flat)?;
            flat
        };
        let by_id: HashMap<&str, &NliInstance> = data.iter().map(|d| (d.instance_id.as_str(), d)).collect();
        for r in &records {
            total += 1;
            empty += usize::from(r.flags.iter().any(|f| f == FLAG_EMPTY_GENERATION));
            if let Some(inst) = by_id.get(r.instance_id.as_str()) {
                let prompt = build_prompt(&inst.premise, &inst.hypothesis, &r.word_mask, None)?;
                leaks += usize::from(leaks_label(&prompt, &inst.premise, &inst.hypothesis));
            }
        }
        artifacts.push(layout.explanations(split));
    }
    write_atomic(&layout.explanation_key(), &key_bytes)?;
    artifacts.push(layout.explanation_key());
    let report = MetricReport::new("generate", total, config.seed)
        .with("explanations", total as f64)
        .with("empty_generations", empty as f64)
        .with("label_leaks", leaks as f64);
    Ok((vec![report], artifacts))
}

/// Candidate explanations per instance, in the order of `data`.
fn read_explanations(layout: &Layout, split: Split, data: &[NliInstance]) -> Result<Vec<PerLabel<ExplanationRecord>>> {
    let records: Vec<ExplanationRecord> = read_jsonl(&layout.explanations(split))?;
    let mut by_id: HashMap<String, Vec<ExplanationRecord>> = HashMap::new();
    for r in records {
        by_id.entry(r.instance_id.clone()).or_default().push(r);
    }
    data.iter()
        .map(|inst| {
            let recs = by_id.get(&inst.instance_id).ok_or_else(|| {
                Error::Consistency(format!("{}: no explanations in the {} cache", inst.instance_id, split.as_str()))
            })?;
            PerLabel::try_from_fn(|l| {
                recs.iter().find(|r| r.label == l).cloned().ok_or_else(|| {
                    Error::Consistency(format!("{}: no `{l}` explanation cached", inst.instance_id))
                })
            })
        })
        .collect()
}

fn selector_stage(config: &PipelineConfig, layout: &Layout) -> Produced {
    require_tiny(&config.backend.encoder)?;
    let seed = config.stage_seed(SEED_SELECTOR);
    let tok = encoder_tokenizer(layout)?;
    let train = read_nli(layout, Split::Train)?;
    let mut model = NliClassifier::<F>::new(SELECTOR_KIND, tok, config.tiny.encoder, seed);
    let training = config.training.selector.clone().with_seed(seed);
    let losses = train_selector(&mut model, &train, &training)?;
    model.save(&layout.selector(), &training)?;
    let mut report = MetricReport::new("selector", train.len(), seed)
        .with("final_loss", losses.last().copied().unwrap_or(f64::NAN))
        .with("train_accuracy", classifier_accuracy(&model, &train)?);
    for split in eval_splits(layout) {
        let data = read_nli(layout, split)?;
        if !data.is_empty() {
            report = report.with(&format!("{}_accuracy", split.as_str()), classifier_accuracy(&model, &data)?);
        }
    }
    Ok((vec![report], checkpoint_files(&layout.selector())))
}

fn classifier_accuracy(model: &NliClassifier<F>, data: &[NliInstance]) -> Result<f64> {
    let preds = data
        .par_iter()
        .map(|d| model.classify(&d.premise, &d.hypothesis).map(|p| p.argmax()))
        .collect::<Result<Vec<_>>>()?;
    let golds: Vec<Label> = data.iter().map(|d| d.gold_label).collect();
    accuracy(&preds, &golds)
}

fn select_stage(config: &PipelineConfig, layout: &Layout) -> Produced {
    require_tiny(&config.backend.encoder)?;
    let selector = NliClassifier::<F>::load(&layout.selector(), SELECTOR_KIND)?;
    let seed = config.stage_seed(SEED_INFERENCE);
    let mut report = MetricReport::new("select", 0, seed);
    let mut artifacts = Vec::new();
    let mut n = 0;
    for split in all_splits(layout) {
        let data = read_nli(layout, split)?;
        let expls = read_explanations(layout, split, &data)?;
        let strategy = if split == Split::Train {
            config.strategy
        } else {
            SelectionStrategy::Max
        };
        let records = data
            .par_iter()
            .zip(expls.par_iter())
            .enumerate()
            .map(|(i, (inst, ex))| {
                let dist = selector.classify(&inst.premise, &inst.hypothesis)?;
                let item = InferenceItem {
                    instance_id: inst.instance_id.clone(),
                    premise: inst.premise.clone(),
                    hypothesis: inst.hypothesis.clone(),
                    explanations: ex.map(|_, r| r.explanation.clone()),
                    target: dist,
                };
                Ok(SelectionRecord {
                    instance_id: inst.instance_id.clone(),
                    dist: dist.to_f64(),
                    selected_label: training_selection(&item, strategy, seed, 0, i),
                    strategy,
                    seed,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if !data.is_empty() {
            let hits = records.iter().zip(&data).filter(|(r, d)| r.selected_label == d.gold_label).count();
            report = report.with(&format!("{}_selected_gold", split.as_str()), hits as f64 / data.len() as f64);
        }
        n += records.len();
        write_jsonl(&layout.selections(split), &records)?;
        artifacts.push(layout.selections(split));
    }
    report.n = n;
    Ok((vec![report], artifacts))
}

fn read_selections(layout: &Layout, split: Split, data: &[NliInstance]) -> Result<Vec<SelectionRecord>> {
    let records: Vec<SelectionRecord> = read_jsonl(&layout.selections(split))?;
    if records.len() != data.len() || records.iter().zip(data).any(|(r, d)| r.instance_id != d.instance_id) {
        return Err(Error::Consistency(format!(
            "{} selections do not line up with the {} data; rerun `lirex select`",
            split.as_str(),
            split.as_str()
        )));
    }
    Ok(records)
}

fn distribution(record: &SelectionRecord) -> Result<LabelDistribution<F>> {
    Ok(LabelDistribution::<f64>::new(record.dist)?.cast::<F>())
}

fn inference_stage(config: &PipelineConfig, layout: &Layout) -> Produced {
    require_tiny(&config.backend.encoder)?;
    let seed = config.stage_seed(SEED_INFERENCE);
    let tok = encoder_tokenizer(layout)?;
    let train = read_nli(layout, Split::Train)?;
    let expls = read_explanations(layout, Split::Train, &train)?;
    let selections = read_selections(layout, Split::Train, &train)?;
    let items = train
        .iter()
        .zip(&expls)
        .zip(&selections)
        .map(|((inst, ex), sel)| {
            Ok(InferenceItem {
                instance_id: inst.instance_id.clone(),
                premise: inst.premise.clone(),
                hypothesis: inst.hypothesis.clone(),
                explanations: ex.map(|_, r| r.explanation.clone()),
                target: distribution(sel)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let training = config.training.inference.clone().with_seed(seed);
    let mut report = MetricReport::new("inference", items.len(), seed);
    let mut artifacts = Vec::new();
    for mode in InferenceMode::ALL {
        let mut model = NliClassifier::<F>::new(INFERENCE_KIND, tok.clone(), config.tiny.encoder, seed);
        let losses = train_inference(&mut model, mode, &items, config.strategy, &training)?;
        model.save(&layout.inference(mode), &training)?;
        report = report.with(&format!("{mode}_final_loss"), losses.last().copied().unwrap_or(f64::NAN));
        artifacts.extend(checkpoint_files(&layout.inference(mode)));
    }
    Ok((vec![report], artifacts))
}

/// Selected explanation for each instance of an evaluation split.
fn selected_inputs(layout: &Layout, split: Split, data: &[NliInstance]) -> Result<Vec<(Label, String)>> {
    let expls = read_explanations(layout, split, data)?;
    let selections = read_selections(layout, split, data)?;
    Ok(expls
        .iter()
        .zip(&selections)
        .map(|(ex, sel)| (sel.selected_label, ex.get(sel.selected_label).explanation.clone()))
        .collect())
}

fn evaluate_stage(config: &PipelineConfig, layout: &Layout) -> Produced {
    require_tiny(&config.backend.encoder)?;
    let mode = config.mode;
    let model = NliClassifier::<F>::load(&layout.inference(mode), INFERENCE_KIND)?;
    let rationalizer = RationalizerModel::<F>::load(&layout.rationalizer())?;
    let mut reports = Vec::new();
    let mut artifacts = Vec::new();
    for split in eval_splits(layout) {
        let data = read_nli(layout, split)?;
        if data.is_empty() {
            continue;
        }
        let inputs = selected_inputs(layout, split, &data)?;
        let preds = data
            .par_iter()
            .zip(inputs.par_iter())
            .map(|(inst, (label, expl))| {
                let input = InferenceInput::for_mode(mode, &inst.premise, &inst.hypothesis, expl);
                let (predicted, dist) = predict(&model, &input)?;
                Ok(InferencePrediction {
                    instance_id: inst.instance_id.clone(),
                    mode,
                    selected_label_input: mode.uses_explanation().then_some(*label),
                    predicted_label: predicted,
                    probs: dist.to_f64(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let golds: Vec<Label> = data.iter().map(|d| d.gold_label).collect();
        let labels: Vec<Label> = preds.iter().map(|p| p.predicted_label).collect();
        let mut report = MetricReport::new(format!("evaluate_{}", split.as_str()), data.len(), config.seed)
            .with("accuracy", accuracy(&labels, &golds)?)
            .with("majority", majority_baseline(&golds)?);
        if split != Split::Transfer {
            let annotated = read_annotated(layout, split)?;
            let examples = rationale_examples(rationalizer.tokenizer(), &annotated)?;
            let masks = examples
                .par_iter()
                .map(|ex| rationalizer.predict_rationales(ex.label, &ex.instance))
                .collect::<Result<Vec<_>>>()?;
            let gold_masks: Vec<_> = examples.iter().map(|e| e.mask.clone()).collect();
            let prf = token_prf(&masks, &gold_masks)?;
            report = report
                .with("rationale_precision", prf.precision)
                .with("rationale_recall", prf.recall)
                .with("rationale_f1", prf.f1);
        }
        write_jsonl(&layout.predictions(split), &preds)?;
        artifacts.push(layout.predictions(split));
        reports.push(report);
    }
    Ok((reports, artifacts))
}

fn probe_stage(config: &PipelineConfig, layout: &Layout) -> Produced {
    require_tiny(&config.backend.encoder)?;
    let seed = config.stage_seed(SEED_PROBE);
    let models = InferenceMode::ALL
        .into_iter()
        .map(|m| Ok((m, NliClassifier::<F>::load(&layout.inference(m), INFERENCE_KIND)?)))
        .collect::<Result<Vec<_>>>()?;
    let data = read_nli(layout, Split::Test)?;
    let expls = read_explanations(layout, Split::Test, &data)?;
    let selections = read_selections(layout, Split::Test, &data)?;

    let explained: Vec<ExplainedInstance> = data
        .iter()
        .zip(&expls)
        .zip(&selections)
        .map(|((inst, ex), sel)| ExplainedInstance {
            instance: inst.clone(),
            explanation: ex.get(sel.selected_label).explanation.clone(),
        })
        .collect();
    let refs: Vec<(InferenceMode, &NliClassifier<F>)> = models.iter().map(|(m, c)| (*m, c)).collect();
    let faith = faithfulness_probe(&refs, &explained, seed)?;

    let candidates = data
        .iter()
        .zip(&expls)
        .zip(&selections)
        .map(|((inst, ex), sel)| {
            Ok(CandidateInstance {
                instance: inst.clone(),
                explanations: ex.map(|_, r| r.explanation.clone()),
                dist: distribution(sel)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    // a base model ignores explanations, so probe the full model instead
    let mode = if config.mode == InferenceMode::Base {
        InferenceMode::All
    } else {
        config.mode
    };
    let model = refs.iter().find(|(m, _)| *m == mode).map(|(_, c)| *c).expect("all modes loaded");
    let spurious = spurious_probe(model, mode, &candidates, seed)?;
    Ok((vec![faith, spurious], Vec::new()))
}

/// Picks the human evaluation sample from the test split and writes it.
/// Rationales and explanations are the ones conditioned on the gold label.
fn human_eval_stage(config: &PipelineConfig, layout: &Layout) -> Produced {
    let seed = config.stage_seed(SEED_HUMAN_EVAL);
    let test = read_annotated(layout, Split::Test)?;
    let bases: Vec<NliInstance> = test.iter().map(|a| a.base.clone()).collect();
    let expls = read_explanations(layout, Split::Test, &bases)?;
    let mut order: Vec<usize> = (0..test.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.truncate(config.human_eval_samples);
    order.sort_unstable();
    let samples: Vec<EvalSample> = order
        .into_iter()
        .map(|i| {
            let a = &test[i];
            let r = expls[i].get(a.base.gold_label);
            EvalSample {
                instance_id: a.id().to_string(),
                premise: a.base.premise.clone(),
                hypothesis: a.base.hypothesis.clone(),
                rationale_words: r.rationale_words.clone(),
                gold_rationale_words: crate::explainer::rationale_words(&a.base.hypothesis, &a.word_mask()),
                explanation: Some(r.explanation.clone()),
            }
        })
        .collect();
    write_jsonl(&layout.human_eval_samples(), &samples)?;
    let report = MetricReport::new("human_eval_sample", samples.len(), seed);
    Ok((vec![report], vec![layout.human_eval_samples()]))
}

/// Interactive annotation over the prepared sample. Answers are appended
/// to the question's annotation file as they are given.
pub fn annotate<R: BufRead, W: Write>(
    config: &PipelineConfig,
    question: Question,
    annotator: &str,
    input: &mut R,
    output: &mut W,
) -> Result<SessionOutcome> {
    let layout = Layout::new(config);
    let manifest = RunManifest::load(&layout.cache)?;
    if !manifest.is_complete(Stage::HumanEval) {
        return Err(Error::MissingUpstream {
            stage: "annotate".into(),
            missing: Stage::HumanEval.to_string(),
        });
    }
    let samples: Vec<EvalSample> = read_jsonl(&layout.human_eval_samples())?;
    human_eval_session(&samples, question, annotator, &layout.annotations(question), input, output)
}

/// Raw agreement and kappa of two annotators on one question.
pub fn agreement_report(config: &PipelineConfig, question: Question, a: &str, b: &str) -> Result<MetricReport> {
    let layout = Layout::new(config);
    let records: Vec<AnnotationRecord> = read_jsonl(&layout.annotations(question))?;
    let of = |who: &str| -> Vec<AnnotationRecord> {
        records.iter().filter(|r| r.annotator_id == who).cloned().collect()
    };
    let (ra, rb) = (of(a), of(b));
    let (raw, kappa) = agreement(&ra, &rb)?;
    let positive = |rs: &[AnnotationRecord]| rs.iter().filter(|r| r.judgment == 1).count() as f64 / rs.len() as f64;
    Ok(MetricReport::new(format!("agreement_{a}_{b}"), ra.len(), config.seed)
        .with("raw", raw)
        .with("kappa", kappa)
        .with(&format!("positive_rate_{a}"), positive(&ra))
        .with(&format!("positive_rate_{b}"), positive(&rb)))
}

/// What `stage` would do, without running it.
pub fn dry_run(config: &PipelineConfig, stage: Stage) -> Result<String> {
    config.validate()?;
    let layout = Layout::new(config);
    let manifest = RunManifest::load(&layout.cache)?;
    let mut out = String::new();
    let _ = writeln!(out, "stage      {stage}");
    let _ = writeln!(out, "cache      {}", layout.cache.display());
    let _ = writeln!(out, "encoder    {}", config.backend.encoder);
    let _ = writeln!(out, "generator  {}", config.backend.generator);
    let _ = writeln!(out, "mode       {}  strategy {}  seed {}", config.mode, config.strategy, config.seed);
    let training = match stage {
        Stage::TrainRationalizer => Some(&config.training.rationalizer),
        Stage::TrainGenerator => Some(&config.training.generator),
        Stage::TrainSelector => Some(&config.training.selector),
        Stage::TrainInference => Some(&config.training.inference),
        _ => None,
    };
    if let Some(t) = training {
        let _ = writeln!(
            out,
            "training   batch {}  lr {}  epochs {}",
            t.batch_size, t.learning_rate, t.epochs
        );
    }
    for &up in stage.upstream() {
        let state = if manifest.is_complete(up) && manifest.stale_artifacts(&layout.cache, up).is_empty() {
            "complete"
        } else {
            "missing"
        };
        let _ = writeln!(out, "upstream   {up}: {state}");
    }
    let needs_encoder = !matches!(stage, Stage::Prepare | Stage::TrainGenerator | Stage::HumanEval);
    let needs_generator = matches!(stage, Stage::TrainGenerator | Stage::Generate);
    for (needed, choice) in [(needs_encoder, &config.backend.encoder), (needs_generator, &config.backend.generator)] {
        if needed {
            if let BackendChoice::Pretrained(id) = choice {
                let _ = writeln!(out, "note       backend `{id}` cannot be executed in this build");
            }
        }
    }
    Ok(out)
}

/// Digest of every report file, keyed by stage; used to compare runs.
pub fn report_digests(config: &PipelineConfig) -> Result<Vec<(Stage, String)>> {
    let layout = Layout::new(config);
    Stage::ALL
        .into_iter()
        .filter(|&s| layout.report(s).is_file())
        .map(|s| {
            let bytes = std::fs::read(layout.report(s)).map_err(|e| Error::io(layout.report(s), e))?;
            Ok((s, sha256_bytes(&bytes)))
        })
        .collect()
}
