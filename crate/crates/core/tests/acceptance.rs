//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::io::Cursor;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use lirex::corpus::{is_noninformative, AnnotatedInstance, NliInstance};
use lirex::evaluation::{
    accuracy, agreement, faithfulness_probe, majority_baseline, spurious_probe, token_prf, AnnotationRecord,
    CandidateInstance, ExplainedInstance, MetricReport, Question,
};
use lirex::explainer::{build_prompt, parse_prompt, GenerationPrompt};
use lirex::inference::{soft_cross_entropy, soft_cross_entropy_logit_grad, train_inference, InferenceMode};
use lirex::io::read_jsonl;
use lirex::label::{Label, LabelDistribution, PerLabel};
use lirex::nn::TinyDims;
use lirex::pipeline::synthetic::{make_synthetic_corpus, split_corpus, write_synthetic_splits};
use lirex::pipeline::{annotate, run_stage, Layout, PipelineConfig, RunManifest, RunOptions, Stage};
use lirex::rationalizer::{cross_attention, fuse};
use lirex::selector::{select_max, select_sample, train_selector, SelectionStrategy};
use lirex::text::WordTokenizer;
use lirex::training::TrainingConfig;
use lirex::{Classifier, InferenceItem};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

// Scalar references written straight from the attention and fusion formulas.

fn attention_reference(hh: &Array2<f64>, hp: &Array2<f64>, w1: &Array2<f64>) -> Vec<Vec<f64>> {
    let d = hh.ncols();
    let (lh, lp) = (hh.nrows(), hp.nrows());
    let mut keys = vec![vec![0.0; d]; lp];
    for j in 0..lp {
        for k in 0..d {
            let mut s = 0.0;
            for m in 0..d {
                s += w1[[m, k]] * hp[[j, m]];
            }
            keys[j][k] = s.tanh();
        }
    }
    let mut a = vec![vec![0.0; lp]; lh];
    for i in 0..lh {
        let mut denom = 0.0;
        for j in 0..lp {
            let mut s = 0.0;
            for k in 0..d {
                s += hh[[i, k]] * keys[j][k];
            }
            a[i][j] = s.exp();
            denom += a[i][j];
        }
        for v in &mut a[i] {
            *v /= denom;
        }
    }
    a
}

fn fuse_reference(hh: &Array2<f64>, hp: &Array2<f64>, a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = hh.ncols();
    (0..hh.nrows())
        .map(|i| {
            let mut row: Vec<f64> = (0..d).map(|k| hh[[i, k]]).collect();
            for k in 0..d {
                let mut m = f64::NEG_INFINITY;
                for j in 0..hp.nrows() {
                    m = m.max(hp[[j, k]]);
                }
                row.push(m);
            }
            for k in 0..d {
                let mut s = 0.0;
                for j in 0..hp.nrows() {
                    s += a[i][j] * hp[[j, k]];
                }
                row.push(s);
            }
            row
        })
        .collect()
}

struct AttentionCase {
    hh: Array2<f64>,
    hp: Array2<f64>,
    w1: Array2<f64>,
}

fn attention_cases() -> Vec<AttentionCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    (0..100)
        .map(|_| {
            let d = rng.random_range(1..=8);
            let lh = rng.random_range(1..=8);
            let lp = rng.random_range(1..=8);
            AttentionCase {
                hh: random_matrix(&mut rng, lh, d),
                hp: random_matrix(&mut rng, lp, d),
                w1: random_matrix(&mut rng, d, d),
            }
        })
        .collect()
}

fn cross_attention_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_row = 0.0f64;
    for c in attention_cases() {
        let got = cross_attention(&c.hh, &c.hp, &c.w1).map_err(|e| e.to_string())?;
        let want = attention_reference(&c.hh, &c.hp, &c.w1);
        for (i, row) in want.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                worst = worst.max((got[[i, j]] - v).abs());
            }
            worst_row = worst_row.max((got.row(i).sum() - 1.0).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst <= 1e-6, format!("max deviation {worst:e}"))?;
    ensure(worst_row <= 1e-6, format!("row sum off by {worst_row:e}"))?;
    ensure(secs < 5.0, format!("took {secs:.2}s"))?;
    Ok(format!("max dev {worst:.1e}, max row-sum err {worst_row:.1e}, {secs:.3}s"))
}

fn fuse_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for c in attention_cases() {
        let a = cross_attention(&c.hh, &c.hp, &c.w1).map_err(|e| e.to_string())?;
        let got = fuse(&c.hh, &c.hp, &a).map_err(|e| e.to_string())?;
        let d = c.hh.ncols();
        ensure(got.ncols() == 3 * d, format!("width {} for d={d}", got.ncols()))?;
        ensure(got.nrows() == c.hh.nrows(), "row count")?;
        let a_ref = attention_reference(&c.hh, &c.hp, &c.w1);
        let want = fuse_reference(&c.hh, &c.hp, &a_ref);
        for (i, row) in want.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                worst = worst.max((got[[i, k]] - v).abs());
            }
        }
    }
    ensure(worst <= 1e-6, format!("max deviation {worst:e}"))?;
    Ok(format!("max dev {worst:.1e}, width 3d"))
}

fn random_dist(rng: &mut ChaCha8Rng) -> LabelDistribution<f64> {
    let raw: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..1.0));
    let s: f64 = raw.iter().sum();
    LabelDistribution::new(raw.map(|v| v / s)).expect("normalised")
}

fn soft_ce_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    // one-hot target reduces to ordinary cross-entropy
    let mut one_hot_err = 0.0f64;
    for _ in 0..100 {
        let p = random_dist(&mut rng);
        for y in Label::ALL {
            let ce = soft_cross_entropy(&p, &LabelDistribution::one_hot(y));
            one_hot_err = one_hot_err.max((ce - (-p.prob(y).ln())).abs());
        }
    }
    ensure(one_hot_err <= 1e-12, format!("one-hot error {one_hot_err:e}"))?;

    let u = LabelDistribution::<f64>::uniform();
    let uniform_err = (soft_cross_entropy(&u, &u) - 3f64.ln()).abs();
    ensure(uniform_err <= 1e-9, format!("uniform error {uniform_err:e}"))?;
    for _ in 0..20 {
        let t = random_dist(&mut rng);
        let e = (soft_cross_entropy(&u, &t) - 3f64.ln()).abs();
        ensure(e <= 1e-9, format!("uniform prediction, random target: {e:e}"))?;
    }

    // analytic logit gradient against central differences
    let loss = |z: [f64; 3], t: &LabelDistribution<f64>| soft_cross_entropy(&LabelDistribution::from_logits(z), t);
    let h = 1e-5;
    let mut worst_rel = 0.0f64;
    for _ in 0..20 {
        let z: [f64; 3] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
        let t = random_dist(&mut rng);
        let g = soft_cross_entropy_logit_grad(z, &t);
        for k in 0..3 {
            let (mut up, mut down) = (z, z);
            up[k] += h;
            down[k] -= h;
            let fd = (loss(up, &t) - loss(down, &t)) / (2.0 * h);
            let rel = (g[k] - fd).abs() / fd.abs().max(1e-6);
            worst_rel = worst_rel.max(rel);
        }
    }
    ensure(worst_rel <= 1e-4, format!("gradient relative error {worst_rel:e}"))?;

    // the loss over a simplex grid is smallest at p = target
    let step = 20usize;
    let grid: Vec<[usize; 3]> = (0..=step)
        .flat_map(|a| (0..=step - a).map(move |b| [a, b, step - a - b]))
        .collect();
    let as_dist = |c: &[usize; 3]| LabelDistribution::new(c.map(|v| v as f64 / step as f64)).expect("grid point");
    for target in &grid {
        let t = as_dist(target);
        let best = grid
            .iter()
            .min_by(|a, b| soft_cross_entropy(&as_dist(a), &t).total_cmp(&soft_cross_entropy(&as_dist(b), &t)))
            .expect("non-empty grid");
        ensure(best == target, format!("minimum for target {target:?} at {best:?}"))?;
    }
    Ok(format!(
        "one-hot err {one_hot_err:.1e}, uniform err {uniform_err:.1e}, grad rel err {worst_rel:.1e}, {} grid targets",
        grid.len()
    ))
}

const WORDS: &[&str] = &[
    "a", "man", "woman", "dog", "is", "running", "in", "the", "park", "red", "ball", "two", "cats", "sleep",
    "outdoors", "street", "holding", "kite", "blue", "chef", "cooks", "food", "near", "beach",
];

fn random_sentence(rng: &mut ChaCha8Rng, min: usize, max: usize) -> String {
    let n = rng.random_range(min..=max);
    let mut words: Vec<String> = (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())].to_string()).collect();
    if rng.random_bool(0.5) {
        let last = words.last_mut().expect("non-empty");
        last.push(['.', ',', '!', '?'][rng.random_range(0..4)]);
    }
    if rng.random_bool(0.3) {
        let first = &mut words[0];
        *first = first[..1].to_uppercase() + &first[1..];
    }
    words.join(" ")
}

fn prompt_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut zero, mut all) = (0, 0);
    for i in 0..200 {
        let premise = random_sentence(&mut rng, 3, 12);
        let hypothesis = random_sentence(&mut rng, 1, 10);
        let n = hypothesis.split_whitespace().count();
        let mask: Vec<bool> = match i % 4 {
            0 => vec![false; n],
            1 => vec![true; n],
            _ => (0..n).map(|_| rng.random_bool(0.4)).collect(),
        };
        zero += usize::from(mask.iter().all(|m| !m));
        all += usize::from(mask.iter().all(|&m| m));
        let explanation = (i % 5 != 0).then(|| random_sentence(&mut rng, 2, 10));
        let text = build_prompt(&premise, &hypothesis, &mask, explanation.as_deref()).map_err(|e| e.to_string())?;
        let lower = text.to_lowercase();
        for l in Label::ALL {
            ensure(!lower.contains(l.as_str()), format!("prompt mentions `{l}`: {text:?}"))?;
        }
        let parsed = parse_prompt(&text).map_err(|e| format!("{e} in {text:?}"))?;
        let expected = GenerationPrompt {
            premise,
            hypothesis,
            word_mask: mask,
            explanation,
        };
        ensure(parsed == expected, format!("round trip changed {expected:?} into {parsed:?}"))?;
    }
    Ok(format!("200 prompts ({zero} zero-rationale, {all} all-rationale), no label words"))
}

fn metric_oracles() -> Outcome {
    use lirex::corpus::RationaleMask;
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let pairs: Vec<(RationaleMask, RationaleMask)> = (0..1000)
        .map(|_| {
            let n = rng.random_range(1..=20);
            let bits = |rng: &mut ChaCha8Rng| (0..n).map(|_| u8::from(rng.random_bool(0.3))).collect::<Vec<u8>>();
            (RationaleMask::from_labels(bits(&mut rng)), RationaleMask::from_labels(bits(&mut rng)))
        })
        .collect();
    let oracle = |ps: &[(RationaleMask, RationaleMask)]| {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (p, g) in ps {
            for k in 0..p.token_labels.len() {
                let (a, b) = (p.token_labels[k], g.token_labels[k]);
                tp += usize::from(a == 1 && b == 1);
                fp += usize::from(a == 1 && b == 0);
                fn_ += usize::from(a == 0 && b == 1);
            }
        }
        let div = |x: usize, y: usize| if y == 0 { 0.0 } else { x as f64 / y as f64 };
        (tp, fp, fn_, div(tp, tp + fp), div(tp, tp + fn_), div(2 * tp, 2 * tp + fp + fn_))
    };
    let check = |ps: &[(RationaleMask, RationaleMask)]| -> Result<(), String> {
        let preds: Vec<_> = ps.iter().map(|(p, _)| p.clone()).collect();
        let golds: Vec<_> = ps.iter().map(|(_, g)| g.clone()).collect();
        let got = token_prf(&preds, &golds).map_err(|e| e.to_string())?;
        let want = oracle(ps);
        let got_t = (got.tp, got.fp, got.fn_, got.precision, got.recall, got.f1);
        ensure(got_t == want, format!("token_prf {got_t:?} vs oracle {want:?}"))
    };
    for pair in pairs.chunks(1) {
        check(pair)?;
    }
    check(&pairs)?;

    use Label::{Contradiction as C, Entailment as E, Neutral as N};
    let acc = |p: &[Label], g: &[Label]| accuracy(p, g).map_err(|e| e.to_string());
    ensure(acc(&[E, N, C, E], &[E, N, N, C])? == 0.5, "2 of 4")?;
    ensure(acc(&[C, C, C], &[C, C, C])? == 1.0, "3 of 3")?;
    ensure(acc(&[E, E, E, E, E], &[N, N, N, N, E])? == 0.2, "1 of 5")?;
    ensure(acc(&[N], &[E])? == 0.0, "0 of 1")?;
    ensure(accuracy(&[E], &[E, N]).is_err(), "length mismatch accepted")?;
    ensure(accuracy(&[], &[]).is_err(), "empty lists accepted")?;
    ensure(majority_baseline(&[E, E, N]).map_err(|e| e.to_string())? == 2.0 / 3.0, "majority 2/3")?;
    Ok("1,000 pairs match individually and pooled; crafted accuracy lists match".into())
}

fn selection_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let labels = PerLabel::from_fn(|l| l.index());
    let mut ties = 0;
    for i in 0..1000 {
        let dist = if i % 2 == 0 {
            // tenths: ties are common
            let a = rng.random_range(0..=10);
            let b = rng.random_range(0..=10 - a);
            LabelDistribution::new([a, b, 10 - a - b].map(|v| v as f64 / 10.0)).map_err(|e| e.to_string())?
        } else {
            random_dist(&mut rng)
        };
        let p = dist.probs();
        let mut best = 0;
        for k in 1..3 {
            if p[k] > p[best] {
                best = k;
            }
        }
        ties += usize::from(p.iter().filter(|&&v| v == p[best]).count() > 1);
        let (label, &payload) = select_max(&labels, &dist);
        ensure(label.index() == best && payload == best, format!("{p:?}: got {label}, oracle {best}"))?;
    }
    let uniform = LabelDistribution::<f64>::uniform();
    ensure(select_max(&labels, &uniform).0 == Label::Entailment, "uniform tie goes to entailment")?;
    let tie = LabelDistribution::new([0.2, 0.4, 0.4]).map_err(|e| e.to_string())?;
    ensure(select_max(&labels, &tie).0 == Label::Neutral, "neutral/contradiction tie goes to neutral")?;

    let mut worst = 0.0f64;
    for (seed, target) in [(1u64, [0.2, 0.5, 0.3]), (2, [0.7, 0.25, 0.05]), (3, [1.0 / 3.0; 3])] {
        let dist = LabelDistribution::new(target).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut counts = [0usize; 3];
        for _ in 0..10_000 {
            let (label, &payload) = select_sample(&labels, &dist, &mut rng);
            ensure(payload == label.index(), "sampled explanation does not match label")?;
            counts[label.index()] += 1;
        }
        for k in 0..3 {
            worst = worst.max((counts[k] as f64 / 10_000.0 - target[k]).abs());
        }
    }
    ensure(worst <= 0.02, format!("frequency deviation {worst}"))?;
    Ok(format!("1,000 argmax checks ({ties} with ties), sampling deviation {worst:.4}"))
}

fn toy_config(root: &Path) -> PipelineConfig {
    let data = root.join("data");
    write_synthetic_splits(&data, 7, 200).expect("synthetic corpus");
    let mut config = PipelineConfig::toy(&data, &root.join("cache"));
    config.human_eval_samples = 10;
    config
}

struct ToyRun {
    config: PipelineConfig,
    reports: Vec<MetricReport>,
    elapsed: Duration,
}

fn full_run(root: &Path) -> Result<ToyRun, String> {
    let config = toy_config(root);
    let start = Instant::now();
    let mut reports = Vec::new();
    for stage in Stage::ALL {
        let out = run_stage(&config, stage, RunOptions::default()).map_err(|e| e.to_string())?;
        reports.extend(out.reports);
    }
    Ok(ToyRun {
        config,
        reports,
        elapsed: start.elapsed(),
    })
}

fn report<'a>(run: &'a ToyRun, name: &str) -> Result<&'a MetricReport, String> {
    run.reports.iter().find(|r| r.name == name).ok_or_else(|| format!("no `{name}` report"))
}

fn metric(run: &ToyRun, name: &str, key: &str) -> Result<f64, String> {
    report(run, name)?.get(key).ok_or_else(|| format!("`{name}` has no `{key}`"))
}

fn toy_end_to_end(run: &Result<ToyRun, String>) -> Outcome {
    let run = run.as_ref().map_err(Clone::clone)?;
    let secs = run.elapsed.as_secs_f64();
    ensure(secs < 600.0, format!("pipeline took {secs:.0}s"))?;
    let manifest = RunManifest::load(run.config.cache_dir()).map_err(|e| e.to_string())?;
    for s in Stage::ALL {
        ensure(manifest.is_complete(s), format!("{s} not flagged complete"))?;
    }
    ensure(manifest.verify(run.config.cache_dir()), "manifest digests do not match the files")?;
    let rat = metric(run, "rationalizer", "train_token_accuracy")?;
    ensure(rat >= 0.95, format!("rationalizer token accuracy {rat}"))?;
    let acc = metric(run, "evaluate_test", "accuracy")?;
    let majority = metric(run, "evaluate_test", "majority")?;
    ensure(acc >= 0.80, format!("held-out accuracy {acc}"))?;
    ensure(acc > majority, format!("accuracy {acc} not above majority {majority}"))?;
    let leaks = metric(run, "generate", "label_leaks")?;
    ensure(leaks == 0.0, format!("{leaks} prompts leak a label"))?;
    Ok(format!(
        "{secs:.1}s, rationalizer token acc {rat:.3}, test acc {acc:.3} vs majority {majority:.3}"
    ))
}

/// Inference models for every mode trained on gold (template) explanations.
struct OracleModels {
    tokenizer: WordTokenizer,
    train: Vec<AnnotatedInstance>,
    test: Vec<AnnotatedInstance>,
    models: Vec<(InferenceMode, Classifier)>,
}

fn oracle_models() -> Result<OracleModels, String> {
    let (train, _, test) = split_corpus(make_synthetic_corpus(7, 200).map_err(|e| e.to_string())?);
    // restated hypotheses carry no template fact
    let train: Vec<_> = train.into_iter().filter(|a| !is_noninformative(a)).collect();
    let test: Vec<_> = test.into_iter().filter(|a| !is_noninformative(a)).collect();
    let tokenizer = WordTokenizer::fit(
        train
            .iter()
            .flat_map(|a| [a.base.premise.as_str(), a.base.hypothesis.as_str(), a.gold_explanation.as_str()]),
    );
    let items: Vec<InferenceItem> = train
        .iter()
        .map(|a| InferenceItem {
            instance_id: a.id().to_string(),
            premise: a.base.premise.clone(),
            hypothesis: a.base.hypothesis.clone(),
            explanations: PerLabel::from_fn(|_| a.gold_explanation.clone()),
            target: LabelDistribution::one_hot(a.base.gold_label),
        })
        .collect();
    let config = TrainingConfig::classifier_tiny().with_seed(11);
    let models = InferenceMode::ALL
        .into_iter()
        .map(|mode| {
            let mut m = Classifier::new("inference", tokenizer.clone(), TinyDims::default(), 11);
            train_inference(&mut m, mode, &items, SelectionStrategy::Max, &config).map_err(|e| e.to_string())?;
            Ok((mode, m))
        })
        .collect::<Result<_, String>>()?;
    Ok(OracleModels {
        tokenizer,
        train,
        test,
        models,
    })
}

fn faithfulness(oracle: &Result<OracleModels, String>) -> Outcome {
    let o = oracle.as_ref().map_err(Clone::clone)?;
    let data: Vec<ExplainedInstance> = o
        .test
        .iter()
        .map(|a| ExplainedInstance {
            instance: a.base.clone(),
            explanation: a.gold_explanation.clone(),
        })
        .collect();
    let refs: Vec<(InferenceMode, &Classifier)> = o.models.iter().map(|(m, c)| (*m, c)).collect();
    let r = faithfulness_probe(&refs, &data, 6).map_err(|e| e.to_string())?;
    let (de, d, e, maj) = (r.values["acc_d_e"], r.values["acc_d"], r.values["acc_e"], r.values["majority"]);
    ensure(de >= d, format!("D+E {de} below D {d}"))?;
    ensure(e > maj, format!("E-only {e} not above majority {maj}"))?;
    Ok(format!("D+E {de:.3}, D {d:.3}, E {e:.3}, majority {maj:.3} (n={})", data.len()))
}

fn spurious(oracle: &Result<OracleModels, String>) -> Outcome {
    let o = oracle.as_ref().map_err(Clone::clone)?;
    let model = &o.models.iter().find(|(m, _)| *m == InferenceMode::All).expect("all model").1;

    // identical candidates: selection cannot matter
    let same: Vec<CandidateInstance<f32>> = o
        .test
        .iter()
        .map(|a| CandidateInstance {
            instance: a.base.clone(),
            explanations: PerLabel::from_fn(|_| a.gold_explanation.clone()),
            dist: LabelDistribution::uniform(),
        })
        .collect();
    let r = spurious_probe(model, InferenceMode::All, &same, 9).map_err(|e| e.to_string())?;
    let (b, rd) = (r.values["acc_best"], r.values["acc_rand"]);
    ensure(b == rd, format!("identical explanations: best {b} != rand {rd}"))?;

    // non-gold candidates replaced by explanations written for another label
    let mut selector = Classifier::new("selector", o.tokenizer.clone(), TinyDims::default(), 12);
    let bases: Vec<NliInstance> = o.train.iter().map(|a| a.base.clone()).collect();
    train_selector(&mut selector, &bases, &TrainingConfig::classifier_tiny().with_seed(12)).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let pool = |l: Label| -> Vec<&str> {
        o.train.iter().filter(|a| a.base.gold_label == l).map(|a| a.gold_explanation.as_str()).collect()
    };
    let pools = PerLabel::from_fn(pool);
    let corrupted = o
        .test
        .iter()
        .map(|a| {
            let explanations = PerLabel::from_fn(|l| {
                if l == a.base.gold_label {
                    a.gold_explanation.clone()
                } else {
                    let p = pools.get(l);
                    p[rng.random_range(0..p.len())].to_string()
                }
            });
            let dist = selector.classify(&a.base.premise, &a.base.hypothesis)?;
            Ok(CandidateInstance {
                instance: a.base.clone(),
                explanations,
                dist,
            })
        })
        .collect::<lirex::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let r = spurious_probe(model, InferenceMode::All, &corrupted, 9).map_err(|e| e.to_string())?;
    let (cb, cr) = (r.values["acc_best"], r.values["acc_rand"]);
    ensure(cb >= cr, format!("corrupted: best {cb} below rand {cr}"))?;
    Ok(format!("identical: best = rand = {b:.3}; corrupted: best {cb:.3} >= rand {cr:.3}"))
}

fn determinism(first: &Result<ToyRun, String>, second: &Result<ToyRun, String>) -> Outcome {
    let a = first.as_ref().map_err(Clone::clone)?;
    let b = second.as_ref().map_err(Clone::clone)?;
    let (la, lb) = (Layout::new(&a.config), Layout::new(&b.config));
    let read = |p: std::path::PathBuf| std::fs::read(&p).map_err(|e| format!("{}: {e}", p.display()));
    let mut compared = 0;
    for s in Stage::ALL {
        let (ra, rb) = (la.report(s), lb.report(s));
        if ra.exists() || rb.exists() {
            ensure(read(ra)? == read(rb)?, format!("{s} reports differ between runs"))?;
            compared += 1;
        }
    }
    // rerunning evaluate on unchanged inputs rewrites the same bytes
    let before = read(la.report(Stage::Evaluate))?;
    run_stage(&a.config, Stage::Evaluate, RunOptions::default()).map_err(|e| e.to_string())?;
    ensure(read(la.report(Stage::Evaluate))? == before, "evaluate rerun changed the report")?;
    Ok(format!("{compared} stage reports byte-identical across runs; evaluate rerun identical"))
}

fn human_eval_plumbing(run: &Result<ToyRun, String>) -> Outcome {
    let run = run.as_ref().map_err(Clone::clone)?;
    let q = Question::ExplanationContainsRationaleInfo;
    let mut sink = Vec::new();
    let answers = "y\nn\ny\ny\nn\ny\nn\nn\ny\ny\n";
    let out = annotate(&run.config, q, "a1", &mut Cursor::new(answers), &mut sink).map_err(|e| e.to_string())?;
    ensure(out.completed && out.records.len() == 10, format!("{} records in session", out.records.len()))?;
    let path = Layout::new(&run.config).annotations(q);
    let stored: Vec<AnnotationRecord> = read_jsonl(&path).map_err(|e| e.to_string())?;
    ensure(stored.len() == 10, format!("{} records persisted", stored.len()))?;

    let recs = |who: &str, js: [u8; 4]| -> Vec<AnnotationRecord> {
        js.iter()
            .enumerate()
            .map(|(i, &j)| AnnotationRecord {
                instance_id: format!("x{i}"),
                annotator_id: who.into(),
                question: q,
                judgment: j,
                timestamp: 0,
            })
            .collect()
    };
    let (raw, kappa) = agreement(&recs("a", [1, 1, 0, 0]), &recs("b", [1, 0, 1, 0])).map_err(|e| e.to_string())?;
    ensure((raw - 0.5).abs() < 1e-12, format!("raw agreement {raw}"))?;
    ensure(kappa.abs() < 1e-12, format!("kappa {kappa}"))?;
    Ok(format!("10 records persisted; raw {raw}, kappa {kappa}"))
}

fn main() {
    let started = Instant::now();
    let mut failures = 0;
    let mut check = |name: &str, f: &mut dyn FnMut() -> Outcome| {
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failures += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    };

    check("cross-attention oracle", &mut cross_attention_oracle);
    check("fusion oracle", &mut fuse_oracle);
    check("soft cross-entropy", &mut soft_ce_suite);
    check("prompt round-trip", &mut prompt_round_trip);
    check("metric oracles", &mut metric_oracles);
    check("selection", &mut selection_checks);

    let dir_a = tempfile::tempdir().expect("tempdir");
    let dir_b = tempfile::tempdir().expect("tempdir");
    let run_a = full_run(dir_a.path());
    check("toy end-to-end", &mut || toy_end_to_end(&run_a));

    let oracle = oracle_models();
    check("faithfulness probe", &mut || faithfulness(&oracle));
    check("spurious probe", &mut || spurious(&oracle));

    let run_b = full_run(dir_b.path());
    check("determinism", &mut || determinism(&run_a, &run_b));
    check("human-eval plumbing", &mut || human_eval_plumbing(&run_a));

    println!(
        "acceptance: {} criteria failed ({:.1}s)",
        failures,
        started.elapsed().as_secs_f64()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
