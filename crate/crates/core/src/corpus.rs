//! Corpus ingestion: e-SNLI style annotated files, plain NLI files, the
//! non-informative explanation filter and highlight-to-token masks.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::Label;
use crate::text::{word_core, word_spans, Token};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NliInstance {
    pub instance_id: String,
    pub premise: String,
    pub hypothesis: String,
    pub gold_label: Label,
}

impl NliInstance {
    pub fn new(
        instance_id: impl Into<String>,
        premise: &str,
        hypothesis: &str,
        gold_label: Label,
    ) -> Result<Self> {
        let premise = premise.trim();
        let hypothesis = hypothesis.trim();
        if premise.is_empty() || hypothesis.is_empty() {
            return Err(Error::Consistency("premise and hypothesis must be non-empty".into()));
        }
        Ok(NliInstance {
            instance_id: instance_id.into(),
            premise: premise.to_string(),
            hypothesis: hypothesis.to_string(),
            gold_label,
        })
    }
}

/// An instance with human rationale highlights and a gold explanation.
/// Highlight spans are half-open `[start, end)` ranges of whitespace word
/// indices into the hypothesis, sorted and non-overlapping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedInstance {
    pub base: NliInstance,
    pub highlight_spans: Vec<(usize, usize)>,
    pub gold_explanation: String,
}

impl AnnotatedInstance {
    pub fn new(base: NliInstance, spans: Vec<(usize, usize)>, explanation: &str) -> Result<Self> {
        let explanation = explanation.trim();
        if explanation.is_empty() {
            return Err(Error::Consistency(format!(
                "{}: empty gold explanation",
                base.instance_id
            )));
        }
        let words = word_spans(&base.hypothesis).len();
        let highlight_spans = normalize_spans(spans);
        if let Some(&(s, e)) = highlight_spans.iter().find(|(s, e)| s >= e || *e > words) {
            return Err(Error::Consistency(format!(
                "{}: highlight span ({s}, {e}) outside {words} hypothesis words",
                base.instance_id
            )));
        }
        Ok(AnnotatedInstance {
            base,
            highlight_spans,
            gold_explanation: explanation.to_string(),
        })
    }

    pub fn id(&self) -> &str {
        &self.base.instance_id
    }

    /// Word-level mask over the hypothesis' whitespace words.
    pub fn word_mask(&self) -> Vec<bool> {
        let n = word_spans(&self.base.hypothesis).len();
        let mut mask = vec![false; n];
        for &(s, e) in &self.highlight_spans {
            for m in &mut mask[s..e.min(n)] {
                *m = true;
            }
        }
        mask
    }
}

/// Sorts and merges overlapping or touching spans.
fn normalize_spans(mut spans: Vec<(usize, usize)>) -> Vec<(usize, usize)> {
    spans.sort_unstable();
    let mut out: Vec<(usize, usize)> = Vec::with_capacity(spans.len());
    for (s, e) in spans {
        match out.last_mut() {
            Some(last) if s <= last.1 && s < e => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

/// Token-level rationale labels with their probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationaleMask {
    pub token_labels: Vec<u8>,
    pub token_probs: Vec<f64>,
}

impl RationaleMask {
    /// Labels follow `p > 0.5`; positions flagged in `special` are forced to 0.
    pub fn from_probs(probs: Vec<f64>, special: &[bool]) -> Self {
        assert_eq!(probs.len(), special.len(), "mask/special length");
        let token_labels = probs
            .iter()
            .zip(special)
            .map(|(&p, &sp)| u8::from(!sp && p > 0.5))
            .collect();
        let token_probs = probs
            .into_iter()
            .zip(special)
            .map(|(p, &sp)| if sp { 0.0 } else { p })
            .collect();
        RationaleMask {
            token_labels,
            token_probs,
        }
    }

    /// Gold mask: probabilities are the labels themselves.
    pub fn from_labels(labels: Vec<u8>) -> Self {
        let token_probs = labels.iter().map(|&l| f64::from(l)).collect();
        RationaleMask {
            token_labels: labels,
            token_probs,
        }
    }

    pub fn len(&self) -> usize {
        self.token_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_labels.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.token_labels.iter().filter(|&&l| l == 1).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Dev,
    Test,
    DevMatched,
    DevMismatched,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::Test => "test",
            SplitName::DevMatched => "dev_matched",
            SplitName::DevMismatched => "dev_mismatched",
        }
    }
}

/// Records that carry an instance id.
pub trait HasId {
    fn instance_id(&self) -> &str;
}

impl HasId for NliInstance {
    fn instance_id(&self) -> &str {
        &self.instance_id
    }
}

impl HasId for AnnotatedInstance {
    fn instance_id(&self) -> &str {
        &self.base.instance_id
    }
}

/// A named split; `skipped` counts rows rejected while loading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit<R> {
    pub name: SplitName,
    pub instances: Vec<R>,
    pub skipped: usize,
}

impl<R: HasId> CorpusSplit<R> {
    pub fn new(name: SplitName, instances: Vec<R>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &instances {
            if !seen.insert(r.instance_id()) {
                return Err(Error::Consistency(format!(
                    "duplicate instance id {} in {} split",
                    r.instance_id(),
                    name.as_str()
                )));
            }
        }
        Ok(CorpusSplit {
            name,
            instances,
            skipped: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.instances.iter().map(HasId::instance_id).collect()
    }
}

/// Header names looked up (case-insensitively) in corpus files. The
/// defaults match the e-SNLI release; MultiNLI/SNLI files also match the
/// id, premise, hypothesis and label names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnNames {
    pub id: String,
    pub premise: String,
    pub hypothesis: String,
    pub label: String,
    pub explanation: String,
    pub highlights: String,
}

impl Default for ColumnNames {
    fn default() -> Self {
        ColumnNames {
            id: "pairID".into(),
            premise: "Sentence1".into(),
            hypothesis: "Sentence2".into(),
            label: "gold_label".into(),
            explanation: "Explanation_1".into(),
            highlights: "Sentence2_Highlighted_1".into(),
        }
    }
}

struct Table {
    header: Vec<String>,
    rows: Vec<csv::StringRecord>,
    malformed: usize,
}

impl Table {
    fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h.trim().eq_ignore_ascii_case(name))
    }
}

/// Reads a comma- or tab-delimited table; the delimiter is taken from the
/// header line. Tab-separated files are read without quote handling.
fn read_table(path: &Path) -> Result<Table> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first).map_err(|e| Error::io(path, e))?;
    if first.trim().is_empty() {
        return Ok(Table {
            header: Vec::new(),
            rows: Vec::new(),
            malformed: 0,
        });
    }
    let tab = first.contains('\t');
    let mut rest = String::new();
    reader.read_to_string(&mut rest).map_err(|e| Error::io(path, e))?;
    let full = first + &rest;

    let mut builder = csv::ReaderBuilder::new();
    builder.has_headers(true).flexible(true);
    if tab {
        builder.delimiter(b'\t').quoting(false);
    }
    let mut rdr = builder.from_reader(full.as_bytes());
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let header = rdr
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(|h| h.trim_start_matches('\u{feff}').to_string())
        .collect();
    let mut rows = Vec::new();
    let mut malformed = 0;
    for rec in rdr.records() {
        match rec {
            Ok(r) => rows.push(r),
            Err(e) if e.is_io_error() => return Err(csv_err(e)),
            Err(_) => malformed += 1,
        }
    }
    Ok(Table {
        header,
        rows,
        malformed,
    })
}

fn required(table: &Table, name: &str, path: &Path) -> Result<usize> {
    table.column(name).ok_or_else(|| {
        Error::Config(format!("{}: missing column `{name}`", path.display()))
    })
}

/// Parses e-SNLI highlight cells: comma-separated word indices, with `{}`
/// or an empty cell meaning no highlight.
fn parse_highlights(cell: &str) -> Option<Vec<(usize, usize)>> {
    let cell = cell.trim().trim_start_matches('{').trim_end_matches('}').trim();
    if cell.is_empty() {
        return Some(Vec::new());
    }
    cell.split(',')
        .map(|s| s.trim().parse::<usize>().ok().map(|i| (i, i + 1)))
        .collect()
}

struct RowReader<'a> {
    table: &'a Table,
    path: &'a Path,
    id: Option<usize>,
    premise: usize,
    hypothesis: usize,
    label: usize,
    skipped: usize,
    seen: HashSet<String>,
}

impl<'a> RowReader<'a> {
    fn new(table: &'a Table, path: &'a Path, cols: &ColumnNames) -> Result<Self> {
        Ok(RowReader {
            table,
            path,
            id: table.column(&cols.id),
            premise: required(table, &cols.premise, path)?,
            hypothesis: required(table, &cols.hypothesis, path)?,
            label: required(table, &cols.label, path)?,
            skipped: table.malformed,
            seen: HashSet::new(),
        })
    }

    fn base(&mut self, row_no: usize, row: &csv::StringRecord) -> Option<NliInstance> {
        let label = row.get(self.label).and_then(|l| l.parse::<Label>().ok());
        let id = match self.id.and_then(|i| row.get(i)).map(str::trim) {
            Some(id) if !id.is_empty() => id.to_string(),
            _ => format!("row-{row_no}"),
        };
        let premise = row.get(self.premise).unwrap_or("");
        let hypothesis = row.get(self.hypothesis).unwrap_or("");
        let inst = label.and_then(|l| NliInstance::new(id, premise, hypothesis, l).ok());
        match inst {
            Some(inst) if self.seen.insert(inst.instance_id.clone()) => Some(inst),
            _ => {
                self.skipped += 1;
                None
            }
        }
    }

    fn finish(&self) {
        if self.skipped > 0 {
            log::warn!(
                "{}: skipped {} of {} rows",
                self.path.display(),
                self.skipped,
                self.table.rows.len() + self.table.malformed
            );
        }
    }
}

/// Loads an e-SNLI style file. Rows without a usable label (including the
/// `-` no-consensus marker), without an explanation, or with out-of-range
/// highlights are skipped and counted. Only the first annotator's
/// highlight and explanation columns are read.
pub fn load_esnli(
    path: &Path,
    name: SplitName,
    cols: &ColumnNames,
) -> Result<CorpusSplit<AnnotatedInstance>> {
    let table = read_table(path)?;
    if table.header.is_empty() {
        return Ok(CorpusSplit {
            name,
            instances: Vec::new(),
            skipped: 0,
        });
    }
    let explanation = required(&table, &cols.explanation, path)?;
    let highlights = required(&table, &cols.highlights, path)?;
    let mut reader = RowReader::new(&table, path, cols)?;
    let mut instances = Vec::new();
    for (row_no, row) in table.rows.iter().enumerate() {
        let Some(base) = reader.base(row_no, row) else {
            continue;
        };
        let spans = row.get(highlights).and_then(parse_highlights);
        let expl = row.get(explanation).unwrap_or("");
        match spans.map(|s| AnnotatedInstance::new(base.clone(), s, expl)) {
            Some(Ok(inst)) => instances.push(inst),
            _ => {
                reader.seen.remove(&base.instance_id);
                reader.skipped += 1;
            }
        }
    }
    reader.finish();
    Ok(CorpusSplit {
        name,
        instances,
        skipped: reader.skipped,
    })
}

/// Loads a plain NLI file (premise, hypothesis, label), e.g. for transfer
/// evaluation. Skip policy matches [`load_esnli`].
pub fn load_nli(path: &Path, name: SplitName, cols: &ColumnNames) -> Result<CorpusSplit<NliInstance>> {
    let table = read_table(path)?;
    if table.header.is_empty() {
        return Ok(CorpusSplit {
            name,
            instances: Vec::new(),
            skipped: 0,
        });
    }
    let mut reader = RowReader::new(&table, path, cols)?;
    let instances: Vec<_> = table
        .rows
        .iter()
        .enumerate()
        .filter_map(|(i, row)| reader.base(i, row))
        .collect();
    reader.finish();
    Ok(CorpusSplit {
        name,
        instances,
        skipped: reader.skipped,
    })
}

/// Lowercase, drop punctuation, collapse whitespace.
pub fn normalize_for_containment(text: &str) -> String {
    let stripped: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// True when the explanation contains the whole premise or hypothesis.
pub fn is_noninformative(inst: &AnnotatedInstance) -> bool {
    let expl = normalize_for_containment(&inst.gold_explanation);
    [&inst.base.premise, &inst.base.hypothesis].iter().any(|t| {
        let t = normalize_for_containment(t);
        !t.is_empty() && expl.contains(&t)
    })
}

/// Partitions a split into (kept, held_out); held-out instances are only
/// excluded from generator training.
pub fn filter_noninformative(
    split: &CorpusSplit<AnnotatedInstance>,
) -> (CorpusSplit<AnnotatedInstance>, CorpusSplit<AnnotatedInstance>) {
    let (held, kept): (Vec<_>, Vec<_>) = split
        .instances
        .iter()
        .cloned()
        .partition(is_noninformative);
    let make = |instances| CorpusSplit {
        name: split.name,
        instances,
        skipped: 0,
    };
    (make(kept), make(held))
}

/// Token mask from word-level highlights. A token is a rationale token iff
/// its byte span overlaps the alphanumeric core of a highlighted word.
/// Tokens without a span (separators) are always 0. Token spans must index
/// into the hypothesis text.
pub fn mask_from_highlights(inst: &AnnotatedInstance, tokens: &[Token]) -> Result<RationaleMask> {
    let hyp = &inst.base.hypothesis;
    for t in tokens {
        if let Some((s, e)) = t.span {
            let ok = s <= e
                && e <= hyp.len()
                && hyp.is_char_boundary(s)
                && hyp.is_char_boundary(e)
                && hyp[s..e] == t.text;
            if !ok {
                return Err(Error::Consistency(format!(
                    "{}: token `{}` at {s}..{e} does not match the hypothesis",
                    inst.id(),
                    t.text
                )));
            }
        }
    }
    let words = word_spans(hyp);
    let highlighted: Vec<(usize, usize)> = inst
        .word_mask()
        .iter()
        .zip(&words)
        .filter(|(m, _)| **m)
        .map(|(_, &(ws, we))| {
            let (cs, ce) = word_core(&hyp[ws..we]);
            (ws + cs, ws + ce)
        })
        .collect();
    let labels = tokens
        .iter()
        .map(|t| match t.span {
            Some((s, e)) => u8::from(highlighted.iter().any(|&(hs, he)| s.max(hs) < e.min(he))),
            None => 0,
        })
        .collect();
    Ok(RationaleMask::from_labels(labels))
}

/// One line of the canonical record file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalRecord {
    pub instance_id: String,
    pub premise: String,
    pub hypothesis: String,
    pub gold_label: Label,
    pub highlight_spans: Vec<(usize, usize)>,
    pub gold_explanation: Option<String>,
}

impl From<&AnnotatedInstance> for CanonicalRecord {
    fn from(a: &AnnotatedInstance) -> Self {
        CanonicalRecord {
            instance_id: a.base.instance_id.clone(),
            premise: a.base.premise.clone(),
            hypothesis: a.base.hypothesis.clone(),
            gold_label: a.base.gold_label,
            highlight_spans: a.highlight_spans.clone(),
            gold_explanation: Some(a.gold_explanation.clone()),
        }
    }
}

impl From<&NliInstance> for CanonicalRecord {
    fn from(n: &NliInstance) -> Self {
        CanonicalRecord {
            instance_id: n.instance_id.clone(),
            premise: n.premise.clone(),
            hypothesis: n.hypothesis.clone(),
            gold_label: n.gold_label,
            highlight_spans: Vec::new(),
            gold_explanation: None,
        }
    }
}

impl CanonicalRecord {
    pub fn to_nli(&self) -> Result<NliInstance> {
        NliInstance::new(
            self.instance_id.clone(),
            &self.premise,
            &self.hypothesis,
            self.gold_label,
        )
    }

    /// `None` for records without a gold explanation.
    pub fn to_annotated(&self) -> Option<Result<AnnotatedInstance>> {
        let expl = self.gold_explanation.as_deref()?;
        Some(
            self.to_nli()
                .and_then(|b| AnnotatedInstance::new(b, self.highlight_spans.clone(), expl)),
        )
    }
}
