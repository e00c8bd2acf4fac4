//! Rationale-annotated classification datasets.
//!
//! Every dataset is converted once into [`Example`]s whose human rationale is a
//! set of indices into a single word index space: the concatenation of the
//! task's segments in canonical order (premise then hypothesis for NLI, the
//! bio alone for occupation classification).
//!
//! Word segmentation splits on whitespace and detaches boundary punctuation.
//! A whitespace token yields at most one word, which keeps indices produced
//! by whitespace-tokenized annotation schemes stable under re-segmentation.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use serde::de::Deserializer;
use serde::ser::{SerializeMap, Serializer};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Characters stripped from either end of a whitespace token.
const BOUNDARY_PUNCT: &[char] = &[
    '.', ',', ';', ':', '!', '?', '"', '\'', '`', '(', ')', '[', ']', '\u{201c}', '\u{201d}',
    '\u{2018}', '\u{2019}',
];

pub const NLI_LABELS: [&str; 3] = ["entailment", "neutral", "contradiction"];
pub const BIOS_LABELS: [&str; 5] = ["psychologist", "surgeon", "nurse", "dentist", "physician"];

pub(crate) fn is_boundary_punct(c: char) -> bool {
    BOUNDARY_PUNCT.contains(&c)
}

/// Strips boundary punctuation. Returns `None` when nothing word-like remains.
pub(crate) fn word_core(token: &str) -> Option<Range<usize>> {
    let start = token.len() - token.trim_start_matches(is_boundary_punct).len();
    let end = token.trim_end_matches(is_boundary_punct).len();
    if start >= end {
        return None;
    }
    let core = &token[start..end];
    if !core.chars().any(char::is_alphanumeric) {
        return None;
    }
    Some(start..end)
}

/// Casefolded word core used wherever words are compared.
pub fn normalize_word(token: &str) -> String {
    match word_core(token) {
        Some(r) => token[r].to_lowercase(),
        None => String::new(),
    }
}

/// A whitespace token of some text and the word it yields, if any.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct RawToken {
    pub span: Range<usize>,
    pub word: Option<Range<usize>>,
}

pub(crate) fn whitespace_tokens(text: &str) -> Vec<RawToken> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                out.push(raw_token(text, s, i));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push(raw_token(text, s, text.len()));
    }
    out
}

/// Byte ranges of the whitespace-separated tokens of `text`.
pub fn whitespace_token_spans(text: &str) -> Vec<Range<usize>> {
    whitespace_tokens(text).into_iter().map(|t| t.span).collect()
}

fn raw_token(text: &str, start: usize, end: usize) -> RawToken {
    let word = word_core(&text[start..end]).map(|r| start + r.start..start + r.end);
    RawToken {
        span: start..end,
        word,
    }
}

/// Ordered words of a text with their byte ranges in that text.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WordSequence {
    words: Vec<String>,
    spans: Vec<Range<usize>>,
}

impl WordSequence {
    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Byte ranges into the segmented text, strictly ascending and disjoint.
    pub fn spans(&self) -> &[Range<usize>] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Range<usize>)> {
        self.words.iter().map(String::as_str).zip(self.spans.iter())
    }

    fn push(&mut self, word: String, span: Range<usize>) {
        self.words.push(word);
        self.spans.push(span);
    }
}

/// Splits `text` into words: whitespace tokens with boundary punctuation
/// (`.,;:!?"'` and backticks, parentheses, brackets, typographic quotes)
/// removed. Tokens with no alphanumeric character left are not words.
/// Internal apostrophes and hyphens are kept.
pub fn segment_words(text: &str) -> WordSequence {
    let mut seq = WordSequence::default();
    for tok in whitespace_tokens(text) {
        if let Some(w) = tok.word {
            seq.push(text[w.clone()].to_string(), w);
        }
    }
    seq
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Nli,
    Bios,
}

impl Task {
    /// Segment names in concatenation order.
    pub fn segment_names(self) -> &'static [&'static str] {
        match self {
            Task::Nli => &["premise", "hypothesis"],
            Task::Bios => &["bio"],
        }
    }

    pub fn default_labels(self) -> Vec<String> {
        let labels: &[&str] = match self {
            Task::Nli => &NLI_LABELS,
            Task::Bios => &BIOS_LABELS,
        };
        labels.iter().map(|s| s.to_string()).collect()
    }

    /// Top-Ratio fraction used for this task.
    pub fn default_top_ratio(self) -> f64 {
        match self {
            Task::Nli => 0.20,
            Task::Bios => 0.13,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Nli => "nli",
            Task::Bios => "bios",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nli" => Ok(Task::Nli),
            "bios" => Ok(Task::Bios),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub text: String,
    pub words: WordSequence,
}

/// One classification instance with its human rationale.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    id: String,
    task: Task,
    segments: Vec<Segment>,
    label_space: Vec<String>,
    gold_label: String,
    human_rationale: BTreeSet<usize>,
}

impl Example {
    /// Builds and validates an example. `segments` may be given in any order
    /// but must contain exactly the task's segment names.
    pub fn new(
        id: impl Into<String>,
        task: Task,
        segments: impl IntoIterator<Item = (String, String)>,
        label_space: Vec<String>,
        gold_label: impl Into<String>,
        human_rationale: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        let id = id.into();
        let mut by_name: BTreeMap<String, String> = segments.into_iter().collect();
        let mut ordered = Vec::new();
        for name in task.segment_names() {
            let text = by_name.remove(*name).ok_or_else(|| Error::Validation {
                id: id.clone(),
                message: format!("missing segment {name:?} for task {task}"),
            })?;
            let words = segment_words(&text);
            ordered.push(Segment {
                name: name.to_string(),
                text,
                words,
            });
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Validation {
                id,
                message: format!("unexpected segment {extra:?} for task {task}"),
            });
        }
        let ex = Example {
            id,
            task,
            segments: ordered,
            label_space,
            gold_label: gold_label.into(),
            human_rationale: human_rationale.into_iter().collect(),
        };
        ex.validate()?;
        Ok(ex)
    }

    fn validate(&self) -> Result<()> {
        let fail = |message: String| Error::Validation {
            id: self.id.clone(),
            message,
        };
        let expected = self.task.default_labels();
        let mut got = self.label_space.clone();
        let mut want = expected.clone();
        got.sort();
        want.sort();
        if got != want {
            return Err(fail(format!(
                "label space {:?} does not match task {} labels {:?}",
                self.label_space, self.task, expected
            )));
        }
        if !self.label_space.contains(&self.gold_label) {
            return Err(fail(format!(
                "gold label {:?} not in label space",
                self.gold_label
            )));
        }
        let n = self.word_count();
        if let Some(&bad) = self.human_rationale.iter().find(|&&i| i >= n) {
            return Err(fail(format!(
                "rationale index {bad} out of range for {n} input words"
            )));
        }
        Ok(())
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn label_space(&self) -> &[String] {
        &self.label_space
    }

    pub fn gold_label(&self) -> &str {
        &self.gold_label
    }

    pub fn human_rationale(&self) -> &BTreeSet<usize> {
        &self.human_rationale
    }

    /// Empty rationales are allowed but excluded from Top-Var runs and
    /// alignment averages.
    pub fn is_degenerate(&self) -> bool {
        self.human_rationale.is_empty()
    }

    pub fn word_count(&self) -> usize {
        self.segments.iter().map(|s| s.words.len()).sum()
    }

    /// Index of the first word of each segment in the concatenated sequence.
    pub fn segment_offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.segments
            .iter()
            .map(|s| {
                let off = acc;
                acc += s.words.len();
                off
            })
            .collect()
    }
}

/// The single word index space over all input segments. Spans stay relative
/// to their own segment text; use [`Example::segment_offsets`] to map back.
pub fn concat_input(example: &Example) -> WordSequence {
    let mut seq = WordSequence::default();
    for seg in &example.segments {
        for (w, span) in seg.words.iter() {
            seq.push(w.to_string(), span.clone());
        }
    }
    seq
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub examples: Vec<Example>,
    pub top_ratio: f64,
}

impl Dataset {
    pub fn new(name: impl Into<String>, examples: Vec<Example>, top_ratio: f64) -> Result<Self> {
        if !(top_ratio > 0.0 && top_ratio <= 1.0) {
            return Err(Error::Config(format!("top_ratio {top_ratio} outside (0, 1]")));
        }
        let mut seen = HashSet::new();
        for ex in &examples {
            if !seen.insert(ex.id.as_str()) {
                return Err(Error::Validation {
                    id: ex.id.clone(),
                    message: "duplicate example id".into(),
                });
            }
        }
        let degenerate = examples.iter().filter(|e| e.is_degenerate()).count();
        if degenerate > 0 {
            warn!("{degenerate} example(s) have an empty human rationale");
        }
        Ok(Dataset {
            name: name.into(),
            examples,
            top_ratio,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.examples.iter().find(|e| e.id == id)
    }

    pub fn degenerate_count(&self) -> usize {
        self.examples.iter().filter(|e| e.is_degenerate()).count()
    }

    /// Deterministic subset of `size` examples drawn with `seed`, kept in
    /// original file order.
    pub fn subset(&self, size: usize, seed: u64) -> Dataset {
        use rand::SeedableRng;
        if size >= self.examples.len() {
            return self.clone();
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut picked = rand::seq::index::sample(&mut rng, self.examples.len(), size).into_vec();
        picked.sort_unstable();
        Dataset {
            name: self.name.clone(),
            examples: picked.into_iter().map(|i| self.examples[i].clone()).collect(),
            top_ratio: self.top_ratio,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adapter {
    EraserEsnli,
    Medicalbios,
    Normalized,
}

impl FromStr for Adapter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eraser_esnli" => Ok(Adapter::EraserEsnli),
            "medicalbios" => Ok(Adapter::Medicalbios),
            "normalized" => Ok(Adapter::Normalized),
            other => Err(Error::Config(format!("unknown dataset adapter {other:?}"))),
        }
    }
}

/// Segment map serialized in the task's canonical order.
#[derive(Debug, Clone, PartialEq, Eq)]
struct OrderedSegments(Vec<(String, String)>);

impl Serialize for OrderedSegments {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for OrderedSegments {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = BTreeMap::<String, String>::deserialize(d)?;
        Ok(OrderedSegments(map.into_iter().collect()))
    }
}

/// One line of the normalized dataset format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizedRecord {
    id: String,
    task: Task,
    segments: OrderedSegments,
    label_space: Vec<String>,
    gold_label: String,
    rationale_words: Vec<usize>,
}

impl NormalizedRecord {
    pub fn from_example(ex: &Example) -> Self {
        NormalizedRecord {
            id: ex.id.clone(),
            task: ex.task,
            segments: OrderedSegments(
                ex.segments
                    .iter()
                    .map(|s| (s.name.clone(), s.text.clone()))
                    .collect(),
            ),
            label_space: ex.label_space.clone(),
            gold_label: ex.gold_label.clone(),
            rationale_words: ex.human_rationale.iter().copied().collect(),
        }
    }

    pub fn into_example(self) -> Result<Example> {
        Example::new(
            self.id,
            self.task,
            self.segments.0,
            self.label_space,
            self.gold_label,
            self.rationale_words,
        )
    }
}

pub fn load_dataset(path: &Path, adapter: Adapter) -> Result<Dataset> {
    let (examples, name) = match adapter {
        Adapter::Normalized => (load_normalized(path)?, stem(path)),
        Adapter::EraserEsnli => (load_eraser_esnli(path)?, "esnli".to_string()),
        Adapter::Medicalbios => (load_medicalbios(path)?, "medicalbios".to_string()),
    };
    let task = examples.first().map(|e| e.task).unwrap_or(Task::Nli);
    if let Some(mixed) = examples.iter().find(|e| e.task != task) {
        return Err(Error::Validation {
            id: mixed.id.clone(),
            message: "dataset mixes tasks".into(),
        });
    }
    info!("loaded {} examples from {}", examples.len(), path.display());
    Dataset::new(name, examples, task.default_top_ratio())
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

fn schema_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn load_normalized(path: &Path) -> Result<Vec<Example>> {
    read_lines(path)?
        .into_iter()
        .map(|(n, line)| {
            let rec: NormalizedRecord = serde_json::from_str(&line)
                .map_err(|e| schema_err(path, n, format!("bad record: {e}")))?;
            rec.into_example()
        })
        .collect()
}

/// Writes examples in the normalized format, one compact JSON record per line.
pub fn write_normalized(path: &Path, examples: &[Example]) -> Result<()> {
    let mut buf = Vec::new();
    for ex in examples {
        serde_json::to_writer(&mut buf, &NormalizedRecord::from_example(ex))
            .expect("normalized record serializes");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Maps whitespace-token indices of `text` to word indices (None for
/// punctuation-only tokens).
fn token_to_word(text: &str) -> Vec<Option<usize>> {
    let mut next = 0;
    whitespace_tokens(text)
        .into_iter()
        .map(|t| {
            t.word.map(|_| {
                next += 1;
                next - 1
            })
        })
        .collect()
}

#[derive(Deserialize)]
struct EraserEvidence {
    docid: String,
    start_token: usize,
    end_token: usize,
}

#[derive(Deserialize)]
struct EraserAnnotation {
    annotation_id: String,
    classification: String,
    #[serde(default)]
    evidences: Vec<Vec<EraserEvidence>>,
}

#[derive(Deserialize)]
struct EraserDoc {
    docid: String,
    document: String,
}

/// Reads an ERASER-style split file (`test.jsonl`) whose documents live next to
/// it, either as `docs.jsonl` or as one file per docid under `docs/`. Each
/// annotation must reference `<annotation_id>_premise` and
/// `<annotation_id>_hypothesis` documents.
fn load_eraser_esnli(path: &Path) -> Result<Vec<Example>> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let docs = EraserDocs::open(dir)?;
    let mut out = Vec::new();
    for (n, line) in read_lines(path)? {
        let ann: EraserAnnotation = serde_json::from_str(&line)
            .map_err(|e| schema_err(path, n, format!("bad annotation: {e}")))?;
        let premise_id = format!("{}_premise", ann.annotation_id);
        let hyp_id = format!("{}_hypothesis", ann.annotation_id);
        let premise = docs.get(&premise_id).map_err(|m| schema_err(path, n, m))?;
        let hypothesis = docs.get(&hyp_id).map_err(|m| schema_err(path, n, m))?;
        let premise_map = token_to_word(&premise);
        let offset = premise_map.iter().flatten().count();
        let hyp_map = token_to_word(&hypothesis);

        let mut rationale = BTreeSet::new();
        for ev in ann.evidences.iter().flatten() {
            let (map, base) = if ev.docid == premise_id {
                (&premise_map, 0)
            } else if ev.docid == hyp_id {
                (&hyp_map, offset)
            } else {
                return Err(schema_err(
                    path,
                    n,
                    format!("evidence references unknown doc {:?}", ev.docid),
                ));
            };
            if ev.end_token > map.len() || ev.start_token > ev.end_token {
                return Err(schema_err(
                    path,
                    n,
                    format!(
                        "evidence tokens {}..{} outside doc {:?} ({} tokens)",
                        ev.start_token,
                        ev.end_token,
                        ev.docid,
                        map.len()
                    ),
                ));
            }
            if ev.end_token - ev.start_token > 1 {
                info!(
                    "{}: multi-token evidence {}..{} split into words",
                    ann.annotation_id, ev.start_token, ev.end_token
                );
            }
            rationale.extend(map[ev.start_token..ev.end_token].iter().flatten().map(|w| w + base));
        }
        let label = ann.classification.to_lowercase();
        out.push(Example::new(
            ann.annotation_id,
            Task::Nli,
            [
                ("premise".to_string(), premise),
                ("hypothesis".to_string(), hypothesis),
            ],
            Task::Nli.default_labels(),
            label,
            rationale,
        )?);
    }
    Ok(out)
}

enum EraserDocs {
    Inline(BTreeMap<String, String>),
    Dir(PathBuf),
}

impl EraserDocs {
    fn open(dir: &Path) -> Result<Self> {
        let jsonl = dir.join("docs.jsonl");
        if jsonl.is_file() {
            let mut map = BTreeMap::new();
            for (n, line) in read_lines(&jsonl)? {
                let doc: EraserDoc = serde_json::from_str(&line)
                    .map_err(|e| schema_err(&jsonl, n, format!("bad doc: {e}")))?;
                map.insert(doc.docid, doc.document);
            }
            return Ok(EraserDocs::Inline(map));
        }
        let docs = dir.join("docs");
        if docs.is_dir() {
            return Ok(EraserDocs::Dir(docs));
        }
        Err(Error::Config(format!(
            "no docs.jsonl or docs/ next to {}",
            dir.display()
        )))
    }

    fn get(&self, docid: &str) -> std::result::Result<String, String> {
        match self {
            EraserDocs::Inline(map) => map
                .get(docid)
                .cloned()
                .ok_or_else(|| format!("missing document {docid:?}")),
            EraserDocs::Dir(dir) => fs::read_to_string(dir.join(docid))
                .map(|s| s.trim_end_matches('\n').to_string())
                .map_err(|e| format!("missing document {docid:?}: {e}")),
        }
    }
}

/// MedicalBios line: `{"id", "bio", "label", "rationale_tokens": [int]}` where
/// the indices address whitespace tokens of `bio`; `rationale_mask` (one 0/1
/// per whitespace token) is accepted instead.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BiosRecord {
    id: String,
    bio: String,
    label: String,
    #[serde(default)]
    rationale_tokens: Option<Vec<usize>>,
    #[serde(default)]
    rationale_mask: Option<Vec<u8>>,
}

fn load_medicalbios(path: &Path) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (n, line) in read_lines(path)? {
        let rec: BiosRecord = serde_json::from_str(&line)
            .map_err(|e| schema_err(path, n, format!("bad record: {e}")))?;
        let map = token_to_word(&rec.bio);
        let tokens: Vec<usize> = match (rec.rationale_tokens, rec.rationale_mask) {
            (Some(t), None) => t,
            (None, Some(mask)) => {
                if mask.len() != map.len() {
                    return Err(schema_err(
                        path,
                        n,
                        format!(
                            "rationale_mask has {} entries for {} tokens",
                            mask.len(),
                            map.len()
                        ),
                    ));
                }
                mask.iter()
                    .enumerate()
                    .filter(|(_, &b)| b != 0)
                    .map(|(i, _)| i)
                    .collect()
            }
            _ => {
                return Err(schema_err(
                    path,
                    n,
                    "exactly one of rationale_tokens or rationale_mask is required",
                ))
            }
        };
        let mut rationale = BTreeSet::new();
        for t in tokens {
            match map.get(t) {
                Some(Some(w)) => {
                    rationale.insert(*w);
                }
                Some(None) => {}
                None => {
                    return Err(Error::Validation {
                        id: rec.id,
                        message: format!("rationale token {t} out of range ({} tokens)", map.len()),
                    })
                }
            }
        }
        out.push(Example::new(
            rec.id,
            Task::Bios,
            [("bio".to_string(), rec.bio)],
            Task::Bios.default_labels(),
            rec.label.to_lowercase(),
            rationale,
        )?);
    }
    Ok(out)
}
