//! Interchange with the attribution backend and word-level top-k selection.
//!
//! Records are JSON lines. `char_spans` are `[start, end)` offsets in Unicode
//! scalar values into the attribution prompt (the classification prompt with
//! the predicted label appended), which is how Python tokenizers report them.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Example};
use crate::error::{Error, Result};
use crate::perturbation::Position;
use crate::prompting::{RenderedPrompt, TemplateKey, TemplateRegistry};
use crate::rationale_parser::{MaskOrigin, RationaleMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionMethod {
    Attention,
    Saliency,
    InputXGradient,
}

impl AttributionMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            AttributionMethod::Attention => "attention",
            AttributionMethod::Saliency => "saliency",
            AttributionMethod::InputXGradient => "input_x_gradient",
        }
    }
}

impl fmt::Display for AttributionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttributionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(AttributionMethod::Attention),
            "saliency" => Ok(AttributionMethod::Saliency),
            "input_x_gradient" => Ok(AttributionMethod::InputXGradient),
            other => Err(Error::Config(format!("unknown attribution method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenScope {
    Instruction,
    Input,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributionRecord {
    pub example_id: String,
    pub method: AttributionMethod,
    pub tokens: Vec<String>,
    pub char_spans: Vec<[usize; 2]>,
    pub scores: Vec<f64>,
    pub predicted_label: String,
    pub scope_map: Vec<TokenScope>,
}

impl AttributionRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let n = self.tokens.len();
        if self.scores.len() != n || self.char_spans.len() != n || self.scope_map.len() != n {
            return Err(format!(
                "length mismatch: {} tokens, {} scores, {} spans, {} scopes",
                n,
                self.scores.len(),
                self.char_spans.len(),
                self.scope_map.len()
            ));
        }
        if let Some((i, s)) = self
            .scores
            .iter()
            .enumerate()
            .find(|(_, s)| !s.is_finite() || **s < 0.0)
        {
            return Err(format!("score {i} is {s}; scores must be finite and non-negative"));
        }
        if let Some(i) = self.char_spans.iter().position(|[s, e]| s > e) {
            return Err(format!("span {i} is reversed"));
        }
        Ok(())
    }
}

/// Reads an interchange file. Records are validated, and when `dataset` is
/// given every example id must exist in it. A repeated (example_id, method)
/// pair replaces the earlier record.
pub fn read_records(path: &Path, dataset: Option<&Dataset>) -> Result<Vec<AttributionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ids: Option<std::collections::HashSet<&str>> =
        dataset.map(|d| d.examples.iter().map(Example::id).collect());
    let mut out: Vec<AttributionRecord> = Vec::new();
    let mut seen: HashMap<(String, AttributionMethod), usize> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Schema {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let rec: AttributionRecord =
            serde_json::from_str(line).map_err(|e| err(format!("bad record: {e}")))?;
        rec.validate().map_err(&err)?;
        if let Some(ids) = &ids {
            if !ids.contains(rec.example_id.as_str()) {
                return Err(err(format!("unknown example id {:?}", rec.example_id)));
            }
        }
        let key = (rec.example_id.clone(), rec.method);
        if let Some(&prev) = seen.get(&key) {
            warn!(
                "{}:{line_no}: duplicate record for ({}, {}); keeping the later one",
                path.display(),
                rec.example_id,
                rec.method
            );
            out[prev] = rec;
        } else {
            seen.insert(key, out.len());
            out.push(rec);
        }
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[AttributionRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        r.validate().map_err(Error::Contract)?;
        serde_json::to_writer(&mut buf, r).expect("record serializes");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Per-word scores for one example, over the input words and over the
/// instruction words of the classification prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct WordScores {
    pub input: Vec<f64>,
    pub instruction: Vec<f64>,
    /// Prompt position of each input word; orders ties across scopes.
    pub input_positions: Vec<usize>,
    pub instruction_positions: Vec<usize>,
    /// Fraction of input words overlapped by at least one input token.
    pub coverage: f64,
}

impl WordScores {
    /// Input-only scores with positions equal to word indices.
    pub fn from_input(scores: Vec<f64>) -> Self {
        let n = scores.len();
        WordScores {
            input: scores,
            instruction: Vec::new(),
            input_positions: (0..n).collect(),
            instruction_positions: Vec::new(),
            coverage: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Max,
    Sum,
    Mean,
}

fn char_offsets(text: &str) -> Vec<usize> {
    // byte offset -> char offset, valid at char boundaries and at text.len()
    let mut map = vec![0; text.len() + 1];
    let mut chars = 0;
    for (b, c) in text.char_indices() {
        map[b] = chars;
        for extra in 1..c.len_utf8() {
            map[b + extra] = chars;
        }
        chars += 1;
    }
    map[text.len()] = chars;
    map
}

fn to_chars(map: &[usize], r: &Range<usize>) -> Range<usize> {
    map[r.start]..map[r.end]
}

/// The prompt the backend scores: the attribution template with the
/// predicted label filled in.
pub fn attribution_prompt(
    registry: &TemplateRegistry,
    example: &Example,
    predicted_label: &str,
) -> Result<RenderedPrompt> {
    registry.render_layout(
        &TemplateKey::attribution_label(example.task()),
        example,
        Some(predicted_label),
        None,
    )
}

pub fn aggregate_to_words(
    record: &AttributionRecord,
    example: &Example,
    registry: &TemplateRegistry,
) -> Result<WordScores> {
    let prompt = attribution_prompt(registry, example, &record.predicted_label)?;
    aggregate_with(record, example, &prompt, Aggregation::Max)
}

/// Bridges token scores to words: a word's score aggregates every token of
/// the matching scope whose span overlaps the word.
pub fn aggregate_with(
    record: &AttributionRecord,
    example: &Example,
    prompt: &RenderedPrompt,
    agg: Aggregation,
) -> Result<WordScores> {
    if record.example_id != example.id() {
        return Err(Error::Contract(format!(
            "record for {} applied to {}",
            record.example_id,
            example.id()
        )));
    }
    record.validate().map_err(Error::Contract)?;
    let map = char_offsets(&prompt.text);
    let input_spans: Vec<Range<usize>> = prompt
        .input_word_spans(example)?
        .iter()
        .map(|r| to_chars(&map, r))
        .collect();
    let instr_spans: Vec<Range<usize>> = prompt
        .instruction_words()
        .iter()
        .map(|(_, r)| to_chars(&map, r))
        .collect();

    let score = |spans: &[Range<usize>], scope: TokenScope| -> (Vec<f64>, usize) {
        let mut covered = 0;
        let scores = spans
            .iter()
            .map(|w| {
                let vals: Vec<f64> = record
                    .char_spans
                    .iter()
                    .zip(&record.scores)
                    .zip(&record.scope_map)
                    .filter(|((&[s, e], _), &sc)| sc == scope && s < w.end && w.start < e)
                    .map(|((_, &v), _)| v)
                    .collect();
                if vals.is_empty() {
                    return 0.0;
                }
                covered += 1;
                match agg {
                    Aggregation::Max => vals.iter().copied().fold(f64::MIN, f64::max),
                    Aggregation::Sum => vals.iter().sum(),
                    Aggregation::Mean => vals.iter().sum::<f64>() / vals.len() as f64,
                }
            })
            .collect();
        (scores, covered)
    };

    let (input, covered) = score(&input_spans, TokenScope::Input);
    let (instruction, _) = score(&instr_spans, TokenScope::Instruction);
    if !input.is_empty() && covered == 0 {
        return Err(Error::Alignment {
            id: example.id().to_string(),
            message: "no input token overlaps any input word; offsets disagree with the corpus"
                .into(),
        });
    }
    let coverage = if input.is_empty() {
        0.0
    } else {
        covered as f64 / input.len() as f64
    };
    Ok(WordScores {
        input,
        instruction,
        input_positions: input_spans.iter().map(|r| r.start).collect(),
        instruction_positions: instr_spans.iter().map(|r| r.start).collect(),
        coverage,
    })
}

pub use crate::perturbation::MaskScope as SelectionScope;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopSelection {
    pub mask: RationaleMask,
    /// Selected instruction word indices (extended scope only).
    pub instruction: BTreeSet<usize>,
    /// True when `k` exceeded the eligible positions and was clamped.
    pub clamped: bool,
}

/// Eligible words by descending score; equal scores go to the earlier
/// prompt position.
pub fn ranked_positions(scores: &WordScores, scope: SelectionScope) -> Vec<Position> {
    let mut eligible: Vec<(f64, usize, Position)> = scores
        .input
        .iter()
        .zip(&scores.input_positions)
        .enumerate()
        .map(|(i, (&s, &p))| (s, p, Position::Input(i)))
        .collect();
    if scope == SelectionScope::InputAndInstruction {
        eligible.extend(
            scores
                .instruction
                .iter()
                .zip(&scores.instruction_positions)
                .enumerate()
                .map(|(i, (&s, &p))| (s, p, Position::Instruction(i))),
        );
    }
    eligible.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    eligible.into_iter().map(|(_, _, p)| p).collect()
}

/// Marks the `k` highest-scoring eligible words.
pub fn select_top(scores: &WordScores, k: usize, scope: SelectionScope) -> TopSelection {
    let ranked = ranked_positions(scores, scope);
    let clamped = k > ranked.len();
    if clamped {
        warn!(
            "requested top-{k} from {} eligible words; clamping",
            ranked.len()
        );
    }
    let mut mask = RationaleMask::empty(scores.input.len(), MaskOrigin::Attribution);
    let mut instruction = BTreeSet::new();
    for &p in ranked.iter().take(k) {
        match p {
            Position::Input(i) => mask.bits[i] = true,
            Position::Instruction(i) => {
                instruction.insert(i);
            }
        }
    }
    TopSelection {
        mask,
        instruction,
        clamped,
    }
}
