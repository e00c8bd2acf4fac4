//! Masked classification inputs for faithfulness runs.
//!
//! Masking deletes words. A whitespace token carrying a selected word is
//! removed together with any punctuation-only tokens attached to it, and the
//! remaining tokens are re-joined with single spaces. Text with nothing
//! removed is passed through untouched.

use std::collections::{BTreeSet, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{whitespace_tokens, Example};
use crate::error::{Error, Result};
use crate::metrics::{random_mask, FlipOutcome};
use crate::model_client::{PredictedLabel, TaskModel};
use crate::rationale_parser::{MaskOrigin, RationaleMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskScope {
    Input,
    InputAndInstruction,
}

impl MaskScope {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskScope::Input => "input",
            MaskScope::InputAndInstruction => "input_and_instruction",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStyle {
    #[default]
    Delete,
    /// Replace each removed word with `_`.
    Placeholder,
}

/// Removes the words of `text` for which `is_removed(word_index)` holds.
/// With `keep_lines`, each line is processed on its own and line breaks
/// survive; word indices still run across the whole text. Leading and
/// trailing whitespace of each processed chunk is preserved.
pub fn remove_words(
    text: &str,
    is_removed: impl Fn(usize) -> bool,
    style: MaskStyle,
    keep_lines: bool,
) -> String {
    if !keep_lines {
        let mut next = 0;
        return remove_in_chunk(text, &is_removed, style, &mut next);
    }
    let mut out = String::with_capacity(text.len());
    let mut next = 0;
    for line in text.split_inclusive('\n') {
        let (body, nl) = match line.strip_suffix('\n') {
            Some(b) => (b, "\n"),
            None => (line, ""),
        };
        out.push_str(&remove_in_chunk(body, &is_removed, style, &mut next));
        out.push_str(nl);
    }
    out
}

fn remove_in_chunk(
    chunk: &str,
    is_removed: &impl Fn(usize) -> bool,
    style: MaskStyle,
    next_word: &mut usize,
) -> String {
    let tokens = whitespace_tokens(chunk);
    // unit = (removed, token ranges)
    let mut units: Vec<(bool, Vec<&str>)> = Vec::new();
    let mut leading_punct: Vec<&str> = Vec::new();
    let mut any_removed = false;
    for tok in &tokens {
        let s = &chunk[tok.span.clone()];
        if tok.word.is_some() {
            let removed = is_removed(*next_word);
            *next_word += 1;
            any_removed |= removed;
            let mut parts = std::mem::take(&mut leading_punct);
            parts.push(s);
            units.push((removed, parts));
        } else if let Some(last) = units.last_mut() {
            last.1.push(s);
        } else {
            leading_punct.push(s);
        }
    }
    if !any_removed {
        return chunk.to_string();
    }
    let kept: Vec<String> = units
        .into_iter()
        .filter_map(|(removed, parts)| match (removed, style) {
            (false, _) => Some(parts.join(" ")),
            (true, MaskStyle::Delete) => None,
            (true, MaskStyle::Placeholder) => Some("_".to_string()),
        })
        .chain((!leading_punct.is_empty()).then(|| leading_punct.join(" ")))
        .collect();
    let lead = &chunk[..chunk.len() - chunk.trim_start().len()];
    let trail = &chunk[chunk.trim_end().len()..];
    let body = kept.join(" ");
    if body.is_empty() {
        // collapse to a single separator so neighbours do not fuse
        if !lead.is_empty() || !trail.is_empty() {
            return " ".to_string();
        }
        return String::new();
    }
    format!("{lead}{body}{trail}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedInput {
    pub example_id: String,
    pub scope: MaskScope,
    pub style: MaskStyle,
    /// Removed input word indices.
    pub removed_positions: BTreeSet<usize>,
    /// Removed instruction word indices (extended scope only).
    pub removed_instruction: BTreeSet<usize>,
    /// Segment name and remaining text, in canonical segment order.
    pub surviving_text: Vec<(String, String)>,
}

impl MaskedInput {
    pub fn masked_word_count(&self) -> usize {
        self.removed_positions.len() + self.removed_instruction.len()
    }
}

pub fn mask_words(example: &Example, mask: &RationaleMask, scope: MaskScope) -> Result<MaskedInput> {
    mask_words_with(example, mask, &BTreeSet::new(), scope, MaskStyle::Delete)
}

/// Deletes the selected input words from the segment texts and records the
/// instruction words to delete from the classification instruction.
pub fn mask_words_with(
    example: &Example,
    mask: &RationaleMask,
    instruction: &BTreeSet<usize>,
    scope: MaskScope,
    style: MaskStyle,
) -> Result<MaskedInput> {
    mask.check_len(example)?;
    if scope == MaskScope::Input && !instruction.is_empty() {
        return Err(Error::Contract(
            "instruction words selected under input-only masking".into(),
        ));
    }
    let removed = mask.indices();
    let mut surviving = Vec::with_capacity(example.segments().len());
    for (seg, offset) in example.segments().iter().zip(example.segment_offsets()) {
        let text = remove_words(&seg.text, |i| removed.contains(&(offset + i)), style, false);
        surviving.push((seg.name.clone(), text));
    }
    Ok(MaskedInput {
        example_id: example.id().to_string(),
        scope,
        style,
        removed_positions: removed,
        removed_instruction: instruction.clone(),
        surviving_text: surviving,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Human,
    Random,
    Everything,
}

impl BaselineKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::Human => "human",
            BaselineKind::Random => "random",
            BaselineKind::Everything => "everything",
        }
    }
}

/// Generator for one (seed, example) pair, independent of visiting order.
pub fn example_rng(seed: u64, example_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(example_id.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(bytes))
}

pub fn baseline_mask(example: &Example, kind: BaselineKind, seed: Option<u64>) -> Result<RationaleMask> {
    let n = example.word_count();
    match kind {
        BaselineKind::Everything => Ok(RationaleMask::from_indices(n, 0..n, MaskOrigin::Everything)),
        BaselineKind::Human | BaselineKind::Random if example.is_degenerate() => {
            Err(Error::Degenerate(example.id().to_string()))
        }
        BaselineKind::Human => Ok(RationaleMask::human(example)),
        BaselineKind::Random => {
            let seed = seed.ok_or_else(|| Error::Contract("random baseline needs a seed".into()))?;
            let mut rng = example_rng(seed, example.id());
            Ok(random_mask(
                n,
                example.human_rationale().len(),
                &mut rng,
                MaskOrigin::Random,
            ))
        }
    }
}

/// One maskable word, input or instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    Input(usize),
    Instruction(usize),
}

/// Positions in priority order with duplicates removed.
pub fn dedup_positions(positions: impl IntoIterator<Item = Position>) -> Vec<Position> {
    let mut seen = HashSet::new();
    positions.into_iter().filter(|p| seen.insert(*p)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum PassResult {
    Outcome(FlipOutcome),
    /// The unmasked prediction was INVALID; nothing to flip.
    SkippedInvalidOriginal,
}

/// Masks the first `k_limit` of `ranked` (all of them when `None`),
/// re-classifies and compares with `original`.
pub fn faithfulness_pass(
    model: &TaskModel<'_>,
    example: &Example,
    original: &PredictedLabel,
    ranked: &[Position],
    scope: MaskScope,
    k_limit: Option<usize>,
    style: MaskStyle,
) -> Result<PassResult> {
    if !original.value.is_valid() {
        return Ok(PassResult::SkippedInvalidOriginal);
    }
    let masked = build_masked(example, ranked, scope, k_limit, style)?;
    let prediction = model.classify(example, Some(&masked))?;
    Ok(PassResult::Outcome(FlipOutcome::new(
        example.id(),
        original.clone(),
        prediction,
        masked.masked_word_count(),
    )))
}

/// The masked input `faithfulness_pass` classifies.
pub fn build_masked(
    example: &Example,
    ranked: &[Position],
    scope: MaskScope,
    k_limit: Option<usize>,
    style: MaskStyle,
) -> Result<MaskedInput> {
    let ranked = dedup_positions(ranked.iter().copied());
    let take = k_limit.unwrap_or(ranked.len()).min(ranked.len());
    let n = example.word_count();
    let mut input = Vec::new();
    let mut instruction = BTreeSet::new();
    for p in &ranked[..take] {
        match *p {
            Position::Input(i) if i < n => input.push(i),
            Position::Input(i) => {
                return Err(Error::Contract(format!(
                    "position {i} out of range for example {}",
                    example.id()
                )))
            }
            Position::Instruction(i) if scope == MaskScope::InputAndInstruction => {
                instruction.insert(i);
            }
            Position::Instruction(_) => {}
        }
    }
    let mask = RationaleMask::from_indices(n, input, MaskOrigin::Prompting);
    mask_words_with(example, &mask, &instruction, scope, style)
}
