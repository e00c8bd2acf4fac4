//! Parsing model-written rationales into words and mapping them onto input
//! word positions.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{concat_input, normalize_word, word_core, Example};
use crate::error::{Error, Result};
use crate::perturbation::Position;

/// Fragments longer than this many words are treated as explanations.
pub const MAX_FRAGMENT_WORDS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Delimiter {
    Pipe,
    Comma,
    Newline,
    Bullet,
    WhitespaceFallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedRationale {
    /// Words in generation order, boundary punctuation removed, case kept.
    pub words: Vec<String>,
    pub delimiter_used: Delimiter,
    pub dropped_fragments: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskOrigin {
    Prompting,
    Attribution,
    Human,
    Random,
    Everything,
}

/// Binary selection over the concatenated input words of one example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RationaleMask {
    pub bits: Vec<bool>,
    pub origin: MaskOrigin,
}

impl RationaleMask {
    pub fn empty(len: usize, origin: MaskOrigin) -> Self {
        RationaleMask {
            bits: vec![false; len],
            origin,
        }
    }

    pub fn from_indices(
        len: usize,
        indices: impl IntoIterator<Item = usize>,
        origin: MaskOrigin,
    ) -> Self {
        let mut m = Self::empty(len, origin);
        for i in indices {
            m.bits[i] = true;
        }
        m
    }

    pub fn human(example: &Example) -> Self {
        Self::from_indices(
            example.word_count(),
            example.human_rationale().iter().copied(),
            MaskOrigin::Human,
        )
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn indices(&self) -> BTreeSet<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn check_len(&self, example: &Example) -> Result<()> {
        if self.bits.len() != example.word_count() {
            return Err(Error::Contract(format!(
                "mask of length {} used with example {} of {} words",
                self.bits.len(),
                example.id(),
                example.word_count()
            )));
        }
        Ok(())
    }
}

const TRIM_CHARS: &[char] = &[
    '"', '\'', '`', '[', ']', '(', ')', '{', '}', '<', '>', '*', '\u{201c}', '\u{201d}',
    '\u{2018}', '\u{2019}',
];

fn strip_list_marker(s: &str) -> (&str, bool) {
    let t = s.trim_start();
    for marker in ["- ", "* ", "\u{2022}", "+ "] {
        if let Some(rest) = t.strip_prefix(marker) {
            return (rest, true);
        }
    }
    let digits = t.len() - t.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits > 0 {
        let rest = &t[digits..];
        if let Some(r) = rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") ")) {
            return (r, true);
        }
    }
    (s, false)
}

fn clean_fragment(s: &str) -> &str {
    let (s, _) = strip_list_marker(s);
    s.trim_matches(|c: char| c.is_whitespace() || TRIM_CHARS.contains(&c))
}

fn non_empty_parts(raw: &str, sep: char) -> Vec<&str> {
    raw.split(sep).filter(|p| !clean_fragment(p).is_empty()).collect()
}

/// Parses a raw rationale. The delimiter is the first of pipe, newline
/// (bulleted or not), comma that yields at least two fragments; otherwise
/// every whitespace token is its own fragment. Header fragments ending in `:`
/// and explanatory fragments of more than six words are dropped, and
/// multi-word fragments are split into words in order.
pub fn parse_rationale(raw: &str) -> ParsedRationale {
    let raw = raw.trim();
    let (delimiter, fragments): (Delimiter, Vec<&str>) = {
        // pipe lists keep line breaks as extra boundaries so a trailing
        // explanation line does not merge into the last item
        let pipes: Vec<&str> = if raw.contains('|') {
            raw.lines()
                .flat_map(|l| l.split('|'))
                .filter(|p| !clean_fragment(p).is_empty())
                .collect()
        } else {
            Vec::new()
        };
        let lines = non_empty_parts(raw, '\n');
        let commas = non_empty_parts(raw, ',');
        if pipes.len() >= 2 {
            (Delimiter::Pipe, pipes)
        } else if lines.len() >= 2 {
            let bulleted = lines.iter().any(|l| strip_list_marker(l).1);
            let d = if bulleted {
                Delimiter::Bullet
            } else {
                Delimiter::Newline
            };
            (d, lines)
        } else if commas.len() >= 2 {
            (Delimiter::Comma, commas)
        } else {
            (Delimiter::WhitespaceFallback, raw.split_whitespace().collect())
        }
    };

    let mut words = Vec::new();
    let mut dropped = 0;
    let last = fragments.len().saturating_sub(1);
    for (i, frag) in fragments.iter().enumerate() {
        let mut frag = clean_fragment(frag);
        if frag.is_empty() {
            continue;
        }
        if delimiter != Delimiter::WhitespaceFallback {
            if frag.ends_with(':') && i != last {
                dropped += 1;
                continue;
            }
            // "Key words: a" style lead-in on the first fragment
            if i == 0 {
                if let Some((_, rest)) = frag.rsplit_once(": ") {
                    frag = clean_fragment(rest);
                }
            }
            if frag.split_whitespace().count() > MAX_FRAGMENT_WORDS {
                dropped += 1;
                continue;
            }
        }
        for tok in frag.split_whitespace() {
            if let Some(core) = word_core(tok) {
                let w = tok[core].trim_matches(|c: char| TRIM_CHARS.contains(&c));
                if !w.is_empty() {
                    words.push(w.to_string());
                }
            }
        }
    }
    ParsedRationale {
        words,
        delimiter_used: delimiter,
        dropped_fragments: dropped,
    }
}

/// Keeps the first `k` words in generation order.
pub fn enforce_k(parsed: &ParsedRationale, k: usize) -> ParsedRationale {
    let mut out = parsed.clone();
    out.words.truncate(k);
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Every input occurrence of a generated word is marked.
    #[default]
    Membership,
    /// Each generated word claims only the earliest unclaimed occurrence.
    FirstOccurrence,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub mask: RationaleMask,
    pub matched_generated: usize,
    pub unmatched_generated: usize,
}

pub fn align_words(parsed: &ParsedRationale, example: &Example) -> AlignmentResult {
    align_words_with(parsed, example, MatchMode::Membership)
}

pub fn align_words_with(
    parsed: &ParsedRationale,
    example: &Example,
    mode: MatchMode,
) -> AlignmentResult {
    let input: Vec<String> = concat_input(example)
        .words()
        .iter()
        .map(|w| normalize_word(w))
        .collect();
    let (bits, matched, unmatched) = mark(&parsed.words, &input, mode);
    AlignmentResult {
        mask: RationaleMask {
            bits,
            origin: MaskOrigin::Prompting,
        },
        matched_generated: matched,
        unmatched_generated: unmatched,
    }
}

/// Alignment for prompts that ask for words from instruction and input alike:
/// generated words are matched against both. Returns the input alignment and
/// the matched instruction word indices.
pub fn align_words_with_instruction(
    parsed: &ParsedRationale,
    example: &Example,
    instruction_words: &[String],
    mode: MatchMode,
) -> (AlignmentResult, BTreeSet<usize>) {
    let n = example.word_count();
    let mut all: Vec<String> = concat_input(example)
        .words()
        .iter()
        .map(|w| normalize_word(w))
        .collect();
    all.extend(instruction_words.iter().map(|w| normalize_word(w)));
    let (bits, matched, unmatched) = mark(&parsed.words, &all, mode);
    let instruction = bits[n..]
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| i)
        .collect();
    (
        AlignmentResult {
            mask: RationaleMask {
                bits: bits[..n].to_vec(),
                origin: MaskOrigin::Prompting,
            },
            matched_generated: matched,
            unmatched_generated: unmatched,
        },
        instruction,
    )
}

/// Matched positions in generation order: each generated word contributes its
/// occurrences (all of them, or the claimed one) before the next word.
/// Instruction words are eligible only when `instruction_words` is given.
pub fn ranked_positions(
    parsed: &ParsedRationale,
    example: &Example,
    instruction_words: Option<&[String]>,
    mode: MatchMode,
) -> Vec<Position> {
    let n = example.word_count();
    let mut all: Vec<String> = concat_input(example)
        .words()
        .iter()
        .map(|w| normalize_word(w))
        .collect();
    if let Some(instr) = instruction_words {
        all.extend(instr.iter().map(|w| normalize_word(w)));
    }
    let to_pos = |i: usize| {
        if i < n {
            Position::Input(i)
        } else {
            Position::Instruction(i - n)
        }
    };
    let mut claimed = vec![false; all.len()];
    let mut out = Vec::new();
    for g in &parsed.words {
        let g = normalize_word(g);
        if g.is_empty() {
            continue;
        }
        let hits = all.iter().enumerate().filter(|(_, w)| **w == g).map(|(i, _)| i);
        match mode {
            MatchMode::Membership => {
                for i in hits {
                    if !claimed[i] {
                        claimed[i] = true;
                        out.push(to_pos(i));
                    }
                }
            }
            MatchMode::FirstOccurrence => {
                if let Some(i) = hits.into_iter().find(|&i| !claimed[i]) {
                    claimed[i] = true;
                    out.push(to_pos(i));
                }
            }
        }
    }
    out
}

fn mark(generated: &[String], input: &[String], mode: MatchMode) -> (Vec<bool>, usize, usize) {
    let mut bits = vec![false; input.len()];
    let present: HashSet<&str> = input.iter().map(String::as_str).collect();
    let mut matched = 0;
    let mut unmatched = 0;
    match mode {
        MatchMode::Membership => {
            let wanted: HashSet<String> = generated.iter().map(|w| normalize_word(w)).collect();
            for (b, w) in bits.iter_mut().zip(input) {
                *b = !w.is_empty() && wanted.contains(w);
            }
            for g in generated {
                if present.contains(normalize_word(g).as_str()) {
                    matched += 1;
                } else {
                    unmatched += 1;
                }
            }
        }
        MatchMode::FirstOccurrence => {
            let mut positions: HashMap<&str, Vec<usize>> = HashMap::new();
            for (i, w) in input.iter().enumerate().rev() {
                positions.entry(w.as_str()).or_default().push(i);
            }
            for g in generated {
                let g = normalize_word(g);
                if !present.contains(g.as_str()) {
                    unmatched += 1;
                    continue;
                }
                matched += 1;
                if let Some(i) = positions.get_mut(g.as_str()).and_then(Vec::pop) {
                    bits[i] = true;
                }
            }
        }
    }
    (bits, matched, unmatched)
}
