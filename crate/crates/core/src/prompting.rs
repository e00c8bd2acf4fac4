//! Prompt templates and selection budgets.
//!
//! Template bodies live in `templates/` as plain text and are mapped to keys by
//! `templates/manifest.toml`. The same files are compiled into the binary as the
//! built-in registry, and a registry can also be loaded from any directory with
//! the same layout.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{segment_words, Example, Task};
use crate::error::{Error, Result};
use crate::model_client::{LabelValue, PredictedLabel};
use crate::perturbation::{remove_words, MaskStyle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMethod {
    Normal,
    Short,
    Extended,
    Classification,
    AttributionLabel,
}

impl PromptMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptMethod::Normal => "normal",
            PromptMethod::Short => "short",
            PromptMethod::Extended => "extended",
            PromptMethod::Classification => "classification",
            PromptMethod::AttributionLabel => "attribution_label",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Selection {
    #[serde(rename = "unbound")]
    Unbound,
    #[serde(rename = "top_var")]
    TopVar,
    #[serde(rename = "top_ratio")]
    TopRatio,
    #[serde(rename = "n/a")]
    NotApplicable,
}

impl Selection {
    pub fn as_str(self) -> &'static str {
        match self {
            Selection::Unbound => "unbound",
            Selection::TopVar => "top_var",
            Selection::TopRatio => "top_ratio",
            Selection::NotApplicable => "n/a",
        }
    }

    pub fn is_bounded(self) -> bool {
        matches!(self, Selection::TopVar | Selection::TopRatio)
    }
}

impl FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unbound" => Ok(Selection::Unbound),
            "top_var" => Ok(Selection::TopVar),
            "top_ratio" => Ok(Selection::TopRatio),
            "n/a" => Ok(Selection::NotApplicable),
            other => Err(Error::Config(format!("unknown selection {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TemplateKey {
    pub method: PromptMethod,
    pub selection: Selection,
    pub task: Task,
}

impl TemplateKey {
    pub fn new(method: PromptMethod, selection: Selection, task: Task) -> Self {
        TemplateKey {
            method,
            selection,
            task,
        }
    }

    pub fn classification(task: Task) -> Self {
        Self::new(PromptMethod::Classification, Selection::NotApplicable, task)
    }

    pub fn attribution_label(task: Task) -> Self {
        Self::new(PromptMethod::AttributionLabel, Selection::NotApplicable, task)
    }

    /// Placeholders a body for this key must contain, no more and no less.
    pub fn required_placeholders(&self) -> BTreeSet<Placeholder> {
        let mut set: BTreeSet<Placeholder> = self
            .task
            .segment_names()
            .iter()
            .map(|n| Placeholder::from_name(n).expect("segment names are placeholders"))
            .collect();
        match self.method {
            PromptMethod::Normal | PromptMethod::Short => {
                set.insert(Placeholder::Label);
                if self.selection.is_bounded() {
                    set.insert(Placeholder::K);
                }
            }
            PromptMethod::Extended => {
                set.insert(Placeholder::Label);
            }
            PromptMethod::Classification => {}
            PromptMethod::AttributionLabel => {
                set.insert(Placeholder::PredictedClass);
            }
        }
        set
    }

    /// Every (method, selection, task) combination the runner can request.
    pub fn standard_matrix() -> Vec<TemplateKey> {
        let mut keys = Vec::new();
        for task in [Task::Nli, Task::Bios] {
            for method in [PromptMethod::Normal, PromptMethod::Short] {
                for sel in [Selection::Unbound, Selection::TopVar, Selection::TopRatio] {
                    keys.push(TemplateKey::new(method, sel, task));
                }
            }
            keys.push(TemplateKey::new(
                PromptMethod::Extended,
                Selection::Unbound,
                task,
            ));
            keys.push(TemplateKey::classification(task));
            keys.push(TemplateKey::attribution_label(task));
        }
        keys
    }
}

impl fmt::Display for TemplateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}",
            self.method.as_str(),
            self.selection.as_str(),
            self.task
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Placeholder {
    Premise,
    Hypothesis,
    Bio,
    Label,
    K,
    PredictedClass,
}

impl Placeholder {
    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "premise" => Placeholder::Premise,
            "hypothesis" => Placeholder::Hypothesis,
            "bio" => Placeholder::Bio,
            "label" => Placeholder::Label,
            "k" => Placeholder::K,
            "predicted_class" => Placeholder::PredictedClass,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Placeholder::Premise => "premise",
            Placeholder::Hypothesis => "hypothesis",
            Placeholder::Bio => "bio",
            Placeholder::Label => "label",
            Placeholder::K => "k",
            Placeholder::PredictedClass => "predicted_class",
        }
    }

    pub fn is_segment(self) -> bool {
        matches!(
            self,
            Placeholder::Premise | Placeholder::Hypothesis | Placeholder::Bio
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Part {
    Literal(String),
    Slot(Placeholder),
}

/// Splits a body into literals and `{name}` slots. Braces that do not enclose
/// a lowercase identifier are literal text.
fn parse_body(body: &str) -> std::result::Result<Vec<Part>, String> {
    let mut parts = Vec::new();
    let mut lit = String::new();
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let ident_len = after
            .find(|c: char| !(c.is_ascii_lowercase() || c == '_'))
            .unwrap_or(after.len());
        if ident_len > 0 && after[ident_len..].starts_with('}') {
            let name = &after[..ident_len];
            let ph = Placeholder::from_name(name)
                .ok_or_else(|| format!("unknown placeholder {{{name}}}"))?;
            lit.push_str(&rest[..open]);
            if !lit.is_empty() {
                parts.push(Part::Literal(std::mem::take(&mut lit)));
            }
            parts.push(Part::Slot(ph));
            rest = &after[ident_len + 1..];
        } else {
            lit.push_str(&rest[..=open]);
            rest = after;
        }
    }
    lit.push_str(rest);
    if !lit.is_empty() {
        parts.push(Part::Literal(lit));
    }
    Ok(parts)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    key: TemplateKey,
    body: String,
    parts: Vec<Part>,
    required: BTreeSet<Placeholder>,
}

impl PromptTemplate {
    pub fn new(key: TemplateKey, body: impl Into<String>) -> Result<Self> {
        let body = body.into();
        let parts = parse_body(&body).map_err(|m| Error::Registry(format!("{key}: {m}")))?;
        let found: BTreeSet<Placeholder> = parts
            .iter()
            .filter_map(|p| match p {
                Part::Slot(ph) => Some(*ph),
                Part::Literal(_) => None,
            })
            .collect();
        let required = key.required_placeholders();
        if found != required {
            let names = |s: &BTreeSet<Placeholder>| s.iter().map(|p| p.name()).collect::<Vec<_>>();
            return Err(Error::Registry(format!(
                "{key}: body has placeholders {:?}, expected {:?}",
                names(&found),
                names(&required)
            )));
        }
        Ok(PromptTemplate {
            key,
            body,
            parts,
            required,
        })
    }

    pub fn key(&self) -> TemplateKey {
        self.key
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn required_placeholders(&self) -> &BTreeSet<Placeholder> {
        &self.required
    }

    /// Hex SHA-256 of the body, recorded in run metadata.
    pub fn body_hash(&self) -> String {
        hex::encode(Sha256::digest(self.body.as_bytes()))
    }

    pub fn fill(&self, values: &PlaceholderValues) -> Result<RenderedPrompt> {
        self.fill_inner(values, None)
    }

    /// Renders with the given instruction words deleted from literal text.
    /// Instruction word indices follow [`RenderedPrompt::instruction_words`].
    pub fn fill_masking_instruction(
        &self,
        values: &PlaceholderValues,
        removed: &BTreeSet<usize>,
        style: MaskStyle,
    ) -> Result<RenderedPrompt> {
        self.fill_inner(values, Some((removed, style)))
    }

    fn fill_inner(
        &self,
        values: &PlaceholderValues,
        instruction_mask: Option<(&BTreeSet<usize>, MaskStyle)>,
    ) -> Result<RenderedPrompt> {
        for ph in values.0.keys() {
            if !self.required.contains(ph) {
                return Err(Error::Render {
                    key: self.key.to_string(),
                    message: format!("value supplied for {{{}}} which the template lacks", ph.name()),
                });
            }
        }
        let mut text = String::new();
        let mut pieces = Vec::with_capacity(self.parts.len());
        let mut instruction_base = 0;
        for part in &self.parts {
            let start = text.len();
            let kind = match part {
                Part::Literal(lit) => {
                    let n = segment_words(lit).len();
                    match instruction_mask {
                        Some((removed, style)) => {
                            let base = instruction_base;
                            text.push_str(&remove_words(
                                lit,
                                |i| removed.contains(&(base + i)),
                                style,
                                true,
                            ));
                        }
                        None => text.push_str(lit),
                    }
                    instruction_base += n;
                    PieceKind::Instruction
                }
                Part::Slot(ph) => {
                    let v = values.0.get(ph).ok_or_else(|| Error::Render {
                        key: self.key.to_string(),
                        message: format!("missing value for {{{}}}", ph.name()),
                    })?;
                    text.push_str(v);
                    if ph.is_segment() {
                        PieceKind::Segment(ph.name())
                    } else {
                        PieceKind::Value(ph.name())
                    }
                }
            };
            pieces.push(RenderedPiece {
                range: start..text.len(),
                kind,
            });
        }
        Ok(RenderedPrompt { text, pieces })
    }
}

/// Values for placeholder substitution.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PlaceholderValues(BTreeMap<Placeholder, String>);

impl PlaceholderValues {
    /// Segment texts of `example`, verbatim.
    pub fn from_example(example: &Example) -> Self {
        let mut v = PlaceholderValues::default();
        for seg in example.segments() {
            let ph = Placeholder::from_name(&seg.name).expect("segment names are placeholders");
            v.0.insert(ph, seg.text.clone());
        }
        v
    }

    pub fn set(&mut self, ph: Placeholder, value: impl Into<String>) -> &mut Self {
        self.0.insert(ph, value.into());
        self
    }

    pub fn get(&self, ph: Placeholder) -> Option<&str> {
        self.0.get(&ph).map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PieceKind {
    Instruction,
    Segment(&'static str),
    Value(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPiece {
    pub range: Range<usize>,
    pub kind: PieceKind,
}

/// A rendered prompt with the byte range each template part occupies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    pub pieces: Vec<RenderedPiece>,
}

impl RenderedPrompt {
    /// Words of the instruction (all literal text), with absolute byte spans.
    pub fn instruction_words(&self) -> Vec<(String, Range<usize>)> {
        let mut out = Vec::new();
        for p in self.pieces.iter().filter(|p| p.kind == PieceKind::Instruction) {
            let seq = segment_words(&self.text[p.range.clone()]);
            for (w, span) in seq.iter() {
                out.push((w.to_string(), p.range.start + span.start..p.range.start + span.end));
            }
        }
        out
    }

    /// Absolute byte spans of the example's concatenated input words. Requires
    /// the segments to have been rendered verbatim from `example`.
    pub fn input_word_spans(&self, example: &Example) -> Result<Vec<Range<usize>>> {
        let mut out = Vec::with_capacity(example.word_count());
        for seg in example.segments() {
            let piece = self
                .pieces
                .iter()
                .find(|p| p.kind == PieceKind::Segment(placeholder_name(&seg.name)))
                .ok_or_else(|| Error::Contract(format!("segment {} not in prompt", seg.name)))?;
            if self.text[piece.range.clone()] != seg.text {
                return Err(Error::Contract(format!(
                    "segment {} was not rendered verbatim",
                    seg.name
                )));
            }
            let base = piece.range.start;
            out.extend(seg.words.spans().iter().map(|s| base + s.start..base + s.end));
        }
        Ok(out)
    }
}

fn placeholder_name(name: &str) -> &'static str {
    Placeholder::from_name(name)
        .map(Placeholder::name)
        .unwrap_or("")
}

#[derive(Deserialize)]
struct Manifest {
    template: Vec<ManifestEntry>,
}

#[derive(Deserialize)]
struct ManifestEntry {
    method: PromptMethod,
    selection: Selection,
    task: Task,
    file: String,
}

macro_rules! builtin_files {
    ($($path:literal),* $(,)?) => {
        &[$(($path, include_str!(concat!("../templates/", $path)))),*]
    };
}

const BUILTIN_MANIFEST: &str = include_str!("../templates/manifest.toml");
const BUILTIN_FILES: &[(&str, &str)] = builtin_files![
    "nli/normal_unbound.txt",
    "nli/short_unbound.txt",
    "nli/extended_unbound.txt",
    "nli/normal_topk.txt",
    "nli/short_topk.txt",
    "nli/classification.txt",
    "nli/attribution_label.txt",
    "bios/normal_unbound.txt",
    "bios/short_unbound.txt",
    "bios/extended_unbound.txt",
    "bios/normal_topk.txt",
    "bios/short_topk.txt",
    "bios/classification.txt",
    "bios/attribution_label.txt",
];

/// Immutable set of templates keyed by (method, selection, task).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateRegistry {
    templates: BTreeMap<TemplateKey, PromptTemplate>,
}

impl TemplateRegistry {
    pub fn builtin() -> Self {
        Self::from_manifest(BUILTIN_MANIFEST, |file| {
            BUILTIN_FILES
                .iter()
                .find(|(p, _)| *p == file)
                .map(|(_, body)| body.to_string())
                .ok_or_else(|| Error::Registry(format!("no built-in template {file}")))
        })
        .expect("built-in templates are valid")
    }

    /// Loads `manifest.toml` and the files it references from `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.toml");
        let manifest =
            fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        Self::from_manifest(&manifest, |file| {
            let p = dir.join(file);
            fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        })
    }

    fn from_manifest(manifest: &str, read: impl Fn(&str) -> Result<String>) -> Result<Self> {
        let manifest: Manifest = toml::from_str(manifest)
            .map_err(|e| Error::Registry(format!("bad manifest: {e}")))?;
        let mut templates = BTreeMap::new();
        for entry in manifest.template {
            let key = TemplateKey::new(entry.method, entry.selection, entry.task);
            let tpl = PromptTemplate::new(key, read(&entry.file)?)?;
            if templates.insert(key, tpl).is_some() {
                return Err(Error::Registry(format!("duplicate manifest entry for {key}")));
            }
        }
        Ok(TemplateRegistry { templates })
    }

    pub fn get(&self, key: &TemplateKey) -> Result<&PromptTemplate> {
        self.templates
            .get(key)
            .ok_or_else(|| Error::Registry(format!("no template for {key}")))
    }

    pub fn contains(&self, key: &TemplateKey) -> bool {
        self.templates.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &TemplateKey> {
        self.templates.keys()
    }

    /// Keys of the standard matrix that this registry lacks.
    pub fn missing_standard_keys(&self) -> Vec<TemplateKey> {
        TemplateKey::standard_matrix()
            .into_iter()
            .filter(|k| !self.templates.contains_key(k))
            .collect()
    }

    /// Body hashes by key, for run metadata.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        self.templates
            .iter()
            .map(|(k, t)| (k.to_string(), t.body_hash()))
            .collect()
    }

    /// Renders a template for `example`. `label` fills `{label}` or
    /// `{predicted_class}`; `k` must be given exactly when the template has a
    /// `{k}` slot.
    pub fn render(
        &self,
        key: &TemplateKey,
        example: &Example,
        label: Option<&str>,
        k: Option<usize>,
    ) -> Result<String> {
        Ok(self.render_layout(key, example, label, k)?.text)
    }

    pub fn render_layout(
        &self,
        key: &TemplateKey,
        example: &Example,
        label: Option<&str>,
        k: Option<usize>,
    ) -> Result<RenderedPrompt> {
        if key.task != example.task() {
            return Err(Error::Render {
                key: key.to_string(),
                message: format!("example {} is a {} example", example.id(), example.task()),
            });
        }
        let tpl = self.get(key)?;
        let mut values = PlaceholderValues::from_example(example);
        if let Some(label) = label {
            if !example.label_space().iter().any(|l| l == label) {
                return Err(Error::Render {
                    key: key.to_string(),
                    message: format!("label {label:?} not in label space"),
                });
            }
            let slot = if key.method == PromptMethod::AttributionLabel {
                Placeholder::PredictedClass
            } else {
                Placeholder::Label
            };
            values.set(slot, label);
        }
        if let Some(k) = k {
            values.set(Placeholder::K, k.to_string());
        }
        tpl.fill(&values)
    }
}

/// Selection budget kind; `ratio` is only meaningful for Top-Ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectionSpec {
    Unbound,
    TopVar,
    TopRatio { ratio: f64 },
}

impl SelectionSpec {
    pub fn validate(&self) -> Result<()> {
        if let SelectionSpec::TopRatio { ratio } = *self {
            if !(ratio > 0.0 && ratio <= 1.0) {
                return Err(Error::Config(format!("top_ratio ratio {ratio} outside (0, 1]")));
            }
        }
        Ok(())
    }

    pub fn selection(&self) -> Selection {
        match self {
            SelectionSpec::Unbound => Selection::Unbound,
            SelectionSpec::TopVar => Selection::TopVar,
            SelectionSpec::TopRatio { .. } => Selection::TopRatio,
        }
    }
}

/// Number of words to request: `None` for unbound, the human rationale size
/// for Top-Var, and `max(1, round(ratio * words))` for Top-Ratio with halves
/// rounded away from zero.
pub fn compute_k(spec: &SelectionSpec, example: &Example) -> Result<Option<usize>> {
    spec.validate()?;
    match *spec {
        SelectionSpec::Unbound => Ok(None),
        SelectionSpec::TopVar => {
            if example.is_degenerate() {
                Err(Error::Degenerate(example.id().to_string()))
            } else {
                Ok(Some(example.human_rationale().len()))
            }
        }
        SelectionSpec::TopRatio { ratio } => Ok(Some(top_ratio_k(ratio, example.word_count()))),
    }
}

pub fn top_ratio_k(ratio: f64, words: usize) -> usize {
    ((ratio * words as f64).round() as usize).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestMode {
    Alignment,
    Faithfulness,
}

/// Label to put in a rationale request: the gold label for alignment, the
/// model's own prediction for faithfulness. `Ok(None)` means the example must
/// be skipped because the prediction is INVALID.
pub fn label_for_rationale_request(
    mode: RequestMode,
    example: &Example,
    predicted: Option<&PredictedLabel>,
) -> Result<Option<String>> {
    match mode {
        RequestMode::Alignment => Ok(Some(example.gold_label().to_string())),
        RequestMode::Faithfulness => {
            let p = predicted.ok_or_else(|| {
                Error::Contract("faithfulness rationale requests need a predicted label".into())
            })?;
            match &p.value {
                LabelValue::Label(l) if example.label_space().contains(l) => Ok(Some(l.clone())),
                _ => Ok(None),
            }
        }
    }
}
