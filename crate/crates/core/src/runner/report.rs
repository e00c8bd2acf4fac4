//! Report structure and CSV / Markdown / JSON emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::FlipOutcome;
use crate::perturbation::MaskScope;
use crate::rationale_parser::Delimiter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Alignment,
    Faithfulness,
    Baseline,
}

impl RunKind {
    pub fn metric(self) -> &'static str {
        match self {
            RunKind::Faithfulness => "flip_rate",
            RunKind::Alignment | RunKind::Baseline => "f1",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Attribution,
    Prompting,
    Baseline,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Attribution => "attribution",
            Family::Prompting => "prompting",
            Family::Baseline => "baseline",
        }
    }
}

/// One (method, selection, scope[, k]) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub family: Family,
    pub method: String,
    pub selection: String,
    pub scope: Option<MaskScope>,
    pub k: Option<usize>,
    /// Macro F1 or flip rate, percent. `None` when skipped.
    pub value: Option<f64>,
    pub std: Option<f64>,
    pub micro_f1: Option<f64>,
    pub examples: usize,
    pub skipped_invalid: usize,
    pub skipped_degenerate: usize,
    pub failures: usize,
    pub unmatched_words: usize,
    pub mean_masked_words: Option<f64>,
    /// Reason the cell was not evaluated.
    pub skipped: Option<String>,
}

impl CellReport {
    pub fn new(family: Family, method: &str, selection: &str) -> Self {
        CellReport {
            family,
            method: method.to_string(),
            selection: selection.to_string(),
            scope: None,
            k: None,
            value: None,
            std: None,
            micro_f1: None,
            examples: 0,
            skipped_invalid: 0,
            skipped_degenerate: 0,
            failures: 0,
            unmatched_words: 0,
            mean_masked_words: None,
            skipped: None,
        }
    }

    /// Stable identifier used in logs.
    pub fn label(&self) -> String {
        let mut s = format!("{}/{}/{}", self.family.as_str(), self.method, self.selection);
        if let Some(scope) = self.scope {
            let _ = write!(s, "/{}", scope.as_str());
        }
        if let Some(k) = self.k {
            let _ = write!(s, "/k={k}");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewnessRow {
    pub method: String,
    pub examples: usize,
    pub mean_g1: Option<f64>,
    pub positive_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config_name: String,
    pub config_hash: String,
    pub dataset: String,
    pub task: String,
    pub model_id: String,
    pub examples: usize,
    pub template_hashes: BTreeMap<String, String>,
    /// Separator placed between segments when they are concatenated.
    pub segment_separator: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub network_calls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: RunKind,
    pub metadata: RunMetadata,
    pub cells: Vec<CellReport>,
    /// Unmasked accuracy of the model, faithfulness runs only.
    pub accuracy: Option<f64>,
    pub skewness: Vec<SkewnessRow>,
    pub attempts: usize,
    pub failures: usize,
    pub degraded: bool,
    pub warnings: Vec<String>,
}

/// Share of failed example evaluations above which a run is degraded.
pub const DEGRADED_FAILURE_RATE: f64 = 0.10;

impl EvalReport {
    pub fn finalize(&mut self) {
        self.attempts = self
            .cells
            .iter()
            .map(|c| c.examples + c.failures)
            .sum::<usize>();
        self.failures = self.cells.iter().map(|c| c.failures).sum();
        self.degraded =
            self.attempts > 0 && self.failures as f64 > DEGRADED_FAILURE_RATE * self.attempts as f64;
        let msg = format!(
            "{} of {} example evaluations failed; run marked degraded",
            self.failures, self.attempts
        );
        self.warnings.retain(|w| !w.ends_with("run marked degraded"));
        if self.degraded {
            self.warnings.push(msg);
        }
    }

    pub fn cell(&self, label: &str) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.label() == label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeLogEntry {
    pub cell: String,
    pub scope: MaskScope,
    pub k_limit: Option<usize>,
    pub seed: Option<u64>,
    #[serde(flatten)]
    pub outcome: FlipOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParserLogEntry {
    pub cell: String,
    pub example_id: String,
    pub raw: String,
    pub words: Vec<String>,
    pub delimiter: Delimiter,
    pub dropped_fragments: usize,
    pub k: Option<usize>,
    pub matched: usize,
    pub unmatched: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureLogEntry {
    pub cell: String,
    pub example_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLogs {
    pub outcomes: Vec<OutcomeLogEntry>,
    pub parser: Vec<ParserLogEntry>,
    pub failures: Vec<FailureLogEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub report: EvalReport,
    pub logs: RunLogs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Markdown,
    Json,
}

pub const CSV_HEADER: &str = "family,method,selection,scope,k,metric,value,std,micro_f1,examples,skipped_invalid,skipped_degenerate,failures,unmatched_words,mean_masked_words,status";

fn num(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_default()
}

fn status(c: &CellReport) -> String {
    match &c.skipped {
        Some(r) => format!("skipped: {r}"),
        None => "ok".into(),
    }
}

pub fn to_csv(report: &EvalReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<&str> = CSV_HEADER.split(',').collect();
    w.write_record(&header).expect("in-memory write");
    for c in &report.cells {
        w.write_record([
            c.family.as_str().to_string(),
            c.method.clone(),
            c.selection.clone(),
            c.scope.map(|s| s.as_str().to_string()).unwrap_or_default(),
            c.k.map(|k| k.to_string()).unwrap_or_default(),
            report.kind.metric().to_string(),
            num(c.value),
            num(c.std),
            num(c.micro_f1),
            c.examples.to_string(),
            c.skipped_invalid.to_string(),
            c.skipped_degenerate.to_string(),
            c.failures.to_string(),
            c.unmatched_words.to_string(),
            num(c.mean_masked_words),
            status(c),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

fn value_cell(c: &CellReport) -> String {
    match (c.value, c.std, &c.skipped) {
        (_, _, Some(_)) => "-".into(),
        (Some(v), Some(s), _) if s > 0.0 && c.family == Family::Baseline => {
            format!("{v:.2} ± {s:.2}")
        }
        (Some(v), _, _) => format!("{v:.2}"),
        (None, _, _) => "-".into(),
    }
}

pub fn to_markdown(report: &EvalReport) -> String {
    let m = &report.metadata;
    let mut out = String::new();
    let _ = writeln!(out, "# {}\n", m.config_name);
    let _ = writeln!(out, "config hash: `{}`  ", m.config_hash);
    let _ = writeln!(out, "dataset: {} ({} examples, task {})  ", m.dataset, m.examples, m.task);
    let _ = writeln!(out, "model: {}  ", m.model_id);
    let _ = writeln!(out, "metric: {}", report.kind.metric());
    if let Some(acc) = report.accuracy {
        let _ = writeln!(out, "\nunmasked accuracy: {acc:.2}");
    }
    if report.degraded {
        let _ = writeln!(
            out,
            "\n**degraded**: {} of {} example evaluations failed",
            report.failures, report.attempts
        );
    }
    let main: Vec<&CellReport> = report.cells.iter().filter(|c| c.k.is_none()).collect();
    let mut scopes: Vec<Option<MaskScope>> = main.iter().map(|c| c.scope).collect();
    scopes.dedup();
    scopes.sort();
    scopes.dedup();
    for scope in scopes {
        if let Some(s) = scope {
            let _ = writeln!(out, "\n## scope: {}", s.as_str());
        }
        out.push_str("\n| Method | Selection | Value | Examples | Skipped INVALID | Failures | Unmatched | Masked words |\n");
        out.push_str("|---|---|---:|---:|---:|---:|---:|---:|\n");
        for family in [Family::Attribution, Family::Prompting, Family::Baseline] {
            for c in main.iter().filter(|c| c.scope == scope && c.family == family) {
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {} | {} | {} | {} | {} |",
                    c.method,
                    c.selection,
                    value_cell(c),
                    c.examples,
                    c.skipped_invalid,
                    c.failures,
                    c.unmatched_words,
                    c.mean_masked_words.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into())
                );
            }
        }
    }
    let sweep: Vec<&CellReport> = report.cells.iter().filter(|c| c.k.is_some()).collect();
    if !sweep.is_empty() {
        let mut ks: Vec<usize> = sweep.iter().filter_map(|c| c.k).collect();
        ks.sort_unstable();
        ks.dedup();
        let mut rows: Vec<(Option<MaskScope>, Family, &str)> = Vec::new();
        for c in &sweep {
            let key = (c.scope, c.family, c.method.as_str());
            if !rows.contains(&key) {
                rows.push(key);
            }
        }
        out.push_str("\n## top-k sweep\n\n| Scope | Method |");
        for k in &ks {
            let _ = write!(out, " k={k} |");
        }
        out.push_str("\n|---|---|");
        for _ in &ks {
            out.push_str("---:|");
        }
        out.push('\n');
        for (scope, family, method) in rows {
            let _ = write!(
                out,
                "| {} | {} |",
                scope.map(|s| s.as_str()).unwrap_or("-"),
                method
            );
            for k in &ks {
                let cell = sweep
                    .iter()
                    .find(|c| c.scope == scope && c.family == family && c.method == method && c.k == Some(*k));
                let _ = write!(out, " {} |", cell.map(|c| value_cell(c)).unwrap_or_else(|| "-".into()));
            }
            out.push('\n');
        }
    }
    if !report.skewness.is_empty() {
        out.push_str("\n## attribution skewness\n\n| Method | Examples | Mean g1 | Share g1 > 0 |\n|---|---:|---:|---:|\n");
        for s in &report.skewness {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} |",
                s.method,
                s.examples,
                s.mean_g1.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into()),
                s.positive_fraction.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into())
            );
        }
    }
    for w in &report.warnings {
        let _ = writeln!(out, "\n> warning: {w}");
    }
    out
}

pub fn skewness_csv(report: &EvalReport) -> String {
    let mut out = String::from("method,examples,mean_g1,positive_fraction\n");
    for s in &report.skewness {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            s.method,
            s.examples,
            s.mean_g1.map(|v| format!("{v:.6}")).unwrap_or_default(),
            s.positive_fraction.map(|v| format!("{v:.6}")).unwrap_or_default()
        );
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::Contract(e.to_string()))?;
        buf.push(b'\n');
    }
    write_file(path, &buf)
}

/// Writes the report in the requested formats plus the raw logs; returns the
/// files written.
pub fn emit_report(report: &EvalReport, logs: Option<&RunLogs>, out_dir: &Path, formats: &[Format]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stem = match report.kind {
        RunKind::Alignment => "alignment",
        RunKind::Faithfulness => "faithfulness",
        RunKind::Baseline => "baseline",
    };
    let mut written = Vec::new();
    for f in formats {
        let (path, bytes) = match f {
            Format::Csv => (out_dir.join(format!("{stem}.csv")), to_csv(report).into_bytes()),
            Format::Markdown => (out_dir.join(format!("{stem}.md")), to_markdown(report).into_bytes()),
            Format::Json => (
                out_dir.join(format!("{stem}.report.json")),
                serde_json::to_vec_pretty(report).map_err(|e| Error::Contract(e.to_string()))?,
            ),
        };
        write_file(&path, &bytes)?;
        written.push(path);
    }
    if !report.skewness.is_empty() {
        let p = out_dir.join(format!("{stem}.skewness.csv"));
        write_file(&p, skewness_csv(report).as_bytes())?;
        written.push(p);
    }
    if let Some(logs) = logs {
        for (name, write) in [
            ("outcomes", !logs.outcomes.is_empty()),
            ("parser", !logs.parser.is_empty()),
            ("failures", !logs.failures.is_empty()),
        ] {
            if !write {
                continue;
            }
            let p = out_dir.join(format!("{stem}.{name}.jsonl"));
            match name {
                "outcomes" => write_jsonl(&p, &logs.outcomes)?,
                "parser" => write_jsonl(&p, &logs.parser)?,
                _ => write_jsonl(&p, &logs.failures)?,
            }
            written.push(p);
        }
    }
    Ok(written)
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn read_outcome_log(path: &Path) -> Result<Vec<OutcomeLogEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Schema {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
