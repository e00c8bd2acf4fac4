//! Experiment orchestration: configured cells over a dataset, evaluated on a
//! bounded worker pool and reduced in dataset order.

pub mod config;
pub mod report;

use std::collections::{BTreeMap, HashMap};
use std::time::{SystemTime, UNIX_EPOCH};

use log::{info, warn};
use rayon::prelude::*;

use crate::attribution_io::{
    aggregate_with, attribution_prompt, ranked_positions as ranked_by_score, read_records,
    select_top, AttributionMethod, AttributionRecord, SelectionScope,
};
use crate::corpus::{load_dataset, Dataset, Example, Task};
use crate::error::{Error, Result};
use crate::metrics::{
    accuracy, fisher_pearson_skewness, flip_rate, macro_f1, micro_f1, random_baseline_with_seeds,
    Confusion, FlipOutcome,
};
use crate::model_client::{ModelClient, PredictedLabel, ResponseCache, TaskModel};
use crate::perturbation::{example_rng, faithfulness_pass, MaskScope, PassResult, Position};
use crate::prompting::{
    compute_k, label_for_rationale_request, PlaceholderValues, PromptMethod, RequestMode,
    Selection, TemplateKey, TemplateRegistry,
};
use crate::rationale_parser::{
    align_words_with, align_words_with_instruction, enforce_k, parse_rationale,
    ranked_positions as ranked_by_generation, RationaleMask,
};

pub use config::{AttributionCells, BaselineRow, DatasetRef, ExperimentConfig, PromptingCells};
pub use report::{
    emit_report, read_outcome_log, read_report, CellReport, EvalReport, Family, FailureLogEntry,
    Format, OutcomeLogEntry, ParserLogEntry, RunKind, RunLogs, RunMetadata, RunOutput,
    SkewnessRow,
};

/// Per-example result inside one cell.
enum Eval<T> {
    Done(T),
    Invalid,
    Degenerate,
    Failed(String),
}

impl<T> From<Result<Option<T>>> for Eval<T> {
    fn from(r: Result<Option<T>>) -> Self {
        match r {
            Ok(Some(t)) => Eval::Done(t),
            Ok(None) | Err(Error::Degenerate(_)) => Eval::Degenerate,
            Err(e) => Eval::Failed(e.to_string()),
        }
    }
}

/// Where a faithfulness mask comes from.
#[derive(Debug, Clone, Copy)]
enum Source {
    Prompting(PromptMethod, Selection),
    Attribution(AttributionMethod, Selection),
    Baseline(BaselineRow, Option<u64>),
}

struct ParseInfo {
    raw: String,
    words: Vec<String>,
    delimiter: crate::rationale_parser::Delimiter,
    dropped: usize,
    k: Option<usize>,
    matched: usize,
    unmatched: usize,
}

impl ParseInfo {
    fn log(self, cell: &str, example_id: &str) -> ParserLogEntry {
        ParserLogEntry {
            cell: cell.to_string(),
            example_id: example_id.to_string(),
            raw: self.raw,
            words: self.words,
            delimiter: self.delimiter,
            dropped_fragments: self.dropped,
            k: self.k,
            matched: self.matched,
            unmatched: self.unmatched,
        }
    }
}

struct Plan {
    ranked: Vec<Position>,
    k_limit: Option<usize>,
    parse: Option<ParseInfo>,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// A validated configuration with its dataset, templates and attribution
/// records loaded. Nothing here touches the network.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub dataset: Dataset,
    pub registry: TemplateRegistry,
    attributions: BTreeMap<AttributionMethod, HashMap<String, AttributionRecord>>,
}

impl Experiment {
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let registry = match &config.templates_dir {
            Some(dir) => TemplateRegistry::from_dir(dir)?,
            None => TemplateRegistry::builtin(),
        };
        let mut dataset = load_dataset(&config.dataset.path, config.dataset.adapter)?;
        if let Some(n) = config.dataset.subset {
            dataset = dataset.subset(n, config.dataset.subset_seed);
        }
        if let Some(r) = config.top_ratio {
            dataset.top_ratio = r;
        }
        let task = dataset
            .examples
            .first()
            .map(|e| e.task())
            .ok_or_else(|| Error::Config(format!("dataset {} is empty", dataset.name)))?;
        config.check_templates(&registry, task)?;
        let mut attributions = BTreeMap::new();
        let mut files = BTreeMap::new();
        for a in &config.attribution {
            if let Some(prev) = files.insert(a.method, a.file.clone()) {
                if prev != a.file {
                    return Err(Error::Config(format!(
                        "attribution {} configured with two files",
                        a.method
                    )));
                }
                continue;
            }
            let records = read_records(&a.file, Some(&dataset))?;
            let map: HashMap<String, AttributionRecord> = records
                .into_iter()
                .map(|r| (r.example_id.clone(), r))
                .collect();
            info!("{} attribution records for {}", map.len(), a.method);
            attributions.insert(a.method, map);
        }
        Ok(Experiment {
            config,
            dataset,
            registry,
            attributions,
        })
    }

    pub fn task(&self) -> Task {
        self.dataset.examples[0].task()
    }

    pub fn client(&self) -> Result<ModelClient> {
        let cache = self
            .config
            .cache_dir
            .as_ref()
            .map(ResponseCache::open)
            .transpose()?;
        Ok(ModelClient::new(self.config.endpoint.clone(), cache)?.offline(self.config.offline))
    }

    fn model<'a>(&'a self, client: &'a ModelClient) -> TaskModel<'a> {
        let mut m = TaskModel::new(client, &self.registry, self.config.model_id.clone());
        m.classify_max_tokens = self.config.classify_max_tokens;
        m.rationale_max_tokens = self.config.rationale_max_tokens;
        m
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.concurrency)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))
    }

    fn par_map<T: Send>(
        &self,
        pool: &rayon::ThreadPool,
        f: impl Fn(usize, &Example) -> T + Sync,
    ) -> Vec<T> {
        pool.install(|| {
            self.dataset
                .examples
                .par_iter()
                .enumerate()
                .map(|(i, e)| f(i, e))
                .collect()
        })
    }

    fn metadata(&self, started: u64, network_calls: usize) -> RunMetadata {
        let task = self.task();
        let hashes = self.registry.hashes();
        let template_hashes = self
            .config
            .required_templates(task)
            .iter()
            .filter_map(|k| {
                let name = k.to_string();
                hashes.get(&name).map(|h| (name, h.clone()))
            })
            .collect();
        RunMetadata {
            config_name: self.config.name.clone(),
            config_hash: self.config.hash(),
            dataset: self.dataset.name.clone(),
            task: task.as_str().to_string(),
            model_id: self.config.model_id.clone(),
            examples: self.dataset.len(),
            template_hashes,
            segment_separator: " ".into(),
            started_unix: started,
            finished_unix: now_unix(),
            network_calls,
        }
    }

    fn skewness(&self) -> Vec<SkewnessRow> {
        self.attributions
            .iter()
            .map(|(method, records)| {
                let g1s: Vec<f64> = self
                    .dataset
                    .examples
                    .iter()
                    .filter_map(|e| records.get(e.id()))
                    .filter_map(|r| fisher_pearson_skewness(&r.scores).ok())
                    .collect();
                let n = g1s.len();
                SkewnessRow {
                    method: method.as_str().to_string(),
                    examples: n,
                    mean_g1: (n > 0).then(|| g1s.iter().sum::<f64>() / n as f64),
                    positive_fraction: (n > 0)
                        .then(|| g1s.iter().filter(|g| **g > 0.0).count() as f64 / n as f64),
                }
            })
            .collect()
    }

    fn record(&self, method: AttributionMethod, id: &str) -> Result<&AttributionRecord> {
        self.attributions
            .get(&method)
            .and_then(|m| m.get(id))
            .ok_or_else(|| Error::Contract(format!("no {method} record for example {id}")))
    }

    fn new_report(&self, kind: RunKind) -> EvalReport {
        EvalReport {
            kind,
            metadata: self.metadata(now_unix(), 0),
            cells: Vec::new(),
            accuracy: None,
            skewness: self.skewness(),
            attempts: 0,
            failures: 0,
            degraded: false,
            warnings: Vec::new(),
        }
    }

    fn random_alignment_cell(&self) -> Result<CellReport> {
        let seeds: Vec<u64> = (0..self.config.seeds as u64).collect();
        let rb = random_baseline_with_seeds(&self.dataset, &seeds)?;
        let mut cell = CellReport::new(Family::Baseline, BaselineRow::Random.as_str(), "top_var");
        cell.value = Some(rb.summary.mean);
        cell.std = Some(rb.summary.std);
        cell.examples = rb.examples;
        cell.skipped_degenerate = rb.excluded_degenerate;
        Ok(cell)
    }

    /// Model-free random Top-Var alignment baseline.
    pub fn baseline(&self) -> Result<RunOutput> {
        let started = now_unix();
        let mut report = self.new_report(RunKind::Baseline);
        report.skewness.clear();
        report.cells.push(self.random_alignment_cell()?);
        report.metadata = self.metadata(started, 0);
        report.finalize();
        Ok(RunOutput {
            report,
            logs: RunLogs::default(),
        })
    }

    /// Requests, parses and aligns a rationale for the gold label of every
    /// example in every configured cell; scores each cell by macro F1.
    pub fn alignment(&self, client: &ModelClient) -> Result<RunOutput> {
        let started = now_unix();
        let pool = self.pool()?;
        let model = self.model(client);
        let mut report = self.new_report(RunKind::Alignment);
        let mut logs = RunLogs::default();

        for a in &self.config.attribution {
            for &sel in &a.selections {
                let mut cell = CellReport::new(Family::Attribution, a.method.as_str(), sel.as_str());
                let results = self.par_map(&pool, |_, ex| {
                    Eval::from(self.align_attribution(ex, a.method, sel).map(Some))
                });
                self.reduce_alignment(&mut cell, results, &mut logs);
                report.cells.push(cell);
            }
        }
        for p in &self.config.prompting {
            for &sel in &p.selections {
                let mut cell = CellReport::new(Family::Prompting, p.method.as_str(), sel.as_str());
                let label = cell.label();
                let results = self.par_map(&pool, |_, ex| {
                    Eval::from(self.align_prompting(&model, ex, p.method, sel).map(Some))
                });
                let mut confusions = Vec::new();
                for (ex, r) in self.dataset.examples.iter().zip(results) {
                    match r {
                        Eval::Done((c, info)) => {
                            cell.unmatched_words += info.unmatched;
                            logs.parser.push(info.log(&label, ex.id()));
                            confusions.push(Eval::Done(c));
                        }
                        Eval::Invalid => confusions.push(Eval::Invalid),
                        Eval::Degenerate => confusions.push(Eval::Degenerate),
                        Eval::Failed(m) => confusions.push(Eval::Failed(m)),
                    }
                }
                self.reduce_alignment(&mut cell, confusions, &mut logs);
                report.cells.push(cell);
            }
        }
        for &row in &self.config.baselines {
            match row {
                BaselineRow::Random => report.cells.push(self.random_alignment_cell()?),
                other => {
                    let mut cell = CellReport::new(Family::Baseline, other.as_str(), baseline_selection(other));
                    cell.skipped = Some("faithfulness-only row".into());
                    report.cells.push(cell);
                }
            }
        }
        report.metadata = self.metadata(started, client.network_calls());
        report.finalize();
        Ok(RunOutput { report, logs })
    }

    fn reduce_alignment(
        &self,
        cell: &mut CellReport,
        results: Vec<Eval<Confusion>>,
        logs: &mut RunLogs,
    ) {
        let label = cell.label();
        let mut confusions = Vec::new();
        for (ex, r) in self.dataset.examples.iter().zip(results) {
            match r {
                Eval::Done(c) => confusions.push(c),
                Eval::Invalid => cell.skipped_invalid += 1,
                Eval::Degenerate => cell.skipped_degenerate += 1,
                Eval::Failed(error) => {
                    cell.failures += 1;
                    logs.failures.push(FailureLogEntry {
                        cell: label.clone(),
                        example_id: ex.id().to_string(),
                        error,
                    });
                }
            }
        }
        cell.examples = confusions.len();
        if confusions.is_empty() {
            cell.skipped = Some("no example could be scored".into());
            return;
        }
        let f1s: Vec<f64> = confusions.iter().map(|c| c.score().f1).collect();
        if let Ok(ms) = macro_f1(&f1s) {
            cell.value = Some(ms.mean);
            cell.std = Some(ms.std);
        }
        cell.micro_f1 = micro_f1(&confusions).ok();
    }

    fn align_prompting(
        &self,
        model: &TaskModel<'_>,
        ex: &Example,
        method: PromptMethod,
        sel: Selection,
    ) -> Result<(Confusion, ParseInfo)> {
        if ex.is_degenerate() {
            return Err(Error::Degenerate(ex.id().to_string()));
        }
        let spec = self.config.selection_spec(sel)?;
        let k = compute_k(&spec, ex)?;
        let key = TemplateKey::new(method, sel, ex.task());
        let label = label_for_rationale_request(RequestMode::Alignment, ex, None)?
            .expect("alignment always has a label");
        let raw = model.request_rationale(ex, &key, &label, k)?;
        let parsed = parse_rationale(&raw);
        let used = match k {
            Some(k) => enforce_k(&parsed, k),
            None => parsed.clone(),
        };
        let aligned = align_words_with(&used, ex, self.config.match_mode);
        let conf = Confusion::of(&aligned.mask, &RationaleMask::human(ex))?;
        Ok((
            conf,
            ParseInfo {
                raw,
                words: parsed.words,
                delimiter: parsed.delimiter_used,
                dropped: parsed.dropped_fragments,
                k,
                matched: aligned.matched_generated,
                unmatched: aligned.unmatched_generated,
            },
        ))
    }

    fn align_attribution(
        &self,
        ex: &Example,
        method: AttributionMethod,
        sel: Selection,
    ) -> Result<Confusion> {
        if ex.is_degenerate() {
            return Err(Error::Degenerate(ex.id().to_string()));
        }
        let record = self.record(method, ex.id())?;
        let prompt = attribution_prompt(&self.registry, ex, &record.predicted_label)?;
        let scores = aggregate_with(record, ex, &prompt, self.config.aggregation)?;
        let spec = self.config.selection_spec(sel)?;
        let k = compute_k(&spec, ex)?.expect("bounded selection");
        let top = select_top(&scores, k, SelectionScope::Input);
        Confusion::of(&top.mask, &RationaleMask::human(ex))
    }

    /// Classifies every example, masks it per configured cell and scope,
    /// re-classifies and scores each cell by flip rate.
    pub fn faithfulness(&self, client: &ModelClient) -> Result<RunOutput> {
        let started = now_unix();
        let pool = self.pool()?;
        let model = self.model(client);
        let mut report = self.new_report(RunKind::Faithfulness);
        let mut logs = RunLogs::default();

        let originals: Vec<std::result::Result<PredictedLabel, String>> = self.par_map(&pool, |_, ex| {
            model.classify(ex, None).map_err(|e| e.to_string())
        });
        let (preds, golds): (Vec<_>, Vec<_>) = originals
            .iter()
            .zip(&self.dataset.examples)
            .filter_map(|(o, ex)| o.as_ref().ok().map(|p| (p.value.clone(), ex.gold_label().to_string())))
            .unzip();
        report.accuracy = accuracy(&preds, &golds).ok();
        let invalid = preds.iter().filter(|p| !p.is_valid()).count();
        if invalid > 0 {
            warn!("{invalid} unmasked prediction(s) were INVALID and are skipped");
        }

        let mut cells: Vec<(CellReport, Source, Option<usize>)> = Vec::new();
        for &scope in &self.config.scopes {
            for a in &self.config.attribution {
                for &sel in &a.selections {
                    let mut c = CellReport::new(Family::Attribution, a.method.as_str(), sel.as_str());
                    c.scope = Some(scope);
                    cells.push((c, Source::Attribution(a.method, sel), None));
                }
            }
            for p in &self.config.prompting {
                for &sel in &p.selections {
                    let mut c = CellReport::new(Family::Prompting, p.method.as_str(), sel.as_str());
                    c.scope = Some(scope);
                    cells.push((c, Source::Prompting(p.method, sel), None));
                }
            }
            for &row in &self.config.baselines {
                let mut c = CellReport::new(Family::Baseline, row.as_str(), baseline_selection(row));
                c.scope = Some(scope);
                cells.push((c, Source::Baseline(row, None), None));
            }
        }
        for &scope in &self.config.scopes {
            for &k in &self.config.k_sweep {
                for a in &self.config.attribution {
                    let mut c = CellReport::new(Family::Attribution, a.method.as_str(), "top_k");
                    c.scope = Some(scope);
                    c.k = Some(k);
                    cells.push((c, Source::Attribution(a.method, Selection::TopVar), Some(k)));
                }
                for p in &self.config.prompting {
                    let mut c = CellReport::new(Family::Prompting, p.method.as_str(), "top_k");
                    c.scope = Some(scope);
                    c.k = Some(k);
                    cells.push((c, Source::Prompting(p.method, Selection::TopVar), Some(k)));
                }
                if self.config.baselines.contains(&BaselineRow::Random) {
                    let mut c = CellReport::new(Family::Baseline, "random", "top_k");
                    c.scope = Some(scope);
                    c.k = Some(k);
                    cells.push((c, Source::Baseline(BaselineRow::Random, None), Some(k)));
                }
            }
        }

        for (mut cell, source, k_override) in cells {
            let scope = cell.scope.expect("faithfulness cells carry a scope");
            let seeds: Vec<Option<u64>> = match source {
                Source::Baseline(BaselineRow::Random, _) => {
                    (0..self.config.faithfulness_seeds as u64).map(Some).collect()
                }
                _ => vec![None],
            };
            let label = cell.label();
            let mut per_seed_rates = Vec::new();
            let mut masked_words = Vec::new();
            for seed in seeds {
                let source = match source {
                    Source::Baseline(row, _) => Source::Baseline(row, seed),
                    s => s,
                };
                let results = self.par_map(&pool, |_i, ex| {
                    let orig = match &originals[_i] {
                        Ok(o) => o,
                        Err(e) => return Eval::Failed(format!("unmasked classification: {e}")),
                    };
                    if !orig.value.is_valid() {
                        return Eval::Invalid;
                    }
                    let plan = match self.plan(&model, ex, orig, source, scope, k_override) {
                        Ok(Some(p)) => p,
                        other => {
                            return match Eval::<()>::from(other.map(|o| o.map(|_| ()))) {
                                Eval::Failed(m) => Eval::Failed(m),
                                _ => Eval::Degenerate,
                            }
                        }
                    };
                    match faithfulness_pass(
                        &model,
                        ex,
                        orig,
                        &plan.ranked,
                        scope,
                        plan.k_limit,
                        self.config.mask_style,
                    ) {
                        Ok(PassResult::Outcome(o)) => Eval::Done((o, plan.k_limit, plan.parse)),
                        Ok(PassResult::SkippedInvalidOriginal) => Eval::Invalid,
                        Err(e) => Eval::Failed(e.to_string()),
                    }
                });
                let mut outcomes: Vec<FlipOutcome> = Vec::new();
                let (mut inv, mut deg, mut fail, mut unmatched) = (0, 0, 0, 0);
                for (ex, r) in self.dataset.examples.iter().zip(results) {
                    match r {
                        Eval::Done((o, k_limit, parse)) => {
                            if let Some(info) = parse {
                                unmatched += info.unmatched;
                                logs.parser.push(info.log(&label, ex.id()));
                            }
                            masked_words.push(o.masked_word_count as f64);
                            logs.outcomes.push(OutcomeLogEntry {
                                cell: label.clone(),
                                scope,
                                k_limit,
                                seed,
                                outcome: o.clone(),
                            });
                            outcomes.push(o);
                        }
                        Eval::Invalid => inv += 1,
                        Eval::Degenerate => deg += 1,
                        Eval::Failed(error) => {
                            fail += 1;
                            logs.failures.push(FailureLogEntry {
                                cell: label.clone(),
                                example_id: ex.id().to_string(),
                                error,
                            });
                        }
                    }
                }
                // counts are per seed; keep the last seed's, which equal the others
                cell.examples = outcomes.len();
                cell.skipped_invalid = inv;
                cell.skipped_degenerate = deg;
                cell.failures = fail;
                cell.unmatched_words = unmatched;
                if let Ok(rate) = flip_rate(&outcomes) {
                    per_seed_rates.push(rate);
                }
            }
            if per_seed_rates.is_empty() {
                cell.skipped = Some("no example could be scored".into());
            } else {
                let n = per_seed_rates.len() as f64;
                let mean = per_seed_rates.iter().sum::<f64>() / n;
                let var = per_seed_rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
                cell.value = Some(mean);
                cell.std = Some(var.sqrt());
                cell.mean_masked_words =
                    Some(masked_words.iter().sum::<f64>() / masked_words.len() as f64);
            }
            report.cells.push(cell);
        }
        report.metadata = self.metadata(started, client.network_calls());
        report.finalize();
        Ok(RunOutput { report, logs })
    }

    fn classification_instruction(&self, ex: &Example) -> Result<Vec<String>> {
        let tpl = self.registry.get(&TemplateKey::classification(ex.task()))?;
        let layout = tpl.fill(&PlaceholderValues::from_example(ex))?;
        Ok(layout.instruction_words().into_iter().map(|(w, _)| w).collect())
    }

    /// Ranked positions and budget for one example; `None` when the example
    /// has no human rationale and the source needs one.
    fn plan(
        &self,
        model: &TaskModel<'_>,
        ex: &Example,
        orig: &PredictedLabel,
        source: Source,
        scope: MaskScope,
        k_override: Option<usize>,
    ) -> Result<Option<Plan>> {
        let extended = scope == MaskScope::InputAndInstruction;
        let n = ex.word_count();
        match source {
            Source::Prompting(method, sel) => {
                let label = label_for_rationale_request(RequestMode::Faithfulness, ex, Some(orig))?
                    .ok_or_else(|| Error::Contract("INVALID original reached planning".into()))?;
                let k = match k_override {
                    Some(k) => Some(k),
                    None => match compute_k(&self.config.selection_spec(sel)?, ex) {
                        Ok(k) => k,
                        Err(Error::Degenerate(_)) => return Ok(None),
                        Err(e) => return Err(e),
                    },
                };
                let key = TemplateKey::new(method, if k_override.is_some() { Selection::TopVar } else { sel }, ex.task());
                let raw = model.request_rationale(ex, &key, &label, k)?;
                let parsed = parse_rationale(&raw);
                let used = match k {
                    Some(k) => enforce_k(&parsed, k),
                    None => parsed.clone(),
                };
                let instr = if extended {
                    Some(self.classification_instruction(ex)?)
                } else {
                    None
                };
                let ranked =
                    ranked_by_generation(&used, ex, instr.as_deref(), self.config.match_mode);
                let aligned = match &instr {
                    Some(words) => {
                        align_words_with_instruction(&used, ex, words, self.config.match_mode).0
                    }
                    None => align_words_with(&used, ex, self.config.match_mode),
                };
                Ok(Some(Plan {
                    ranked,
                    k_limit: k,
                    parse: Some(ParseInfo {
                        raw,
                        words: parsed.words,
                        delimiter: parsed.delimiter_used,
                        dropped: parsed.dropped_fragments,
                        k,
                        matched: aligned.matched_generated,
                        unmatched: aligned.unmatched_generated,
                    }),
                }))
            }
            Source::Attribution(method, sel) => {
                let k = match k_override {
                    Some(k) => k,
                    None => match compute_k(&self.config.selection_spec(sel)?, ex) {
                        Ok(k) => k.expect("bounded selection"),
                        Err(Error::Degenerate(_)) => return Ok(None),
                        Err(e) => return Err(e),
                    },
                };
                let record = self.record(method, ex.id())?;
                let prompt = attribution_prompt(&self.registry, ex, &record.predicted_label)?;
                let scores = aggregate_with(record, ex, &prompt, self.config.aggregation)?;
                Ok(Some(Plan {
                    ranked: ranked_by_score(&scores, scope),
                    k_limit: Some(k),
                    parse: None,
                }))
            }
            Source::Baseline(row, seed) => {
                let instruction_len = if extended {
                    self.classification_instruction(ex)?.len()
                } else {
                    0
                };
                let plan = |ranked: Vec<Position>, k_limit| {
                    Ok(Some(Plan {
                        ranked,
                        k_limit,
                        parse: None,
                    }))
                };
                match row {
                    BaselineRow::Empty => plan(Vec::new(), None),
                    BaselineRow::Everything => plan(
                        (0..n)
                            .map(Position::Input)
                            .chain((0..instruction_len).map(Position::Instruction))
                            .collect(),
                        None,
                    ),
                    BaselineRow::Human => {
                        if ex.is_degenerate() {
                            return Ok(None);
                        }
                        plan(
                            ex.human_rationale().iter().map(|&i| Position::Input(i)).collect(),
                            None,
                        )
                    }
                    BaselineRow::Random => {
                        let k = match k_override {
                            Some(k) => k,
                            None if ex.is_degenerate() => return Ok(None),
                            None => ex.human_rationale().len(),
                        };
                        let seed = seed.ok_or_else(|| Error::Contract("random row without seed".into()))?;
                        let universe: Vec<Position> = (0..n)
                            .map(Position::Input)
                            .chain((0..instruction_len).map(Position::Instruction))
                            .collect();
                        let mut rng = example_rng(seed, ex.id());
                        let picked =
                            rand::seq::index::sample(&mut rng, universe.len(), k.min(universe.len()));
                        plan(picked.into_iter().map(|i| universe[i]).collect(), Some(k))
                    }
                }
            }
        }
    }
}

fn baseline_selection(row: BaselineRow) -> &'static str {
    match row {
        BaselineRow::Random | BaselineRow::Human => "top_var",
        BaselineRow::Everything => "all",
        BaselineRow::Empty => "none",
    }
}

pub fn run_alignment(config: ExperimentConfig) -> Result<RunOutput> {
    let exp = Experiment::prepare(config)?;
    let client = exp.client()?;
    exp.alignment(&client)
}

pub fn run_faithfulness(config: ExperimentConfig) -> Result<RunOutput> {
    let exp = Experiment::prepare(config)?;
    let client = exp.client()?;
    exp.faithfulness(&client)
}

pub fn run_baseline(config: ExperimentConfig) -> Result<RunOutput> {
    Experiment::prepare(config)?.baseline()
}
