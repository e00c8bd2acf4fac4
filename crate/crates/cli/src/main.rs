use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use rationale_core::corpus::Adapter;
use rationale_core::model_client::EndpointConfig;
use rationale_core::perturbation::MaskScope;
use rationale_core::runner::{
    emit_report, read_report, DatasetRef, EvalReport, Experiment, ExperimentConfig, Format,
    RunOutput,
};

#[derive(Parser)]
#[command(name = "rationale-eval", version, about = "Evaluate LLM rationales for alignment with humans and faithfulness to the model")]
struct Cli {
    /// Log at debug level.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Word-level F1 of extracted rationales against human rationales.
    Align(RunArgs),
    /// Flip rate after masking rationales from the classification input.
    Faithfulness(RunArgs),
    /// Random Top-Var alignment baseline; needs no model.
    Baseline(BaselineArgs),
    /// Re-emit CSV and Markdown from a saved JSON report.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Input,
    InputAndInstruction,
}

impl From<ScopeArg> for MaskScope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::Input => MaskScope::Input,
            ScopeArg::InputAndInstruction => MaskScope::InputAndInstruction,
        }
    }
}

#[derive(Args)]
struct Overrides {
    /// Dataset path, replacing the configured one.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Chat-completions base URL, e.g. http://localhost:8000/v1.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of random-baseline seeds.
    #[arg(long)]
    seeds: Option<usize>,
    /// Comma-separated k values for the top-k sweep.
    #[arg(long, value_delimiter = ',')]
    k_sweep: Option<Vec<usize>>,
    /// Masking scope; repeat for several.
    #[arg(long, value_enum)]
    scope: Vec<ScopeArg>,
    /// Fail on cache misses instead of calling the endpoint.
    #[arg(long)]
    offline: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Dataset format: normalized, eraser_esnli or medicalbios.
    #[arg(long, default_value = "normalized")]
    adapter: String,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// A `*.report.json` file written by a previous run.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn apply(cfg: &mut ExperimentConfig, o: Overrides) {
    if let Some(p) = o.dataset {
        cfg.dataset.path = p;
    }
    if let Some(url) = o.endpoint {
        cfg.endpoint.base_url = url;
    }
    if let Some(p) = o.cache_dir {
        cfg.cache_dir = Some(p);
    }
    if let Some(p) = o.out {
        cfg.out_dir = p;
    }
    if let Some(s) = o.seeds {
        cfg.seeds = s;
    }
    if let Some(k) = o.k_sweep {
        cfg.k_sweep = k;
    }
    if !o.scope.is_empty() {
        cfg.scopes = o.scope.into_iter().map(MaskScope::from).collect();
    }
    if o.offline {
        cfg.offline = true;
    }
}

fn load(path: &Path, overrides: Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)
        .with_context(|| format!("loading config {}", path.display()))?;
    apply(&mut cfg, overrides);
    Ok(cfg)
}

const ALL_FORMATS: [Format; 3] = [Format::Csv, Format::Markdown, Format::Json];

fn finish(output: RunOutput, out_dir: &Path) -> Result<ExitCode> {
    let written = emit_report(&output.report, Some(&output.logs), out_dir, &ALL_FORMATS)?;
    for p in &written {
        info!("wrote {}", p.display());
    }
    summarize(&output.report);
    Ok(if output.report.degraded {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}

fn summarize(report: &EvalReport) {
    for c in &report.cells {
        match (c.value, &c.skipped) {
            (Some(v), None) => println!("{:<60} {v:>7.2}", c.label()),
            (_, Some(r)) => println!("{:<60} skipped ({r})", c.label()),
            _ => println!("{:<60} -", c.label()),
        }
    }
    for w in &report.warnings {
        warn!("{w}");
    }
}

fn baseline_config(args: BaselineArgs) -> Result<ExperimentConfig> {
    let mut cfg = match args.config {
        Some(p) => ExperimentConfig::load(&p)?,
        None => {
            let Some(dataset) = args.dataset.clone() else {
                bail!("baseline needs --config or --dataset");
            };
            let adapter: Adapter = args.adapter.parse()?;
            ExperimentConfig {
                name: "random-baseline".into(),
                dataset: DatasetRef {
                    path: dataset,
                    adapter,
                    subset: None,
                    subset_seed: 0,
                },
                endpoint: EndpointConfig::new("http://127.0.0.1/v1"),
                model_id: "none".into(),
                classify_max_tokens: 1,
                rationale_max_tokens: 1,
                templates_dir: None,
                prompting: vec![],
                attribution: vec![],
                baselines: vec![rationale_core::runner::BaselineRow::Random],
                top_ratio: None,
                scopes: vec![MaskScope::Input],
                seeds: 100,
                faithfulness_seeds: 1,
                k_sweep: vec![],
                concurrency: 1,
                cache_dir: None,
                out_dir: PathBuf::from("out"),
                offline: true,
                match_mode: Default::default(),
                aggregation: Default::default(),
                mask_style: Default::default(),
            }
        }
    };
    if let Some(d) = args.dataset {
        cfg.dataset.path = d;
    }
    if let Some(s) = args.seeds {
        cfg.seeds = s;
    }
    if let Some(o) = args.out {
        cfg.out_dir = o;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Align(args) => {
            let cfg = load(&args.config, args.overrides)?;
            let out = cfg.out_dir.clone();
            let exp = Experiment::prepare(cfg)?;
            let client = exp.client()?;
            finish(exp.alignment(&client)?, &out)
        }
        Command::Faithfulness(args) => {
            let cfg = load(&args.config, args.overrides)?;
            let out = cfg.out_dir.clone();
            let exp = Experiment::prepare(cfg)?;
            let client = exp.client()?;
            finish(exp.faithfulness(&client)?, &out)
        }
        Command::Baseline(args) => {
            let cfg = baseline_config(args)?;
            let out = cfg.out_dir.clone();
            finish(Experiment::prepare(cfg)?.baseline()?, &out)
        }
        Command::Report(args) => {
            let report = read_report(&args.input)?;
            let out = args
                .out
                .or_else(|| args.input.parent().map(Path::to_path_buf))
                .unwrap_or_else(|| PathBuf::from("."));
            emit_report(&report, None, &out, &[Format::Csv, Format::Markdown])?;
            summarize(&report);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
