use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use commander_core::backends::CacheStore;
use commander_core::config::{ConfigError, RunConfig};
use commander_core::datasets::{
    load_samples, split_stats, DatasetError, DatasetManifest, LoadOptions, SplitExpectation,
};
use commander_core::evaluation::{
    import_predictions, metrics, render_case_table, render_results_table, score, write_predictions, EvalError,
    ResultRow,
};
use commander_core::experiment::{run_ablation_suite, run_experiment, ExperimentError, ExperimentRun};

#[derive(Parser)]
#[command(
    name = "commander",
    version,
    about = "Routed sub-task pipeline for multimodal sarcasm detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline over a dataset and write reports.
    Run(RunArgs),
    /// Score one or more prediction files against a dataset's gold labels.
    Eval(EvalArgs),
    /// Run the standard seven-row ablation suite.
    Ablate(RunArgs),
    /// Print split statistics, optionally checked against a published table.
    Stats(StatsArgs),
    /// Per-sample correct/incorrect grid across prediction files.
    CaseTable(CaseTableArgs),
    /// Inspect or clear the response cache.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
    /// Check a configuration (and optionally a dataset) without calling models.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        lazy_images: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Keep only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
    /// Drop images and image sub-tasks.
    #[arg(long)]
    text_only: bool,
    /// Do not check image files at load time.
    #[arg(long)]
    lazy_images: bool,
    /// Override the configured worker limit.
    #[arg(long)]
    workers: Option<usize>,
    /// Directory image paths are relative to (default: the dataset's).
    #[arg(long)]
    image_root: Option<PathBuf>,
    /// Override the configured response cache directory.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// `name=path` or a bare path (named by file stem); repeatable.
    #[arg(long = "predictions", required = true)]
    predictions: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    validation: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// `mmsd` or `mmsd2`.
    #[arg(long)]
    expect: Option<String>,
    #[arg(long)]
    lazy_images: bool,
}

#[derive(Args)]
struct CaseTableArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// `name=path`; repeatable.
    #[arg(long = "run", required = true)]
    runs: Vec<String>,
    /// Comma-separated sample ids (default: every labelled sample).
    #[arg(long, value_delimiter = ',')]
    ids: Vec<String>,
}

#[derive(Subcommand)]
enum CacheAction {
    Info(CacheArgs),
    Clear(CacheArgs),
}

#[derive(Args)]
struct CacheArgs {
    #[arg(long, conflicts_with = "config")]
    dir: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

enum CliError {
    Usage(String),
    Config(String),
    Dataset(String),
    Exhausted(String),
    Internal(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Config(_) => 2,
            CliError::Dataset(_) => 3,
            CliError::Exhausted(_) => 4,
            CliError::Internal(_) => 5,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, msg) = match self {
            CliError::Usage(m) => ("usage error", m),
            CliError::Config(m) => ("configuration error", m),
            CliError::Dataset(m) => ("dataset error", m),
            CliError::Exhausted(m) => ("backend exhausted", m),
            CliError::Internal(m) => ("internal error", m),
        };
        write!(f, "{kind}: {msg}")
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Dataset(e.to_string())
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(c) => c.into(),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io { .. } => CliError::Internal(e.to_string()),
            _ => CliError::Dataset(e.to_string()),
        }
    }
}

fn internal(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Internal(format!("{}: {e}", path.display()))
}

fn load_dataset(path: &Path, image_root: Option<&Path>, lazy: bool) -> Result<DatasetManifest, CliError> {
    Ok(load_samples(path, image_root, LoadOptions { lazy_images: lazy })?)
}

fn prepare(args: &RunArgs) -> Result<(DatasetManifest, RunConfig), CliError> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(w) = args.workers {
        config.workers = w;
    }
    if args.text_only {
        config.text_only = true;
    }
    if let Some(dir) = &args.cache_dir {
        config.cache_dir = Some(dir.clone());
    }
    config.validate()?;
    let mut manifest = load_dataset(&args.dataset, args.image_root.as_deref(), args.lazy_images)?;
    if let Some(n) = args.limit {
        manifest.samples.truncate(n);
    }
    Ok((manifest, config))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    let file = fs::File::create(path).map_err(internal(path))?;
    let mut out = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| CliError::Internal(e.to_string()))?;
        writeln!(out, "{line}").map_err(internal(path))?;
    }
    out.flush().map_err(internal(path))
}

#[derive(Serialize)]
struct RunMeta {
    wall_clock_ms: u64,
    underlying_invocations: u64,
    workers: usize,
    cache_dir: Option<PathBuf>,
}

fn write_run(dir: &Path, run: &ExperimentRun, config: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(internal(dir))?;
    let report = &run.report;
    let put = |name: &str, body: String| {
        let path = dir.join(name);
        fs::write(&path, body).map_err(internal(&path))
    };
    put("report.json", report.to_json())?;
    put("report.md", report.render_markdown())?;
    write_predictions(&dir.join("predictions.jsonl"), &report.predictions)?;
    write_jsonl(&dir.join("calls.jsonl"), &run.calls)?;
    write_jsonl(&dir.join("plans.jsonl"), &run.plans)?;
    let meta = RunMeta {
        wall_clock_ms: report.wall_clock_ms,
        underlying_invocations: run.underlying_invocations,
        workers: config.workers,
        cache_dir: config.cache_dir.clone(),
    };
    let mut json = serde_json::to_string_pretty(&meta).map_err(|e| CliError::Internal(e.to_string()))?;
    json.push('\n');
    put("run_meta.json", json)
}

fn exhausted(runs: &[&ExperimentRun]) -> Result<(), CliError> {
    let failed: Vec<&str> = runs
        .iter()
        .flat_map(|r| r.report.failures.iter())
        .filter(|f| f.cause == "backend_exhausted")
        .map(|f| f.sample_id.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Exhausted(format!(
            "{} sample(s) failed after retries; reports were written (first: {})",
            failed.len(),
            failed[0]
        )))
    }
}

fn cmd_run(args: &RunArgs) -> Result<(), CliError> {
    let (manifest, config) = prepare(args)?;
    let run = run_experiment(&manifest, &config)?;
    write_run(&args.out, &run, &config)?;
    let m = &run.report.metrics;
    println!(
        "{}: {} samples, f1 {:.1} acc {:.1} pre {:.1} rec {:.1} -> {}",
        run.report.label,
        run.report.n_samples,
        m.f1,
        m.acc,
        m.precision,
        m.recall,
        args.out.display()
    );
    exhausted(&[&run])
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    label: String,
    dir: String,
    config_digest: &'a str,
    metrics: &'a commander_core::evaluation::MetricsReport,
    call_counts: &'a commander_core::dispatch::CallCounts,
}

fn cmd_ablate(args: &RunArgs) -> Result<(), CliError> {
    let (manifest, config) = prepare(args)?;
    let suite = run_ablation_suite(&manifest, &config)?;
    fs::create_dir_all(&args.out).map_err(internal(&args.out))?;
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for (ablation, run) in &suite {
        write_run(
            &args.out.join(ablation.slug()),
            run,
            &config.with_ablation(ablation.disabled.clone()),
        )?;
        rows.push(ResultRow::new(
            manifest.name.clone(),
            ablation.label(),
            run.report.metrics,
        ));
        summary.push(SummaryRow {
            label: ablation.label(),
            dir: ablation.slug(),
            config_digest: &run.report.config_digest,
            metrics: &run.report.metrics,
            call_counts: &run.report.call_counts,
        });
    }
    let table = render_results_table(&rows);
    let md_path = args.out.join("summary.md");
    fs::write(&md_path, &table).map_err(internal(&md_path))?;
    let json_path = args.out.join("summary.json");
    let mut json = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Internal(e.to_string()))?;
    json.push('\n');
    fs::write(&json_path, json).map_err(internal(&json_path))?;
    print!("{table}");
    let runs: Vec<&ExperimentRun> = suite.iter().map(|(_, r)| r).collect();
    exhausted(&runs)
}

fn named(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((name, path)) if !name.is_empty() => (name.to_string(), PathBuf::from(path)),
        _ => {
            let path = PathBuf::from(spec);
            let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or(spec).to_string();
            (name, path)
        }
    }
}

fn golds_of(manifest: &DatasetManifest) -> BTreeMap<String, commander_core::sample::Label> {
    manifest
        .samples
        .iter()
        .filter_map(|s| s.gold.map(|g| (s.id.clone(), g)))
        .collect()
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let manifest = load_dataset(&args.dataset, None, true)?;
    let golds = golds_of(&manifest);
    let mut rows = Vec::new();
    for spec in &args.predictions {
        let (name, path) = named(spec);
        let preds = import_predictions(&path)?;
        let counts = score(&preds, &golds)?;
        rows.push(ResultRow::new(manifest.name.clone(), name, metrics(&counts)));
    }
    let table = render_results_table(&rows);
    if let Some(out) = &args.out {
        fs::create_dir_all(out).map_err(internal(out))?;
        let path = out.join("eval.md");
        fs::write(&path, &table).map_err(internal(&path))?;
    }
    print!("{table}");
    Ok(())
}

fn cmd_stats(args: &StatsArgs) -> Result<(), CliError> {
    let load = |p: &Path| load_dataset(p, None, args.lazy_images);
    let stats = split_stats(&load(&args.train)?, &load(&args.validation)?, &load(&args.test)?);
    println!(
        "{}",
        serde_json::to_string_pretty(&stats).map_err(|e| CliError::Internal(e.to_string()))?
    );
    if let Some(name) = &args.expect {
        let expectation = SplitExpectation::by_name(name)
            .ok_or_else(|| CliError::Usage(format!("unknown expectation `{name}` (use mmsd or mmsd2)")))?;
        expectation
            .check(&stats)
            .map_err(|e| CliError::Dataset(e.to_string()))?;
        println!("{} expectation: ok", expectation.name);
    }
    Ok(())
}

fn cmd_case_table(args: &CaseTableArgs) -> Result<(), CliError> {
    let manifest = load_dataset(&args.dataset, None, true)?;
    let golds = golds_of(&manifest);
    let mut runs = Vec::new();
    for spec in &args.runs {
        let (name, path) = named(spec);
        runs.push((name, import_predictions(&path)?));
    }
    let ids: Vec<String> = if args.ids.is_empty() {
        manifest
            .samples
            .iter()
            .filter(|s| s.gold.is_some())
            .map(|s| s.id.clone())
            .collect()
    } else {
        args.ids.clone()
    };
    print!("{}", render_case_table(&runs, &golds, &ids)?);
    Ok(())
}

fn cache_store(args: &CacheArgs) -> Result<CacheStore, CliError> {
    let dir = match (&args.dir, &args.config) {
        (Some(d), _) => d.clone(),
        (None, Some(c)) => RunConfig::load(c)?
            .cache_dir
            .ok_or_else(|| CliError::Config(format!("{} sets no cache_dir", c.display())))?,
        (None, None) => return Err(CliError::Usage("pass --dir or --config".into())),
    };
    CacheStore::open(&dir).map_err(|e| CliError::Internal(e.to_string()))
}

fn cmd_cache(action: &CacheAction) -> Result<(), CliError> {
    match action {
        CacheAction::Info(args) => {
            let store = cache_store(args)?;
            let n = store.len().map_err(|e| CliError::Internal(e.to_string()))?;
            println!("{}: {n} entries", store.dir().display());
        }
        CacheAction::Clear(args) => {
            let store = cache_store(args)?;
            let n = store.clear().map_err(|e| CliError::Internal(e.to_string()))?;
            println!("{}: removed {n} entries", store.dir().display());
        }
    }
    Ok(())
}

fn cmd_validate(config: &Path, dataset: Option<&Path>, lazy: bool) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    println!("config ok, digest {}", cfg.digest());
    if let Some(path) = dataset {
        let m = load_dataset(path, None, lazy)?;
        println!("dataset ok, {} samples ({})", m.samples.len(), m.split);
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Stats(args) => cmd_stats(args),
        Command::CaseTable(args) => cmd_case_table(args),
        Command::Cache { action } => cmd_cache(action),
        Command::Validate {
            config,
            dataset,
            lazy_images,
        } => cmd_validate(config, dataset.as_deref(), *lazy_images),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = std::panic::catch_unwind(|| dispatch(cli))
        .unwrap_or_else(|_| Err(CliError::Internal("unexpected panic".into())));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("commander: {e}");
            ExitCode::from(e.code())
        }
    }
}
