//! `nerp`: prior-gap correction of classifier predictions over embedding bundles.
//!
//! Exit codes: 0 on success, 1 on usage or validation errors, 2 on runtime
//! failures such as i/o. Every JSON output carries `schema_version` and is
//! written atomically.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use nerp_core::calibration::{
    grid_search, prepare_fold, CalibrationConfig, CalibrationReport, GridAxis, Objective,
};
use nerp_core::corrector::{batch_correct, summarize, CorrectionOutcome, CorrectionSummary, GateConfig};
use nerp_core::graph::{build_knn_graph, load_edge_list, ConfusionGraph, EdgeListFile};
use nerp_core::margins::{estimate_margin_stats, intercept_for_split};
use nerp_core::priors::{priors_for_bundle, GapMode, PriorSet};
use nerp_core::simulator::pipeline::{calibrate_world, emit_bundles};
use nerp_core::simulator::{generate_world, run_theory_suite, SyntheticModelConfig};
use nerp_core::store::{load_bundle, BundleView, DatasetSplit, DomainBundle};
use nerp_core::SCHEMA_VERSION;

#[derive(Parser, Debug)]
#[command(name = "nerp", version, about = "Neutral-reference prior probing and gated flip correction")]
struct Cli {
    /// Log verbosity.
    #[arg(long, value_enum, default_value_t = LogLevel::Warn, global = true)]
    log_level: LogLevel,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LogLevel {
    Error,
    Warn,
    Info,
    Debug,
    Trace,
}

impl LogLevel {
    fn filter(self) -> log::LevelFilter {
        match self {
            LogLevel::Error => log::LevelFilter::Error,
            LogLevel::Warn => log::LevelFilter::Warn,
            LogLevel::Info => log::LevelFilter::Info,
            LogLevel::Debug => log::LevelFilter::Debug,
            LogLevel::Trace => log::LevelFilter::Trace,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Plain,
    Residual,
}

impl From<ModeArg> for GapMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Plain => GapMode::Plain,
            ModeArg::Residual => GapMode::Residual,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Text and image prior tables and composite gaps on graph edges.
    Priors(PriorsArgs),
    /// Margin means and variances on graph edges, plus the intercept given a split.
    Margins(MarginsArgs),
    /// Applies the gated flip rule to every sample of a bundle.
    Correct(CorrectArgs),
    /// Selects gates by grid search over calibration folds.
    Calibrate(CalibrateArgs),
    /// Generates a synthetic world and runs the theory checks on it.
    Simulate(SimulateArgs),
    /// Builds a confusable-pairs graph from zero-shot prototype similarity.
    GraphKnn(GraphKnnArgs),
    /// Summarizes a correction outcomes file.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct PriorsArgs {
    /// Bundle directory or its `bundle.json` manifest.
    #[arg(long)]
    bundle: PathBuf,
    /// Edge list: `[[i, j], ..]` of indices or class names, optionally wrapped in `{"edges": ..}`.
    #[arg(long)]
    graph: PathBuf,
    /// `plain` priors, or `residual` priors that keep only the fine-tuning displacement.
    #[arg(long, value_enum, default_value_t = ModeArg::Plain)]
    mode: ModeArg,
    /// Output JSON file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MarginsArgs {
    /// Bundle directory or its `bundle.json` manifest.
    #[arg(long)]
    bundle: PathBuf,
    /// Edge list: `[[i, j], ..]` of indices or class names, optionally wrapped in `{"edges": ..}`.
    #[arg(long)]
    graph: PathBuf,
    /// Base/novel split; enables the intercept fit over base edges.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Gap mode used for the intercept.
    #[arg(long, value_enum, default_value_t = ModeArg::Plain)]
    mode: ModeArg,
    /// Output JSON file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CorrectArgs {
    /// Bundle directory or its `bundle.json` manifest.
    #[arg(long)]
    bundle: PathBuf,
    /// Edge list: `[[i, j], ..]` of indices or class names, optionally wrapped in `{"edges": ..}`.
    #[arg(long)]
    graph: PathBuf,
    /// Output of `nerp priors`.
    #[arg(long)]
    priors: PathBuf,
    /// JSON `{"tau_eff": .., "delta": ..}`, e.g. the output of `nerp calibrate`.
    #[arg(long)]
    gates: PathBuf,
    /// Output JSON file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    /// Directory of `fold_<k>` subdirectories, each holding a bundle and a
    /// `split.json` whose novel classes are the pseudo-target.
    #[arg(long)]
    folds: PathBuf,
    /// Edge list shared by all folds; defaults to each fold's `edges.json`.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// `min,max,step`; defaults to the 1st-99th percentile of observed gaps.
    #[arg(long)]
    grid_tau: Option<String>,
    /// `min,max,step`; defaults to the 1st-99th percentile of observed margins.
    #[arg(long)]
    grid_delta: Option<String>,
    /// Step of default axes.
    #[arg(long, default_value_t = nerp_core::calibration::DEFAULT_STEP)]
    step: f64,
    /// `net` or `cap:<fer>`.
    #[arg(long, default_value = "net")]
    objective: String,
    /// `plain` priors, or `residual` priors that keep only the fine-tuning displacement.
    #[arg(long, value_enum, default_value_t = ModeArg::Plain)]
    mode: ModeArg,
    /// Margin by which a flipped neighbor overtakes the original prediction.
    #[arg(long, default_value_t = nerp_core::corrector::DEFAULT_EPSILON0)]
    epsilon0: f64,
    /// Gates file.
    #[arg(long)]
    out: PathBuf,
    /// Full report with the grid surface; printed to stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// JSON synthetic-model config; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Theory report.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Writes the world and its calibration fold worlds as bundles.
    #[arg(long)]
    emit_bundles: Option<PathBuf>,
    /// Calibration folds for `--emit-bundles`.
    #[arg(long, default_value_t = 5)]
    n_folds: usize,
}

#[derive(Args, Debug)]
struct GraphKnnArgs {
    /// Bundle directory or its `bundle.json` manifest.
    #[arg(long)]
    bundle: PathBuf,
    /// Neighbors per class before symmetrization.
    #[arg(long)]
    k: usize,
    /// Output JSON file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Output of `nerp correct`.
    #[arg(long)]
    outcomes: PathBuf,
    /// Calibration report to summarize alongside.
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// JSON summary.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Bad arguments or inputs; maps to exit code 1.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Invalid(msg.into()))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Invalid>() || cause.is::<serde_json::Error>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<nerp_core::Error>() {
            return if e.is_validation() { 1 } else { 2 };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .filter_level(cli.log_level.filter())
        .parse_env("NERP_LOG")
        .init();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(exit_code(&e));
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("NERP_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| invalid(format!("NERP_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Priors(a) => priors(a),
        Command::Margins(a) => margins(a),
        Command::Correct(a) => correct(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Simulate(a) => simulate(a),
        Command::GraphKnn(a) => graph_knn(a),
        Command::Report(a) => report(a),
    }
}

/// Fails before any computation when an input path is missing.
fn require(paths: &[&Path]) -> Result<()> {
    for p in paths {
        if !p.exists() {
            return Err(invalid(format!("input not found: {}", p.display())));
        }
    }
    Ok(())
}

fn open_bundle(path: &Path) -> nerp_core::error::Result<DomainBundle> {
    let bundle = load_bundle(path)?;
    log::info!(
        "loaded bundle {:?}: {} classes, {} samples, dim {}",
        bundle.domain_id,
        bundle.n_classes(),
        bundle.n_samples(),
        bundle.dim()
    );
    Ok(bundle)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

/// Serializes `value` and writes it through a temp file in the target directory.
fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating a temp file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| anyhow!(e.error)).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

/// Adds `schema_version` at the top level of a serialized object.
fn versioned<T: Serialize>(value: &T) -> Result<Value> {
    let mut v = serde_json::to_value(value)?;
    match v.as_object_mut() {
        Some(obj) => {
            obj.insert("schema_version".into(), json!(SCHEMA_VERSION));
            Ok(v)
        }
        None => Ok(json!({ "schema_version": SCHEMA_VERSION, "data": v })),
    }
}

fn load_graph(path: &Path, bundle: &DomainBundle) -> Result<ConfusionGraph> {
    Ok(load_edge_list(path, bundle.n_classes(), Some(&bundle.class_names))?)
}

fn load_split(path: &Path, n_classes: usize) -> Result<DatasetSplit> {
    let split = DatasetSplit::load(path)?;
    split.validate(n_classes)?;
    Ok(split)
}

fn priors(a: PriorsArgs) -> Result<()> {
    require(&[&a.bundle, &a.graph])?;
    let bundle = open_bundle(&a.bundle)?;
    let graph = load_graph(&a.graph, &bundle)?;
    let set = priors_for_bundle(&bundle, &graph, a.mode.into())?;
    write_json(&a.out, &versioned(&set)?)
}

fn margins(a: MarginsArgs) -> Result<()> {
    let mut inputs = vec![a.bundle.as_path(), a.graph.as_path()];
    inputs.extend(a.split.as_deref());
    require(&inputs)?;
    let bundle = open_bundle(&a.bundle)?;
    let graph = load_graph(&a.graph, &bundle)?;
    let split = a.split.as_deref().map(|p| load_split(p, bundle.n_classes())).transpose()?;
    let stats = estimate_margin_stats(&bundle.features, &bundle.prototypes_ft, &graph, None)?;
    let mut out = versioned(&stats)?;
    if let Some(split) = split {
        let gaps = priors_for_bundle(&bundle, &graph, a.mode.into())?.gaps;
        let intercept = intercept_for_split(&stats, &gaps, &graph, &split.base_classes)?;
        out["intercept"] = serde_json::to_value(intercept)?;
    }
    write_json(&a.out, &out)
}

/// Outcomes file written by `correct` and read by `report`.
#[derive(Debug, Serialize, Deserialize)]
struct OutcomesFile {
    schema_version: u32,
    gates: GateConfig,
    summary: CorrectionSummary,
    #[serde(default)]
    class_names: Vec<String>,
    #[serde(default)]
    labels: Option<Vec<usize>>,
    outcomes: Vec<CorrectionOutcome>,
}

fn correct(a: CorrectArgs) -> Result<()> {
    require(&[&a.bundle, &a.graph, &a.priors, &a.gates])?;
    let bundle = open_bundle(&a.bundle)?;
    let graph = load_graph(&a.graph, &bundle)?;
    let priors: PriorSet = read_json(&a.priors)?;
    let gates: GateConfig = read_json(&a.gates)?;
    gates.validate()?;
    if priors.text.n_classes() != bundle.n_classes() {
        return Err(invalid(format!(
            "priors cover {} classes, bundle has {}",
            priors.text.n_classes(),
            bundle.n_classes()
        )));
    }
    let batch = batch_correct(&bundle, &priors.gaps, &graph, &gates)?;
    let file = OutcomesFile {
        schema_version: SCHEMA_VERSION,
        gates,
        summary: batch.summary,
        class_names: bundle.class_names.clone(),
        labels: batch.labels,
        outcomes: batch.outcomes,
    };
    write_json(&a.out, &file)
}

/// `fold_<k>` subdirectories of `dir`, ordered by `k`.
fn fold_dirs(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let entries = std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry?;
        let name = entry.file_name();
        let Some(k) = name.to_str().and_then(|n| n.strip_prefix("fold_")).and_then(|k| k.parse().ok()) else {
            continue;
        };
        if entry.path().is_dir() {
            out.push((k, entry.path()));
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(invalid(format!("no fold_<k> directories in {}", dir.display())));
    }
    Ok(out)
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let mut inputs = vec![a.folds.as_path()];
    inputs.extend(a.graph.as_deref());
    require(&inputs)?;
    let objective: Objective = a.objective.parse().map_err(|e| invalid(format!("--objective: {e}")))?;
    let axis = |s: &Option<String>, flag: &str| -> Result<Option<GridAxis>> {
        s.as_deref()
            .map(GridAxis::parse)
            .transpose()
            .map_err(|e| invalid(format!("{flag}: {e}")))
    };
    let dirs = fold_dirs(&a.folds)?;
    for (_, d) in &dirs {
        require(&[&d.join("split.json")])?;
        if a.graph.is_none() {
            require(&[&d.join("edges.json")])?;
        }
    }
    let config = CalibrationConfig {
        n_folds: dirs.len().max(2),
        grid_tau: axis(&a.grid_tau, "--grid-tau")?,
        grid_delta: axis(&a.grid_delta, "--grid-delta")?,
        default_step: a.step,
        objective,
        epsilon0: a.epsilon0,
        ..Default::default()
    };
    config.validate()?;

    let mut records = Vec::with_capacity(dirs.len());
    for (k, dir) in &dirs {
        let bundle = open_bundle(dir)?;
        let split = load_split(&dir.join("split.json"), bundle.n_classes())?;
        let graph_path = a.graph.clone().unwrap_or_else(|| dir.join("edges.json"));
        let graph = load_graph(&graph_path, &bundle)?;
        let gaps = priors_for_bundle(&bundle, &graph, a.mode.into())?.gaps;
        let view = BundleView::restricted(&bundle, &split.novel_classes)?;
        records.push(prepare_fold(*k, &view, &gaps, &graph)?);
    }
    let report = grid_search(&records, &config)?;
    log::info!(
        "selected tau_eff = {}, delta = {} (objective {}, mean FER {:.4}, {} folds)",
        report.best_tau_eff,
        report.best_delta,
        report.best_objective,
        report.best_fer,
        report.n_folds
    );
    write_json(&a.out, &report.gates(a.epsilon0))?;
    match &a.report {
        Some(p) => write_json(p, &report),
        None => {
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}

fn simulate(a: SimulateArgs) -> Result<()> {
    if let Some(c) = &a.config {
        require(&[c])?;
    }
    if a.out.is_none() && a.emit_bundles.is_none() {
        return Err(invalid("nothing to do: pass --out and/or --emit-bundles"));
    }
    let config: SyntheticModelConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SyntheticModelConfig::default(),
    };
    config.validate()?;
    if let Some(out) = &a.out {
        let report = run_theory_suite(&config)?;
        if report.all_checks_pass {
            log::info!("all theory checks pass (seed {})", config.seed);
        } else {
            log::warn!("some theory checks fail (seed {}); see {}", config.seed, out.display());
        }
        write_json(out, &report)?;
    }
    if let Some(dir) = &a.emit_bundles {
        let world = generate_world(&config)?;
        let cal = CalibrationConfig {
            n_folds: a.n_folds,
            ..Default::default()
        };
        cal.validate()?;
        let (folds, _) = calibrate_world(&world, &cal)?;
        emit_bundles(&world, &folds, dir)?;
    }
    Ok(())
}

fn graph_knn(a: GraphKnnArgs) -> Result<()> {
    require(&[&a.bundle])?;
    let bundle = open_bundle(&a.bundle)?;
    let graph = build_knn_graph(&bundle.prototypes_zs, a.k)?;
    write_json(&a.out, &EdgeListFile::new(&graph))
}

#[derive(Debug, Serialize)]
struct PairFlips {
    from: usize,
    to: usize,
    from_name: Option<String>,
    to_name: Option<String>,
    flips: usize,
    wrong: Option<usize>,
}

#[derive(Debug, Serialize)]
struct ReportFile {
    schema_version: u32,
    summary: CorrectionSummary,
    per_pair: Vec<PairFlips>,
    #[serde(skip_serializing_if = "Option::is_none")]
    calibration: Option<CalibrationReport>,
}

fn pct(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a (unlabeled)".into(), |v| format!("{:.2}%", 100.0 * v))
}

fn report(a: ReportArgs) -> Result<()> {
    let mut inputs = vec![a.outcomes.as_path()];
    inputs.extend(a.calibration.as_deref());
    require(&inputs)?;
    let file: OutcomesFile = read_json(&a.outcomes)?;
    let calibration: Option<CalibrationReport> = a.calibration.as_deref().map(read_json).transpose()?;
    if let Some(l) = &file.labels {
        if l.len() != file.outcomes.len() {
            return Err(invalid("labels and outcomes differ in length"));
        }
    }
    // Recomputed from the raw outcomes rather than trusted from the file.
    let summary = summarize(&file.outcomes, file.labels.as_deref());
    let mut pairs: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
    for (k, o) in file.outcomes.iter().enumerate() {
        if o.flipped {
            let e = pairs.entry((o.original_top1, o.corrected_top1)).or_default();
            e.0 += 1;
            if file.labels.as_ref().is_some_and(|l| l[k] != o.corrected_top1) {
                e.1 += 1;
            }
        }
    }
    let name = |c: usize| file.class_names.get(c).cloned();
    let per_pair: Vec<PairFlips> = pairs
        .into_iter()
        .map(|((from, to), (flips, wrong))| PairFlips {
            from,
            to,
            from_name: name(from),
            to_name: name(to),
            flips,
            wrong: file.labels.is_some().then_some(wrong),
        })
        .collect();

    let mut text = String::new();
    writeln!(text, "samples:          {}", summary.n_samples)?;
    writeln!(text, "accuracy before:  {}", pct(summary.accuracy_before))?;
    writeln!(text, "accuracy after:   {}", pct(summary.accuracy_after))?;
    writeln!(text, "flips:            {}", summary.flips)?;
    let fer = if summary.flips == 0 {
        "n/a (0 flips)".to_string()
    } else {
        pct(summary.flip_error_rate)
    };
    writeln!(text, "flip error rate:  {fer}")?;
    if !per_pair.is_empty() {
        writeln!(text, "flips per pair:")?;
        for p in &per_pair {
            let label = |c: usize, n: &Option<String>| n.clone().unwrap_or_else(|| c.to_string());
            let wrong = p.wrong.map_or(String::new(), |w| format!(" ({w} wrong)"));
            writeln!(text, "  {} -> {}: {}{wrong}", label(p.from, &p.from_name), label(p.to, &p.to_name), p.flips)?;
        }
    }
    if let Some(c) = &calibration {
        writeln!(
            text,
            "calibrated gates: tau_eff = {}, delta = {} (objective {:.4}, mean FER {:.2}%, {} folds)",
            c.best_tau_eff,
            c.best_delta,
            c.best_objective,
            100.0 * c.best_fer,
            c.n_folds
        )?;
    }
    print!("{text}");
    if let Some(out) = &a.out {
        write_json(
            out,
            &ReportFile {
                schema_version: SCHEMA_VERSION,
                summary,
                per_pair,
                calibration,
            },
        )?;
    }
    Ok(())
}
