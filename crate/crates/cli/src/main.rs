//! `ecgpd`: pipeline driver for LEF detection from ECG-diagnosis probability
//! vectors. Subcommands cover ingestion, outcome labeling, single-predictor
//! scoring, tabular training, evaluation, SHAP explanation, the
//! predictor-count sweep, subgroup reports, clinical-note extraction,
//! derived baseline features, and synthetic data generation.
//!
//! Every run writes a `manifest.json` with the resolved-config hash and one
//! checksum per artifact; identical configuration and inputs reproduce
//! identical bytes. Exit codes: 0 success, 2 usage/validation error
//! (machine-readable JSON on stderr), 3 I/O error.

mod manifest;

use clap::{Args, Parser, Subcommand};
use ecgpd_core::cohort::{self, CohortTable, Split};
use ecgpd_core::explain;
use ecgpd_core::features;
use ecgpd_core::metrics::{self, MetricSpec};
use ecgpd_core::notes;
use ecgpd_core::predictors::{self, PredictorCatalog, PredictorMatrix};
use ecgpd_core::single_predictor::{self, ThresholdObjective};
use ecgpd_core::subgroups;
use ecgpd_core::synth;
use ecgpd_core::tabular::{self, Dataset, GridCell, ModelFamily, SelectionMetric, TrainConfig};
use manifest::{config_hash, ManifestBuilder};
use serde::Serialize;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ecgpd", version, about = "LEF detection pipeline over ECG diagnosis probabilities")]
struct Cli {
    /// Worker threads for data-parallel stages (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Key = value configuration file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate predictor and cohort files and summarize the cohort.
    Ingest(IngestArgs),
    /// Apply the outcome rule to echo and ECG event lists.
    Label(LabelArgs),
    /// Single-predictor thresholds, metrics, and F1 ranking.
    Single(SingleArgs),
    /// Train a tabular model with grid search and early stopping.
    Train(TrainArgs),
    /// Evaluate a trained model on one split.
    Evaluate(EvaluateArgs),
    /// SHAP attributions and plot-ready explanation tables.
    Explain(ExplainArgs),
    /// Performance as predictors are added in ranked order.
    Sweep(SweepArgs),
    /// Per-stratum metrics under the frozen decision threshold.
    Subgroup(SubgroupArgs),
    /// Gate, extract, and label EF mentions in clinical notes.
    Notes(NotesArgs),
    /// Derive baseline tabular features from machine measurements.
    Features(FeaturesArgs),
    /// Generate a seeded synthetic cohort with known ground truth.
    Synth(SynthArgs),
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).ok_or_else(|| {
        format!("unknown split '{s}' (train|validation|internal_test|external_test)")
    })
}

fn parse_family(s: &str) -> Result<ModelFamily, String> {
    match s {
        "logistic" => Ok(ModelFamily::Logistic),
        "gbdt" => Ok(ModelFamily::Gbdt),
        _ => Err(format!("unknown family '{s}' (logistic|gbdt)")),
    }
}

fn parse_selection_metric(s: &str) -> Result<SelectionMetric, String> {
    match s {
        "auroc" => Ok(SelectionMetric::Auroc),
        "logloss" => Ok(SelectionMetric::LogLoss),
        "auprc" => Ok(SelectionMetric::Auprc),
        _ => Err(format!("unknown selection metric '{s}' (auroc|logloss|auprc)")),
    }
}

#[derive(Args, Serialize)]
struct IngestArgs {
    #[arg(long)]
    #[serde(skip_serializing)]
    predictors: PathBuf,
    #[arg(long)]
    #[serde(skip_serializing)]
    cohort: PathBuf,
    #[arg(long)]
    #[serde(skip_serializing)]
    echo_findings: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing)]
    catalog: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct LabelArgs {
    /// CSV: patient_id,echo_time,ef_percent
    #[arg(long)]
    #[serde(skip_serializing)]
    echo_events: PathBuf,
    /// CSV: patient_id,record_id,ecg_time
    #[arg(long)]
    #[serde(skip_serializing)]
    ecg_events: PathBuf,
    #[arg(long)]
    window_days: Option<i64>,
    #[arg(long)]
    #[serde(skip_serializing)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct SingleArgs {
    #[arg(long)]
    #[serde(skip_serializing)]
    predictors: PathBuf,
    #[arg(long)]
    #[serde(skip_serializing)]
    cohort: PathBuf,
    #[arg(long)]
    #[serde(skip_serializing)]
    catalog: Option<PathBuf>,
    #[arg(long, value_parser = parse_split, default_value = "validation")]
    selection_split: Split,
    #[arg(long, value_parser = parse_split, default_value = "internal_test")]
    eval_split: Split,
    /// Comma-separated codes; default is the whole catalog.
    #[arg(long)]
    codes: Option<String>,
    /// f1-max | recall-floor
    #[arg(long, default_value = "f1-max")]
    objective: String,
    #[arg(long)]
    min_recall: Option<f64>,
    #[arg(long)]
    resamples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    #[serde(skip_serializing)]
    predictors: PathBuf,
    #[arg(long)]
    #[serde(skip_serializing)]
    cohort: PathBuf,
    #[arg(long)]
    #[serde(skip_serializing)]
    catalog: Option<PathBuf>,
    #[arg(long, value_parser = parse_family)]
    family: ModelFamily,
    #[arg(long, value_parser = parse_split, default_value = "train")]
    train_split: Split,
    #[arg(long, value_parser = parse_split, default_value = "validation")]
    val_split: Split,
    /// Comma-separated L2 grid for the logistic family.
    #[arg(long)]
    lambda_grid: Option<String>,
    /// Comma-separated learning-rate grid for the GBDT family.
    #[arg(long)]
    lr_grid: Option<String>,
    /// Comma-separated max-depth grid for the GBDT family.
    #[arg(long)]
    depth_grid: Option<String>,
    #[arg(long)]
    n_estimators: Option<usize>,
    #[arg(long)]
    early_stopping: Option<usize>,
    #[arg(long)]
    leaf_lambda: Option<f64>,
    /// auroc | logloss | auprc
    #[arg(long)]
    selection_metric: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    #[serde(skip_serializing)]
    model: PathBuf,
    #[arg(long)]
    #[serde(skip_serializing)]
    predictors: PathBuf,
    #[arg(long)]
    #[serde(skip_serializing)]
    cohort: PathBuf,
    #[arg(long)]
    #[serde(skip_serializing)]
    catalog: Option<PathBuf>,
    #[arg(long, value_parser = parse_split, default_value = "internal_test")]
    split: Split,
    #[arg(long)]
    resamples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ExplainArgs {
    #[arg(long)]
    #[serde(skip_serializing)]
    model: PathBuf,
    #[arg(long)]
    #[serde(skip_serializing)]
    predictors: PathBuf,
    #[arg(long)]
    #[serde(skip_serializing)]
    cohort: PathBuf,
    #[arg(long)]
    #[serde(skip_serializing)]
    catalog: Option<PathBuf>,
    #[arg(long, value_parser = parse_split, default_value = "internal_test")]
    split: Split,
    #[arg(long)]
    top_n: Option<usize>,
    /// Record ids for local waterfall explanations (repeatable).
    #[arg(long)]
    record: Vec<String>,
    /// Codes for dependence tables (repeatable or comma-separated).
    #[arg(long)]
    dependence: Vec<String>,
    /// Ranking CSV (from `single`) ordering the beeswarm; default is mean
    /// absolute SHAP.
    #[arg(long)]
    #[serde(skip_serializing)]
    ranking: Option<PathBuf>,
    /// Threshold ledger (from `single`) supplying LEF reference lines.
    #[arg(long)]
    #[serde(skip_serializing)]
    thresholds: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct SweepArgs {
    #[arg(long)]
    #[serde(skip_serializing)]
    predictors: PathBuf,
    #[arg(long)]
    #[serde(skip_serializing)]
    cohort: PathBuf,
    #[arg(long)]
    #[serde(skip_serializing)]
    catalog: Option<PathBuf>,
    /// Ranking CSV from `single`.
    #[arg(long)]
    #[serde(skip_serializing)]
    ranking: PathBuf,
    #[arg(long, value_parser = parse_family)]
    family: ModelFamily,
    /// Predictor counts, e.g. "1,2,4,8,16,32,71" or "1-71".
    #[arg(long)]
    ks: String,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    n_estimators: Option<usize>,
    #[arg(long)]
    early_stopping: Option<usize>,
    #[arg(long)]
    leaf_lambda: Option<f64>,
    #[arg(long, value_parser = parse_split, default_value = "train")]
    train_split: Split,
    #[arg(long, value_parser = parse_split, default_value = "validation")]
    val_split: Split,
    #[arg(long, value_parser = parse_split, default_value = "internal_test")]
    eval_split: Split,
    #[arg(long)]
    resamples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct SubgroupArgs {
    #[arg(long)]
    #[serde(skip_serializing)]
    model: PathBuf,
    #[arg(long)]
    #[serde(skip_serializing)]
    predictors: PathBuf,
    #[arg(long)]
    #[serde(skip_serializing)]
    cohort: PathBuf,
    #[arg(long)]
    #[serde(skip_serializing)]
    catalog: Option<PathBuf>,
    #[arg(long, value_parser = parse_split, default_value = "internal_test")]
    split: Split,
    #[arg(long)]
    #[serde(skip_serializing)]
    echo_findings: Option<PathBuf>,
    /// Comma-separated dimensions (age,sex,race,context,shd,vhd).
    #[arg(long)]
    dims: Option<String>,
    #[arg(long)]
    resamples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct NotesArgs {
    /// Note JSONL: {note_id, patient_id, note_time, text}.
    #[arg(long)]
    #[serde(skip_serializing)]
    notes: PathBuf,
    /// Keyword configuration JSON overriding the default gate lists.
    #[arg(long)]
    #[serde(skip_serializing)]
    keywords: Option<PathBuf>,
    /// External extraction command: receives {"text": ...} on stdin and must
    /// print {"ef_value": <number|null>}.
    #[arg(long)]
    llm_cmd: Option<String>,
    /// CSV patient_id,record_id,ecg_time enabling pair selection.
    #[arg(long)]
    #[serde(skip_serializing)]
    ecg_events: Option<PathBuf>,
    /// CSV record_id,label for the optional consistency join.
    #[arg(long)]
    #[serde(skip_serializing)]
    cross_labels: Option<PathBuf>,
    #[arg(long)]
    window_days: Option<i64>,
    #[arg(long)]
    #[serde(skip_serializing)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct FeaturesArgs {
    /// CSV: record_id,age_years,sex,t_p_onset,t_qrs_onset,t_qrs_end,t_t_end,rr
    #[arg(long)]
    #[serde(skip_serializing)]
    measurements: PathBuf,
    #[arg(long)]
    #[serde(skip_serializing)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct SynthArgs {
    /// Total records; split 70/15/15 unless the explicit sizes are given.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    prevalence: Option<f64>,
    /// Signal spec "CODE=EFFECT,CODE=EFFECT,..."; default is one dominant
    /// code (NORM=1.5) plus five weak ones at 0.4.
    #[arg(long)]
    signal: Option<String>,
    #[arg(long)]
    noise_scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing)]
    out: PathBuf,
}

// ---------------------------------------------------------------------------

type AnyError = Box<dyn std::error::Error>;

#[derive(Debug)]
struct UsageMessage(String);

impl std::fmt::Display for UsageMessage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl std::error::Error for UsageMessage {}

fn usage_error(msg: impl Into<String>) -> AnyError {
    Box::new(UsageMessage(msg.into()))
}

/// Key = value configuration file, overridden by flags.
struct FileConfig(toml::Table);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self, AnyError> {
        match path {
            None => Ok(FileConfig(toml::Table::new())),
            Some(p) => {
                let text = fs::read_to_string(p)?;
                let table: toml::Table = text
                    .parse()
                    .map_err(|e| usage_error(format!("bad config file: {e}")))?;
                Ok(FileConfig(table))
            }
        }
    }

    fn u64(&self, key: &str) -> Option<u64> {
        self.0.get(key).and_then(|v| v.as_integer()).map(|v| v as u64)
    }

    fn usize(&self, key: &str) -> Option<usize> {
        self.0.get(key).and_then(|v| v.as_integer()).map(|v| v as usize)
    }

    fn i64(&self, key: &str) -> Option<i64> {
        self.0.get(key).and_then(|v| v.as_integer())
    }

    fn f64(&self, key: &str) -> Option<f64> {
        self.0
            .get(key)
            .and_then(|v| v.as_float().or_else(|| v.as_integer().map(|i| i as f64)))
    }

    fn string(&self, key: &str) -> Option<String> {
        self.0.get(key).and_then(|v| v.as_str()).map(|s| s.to_string())
    }
}

fn require_seed(flag: Option<u64>, cfg: &FileConfig) -> Result<u64, AnyError> {
    flag.or_else(|| cfg.u64("seed"))
        .ok_or_else(|| usage_error("--seed is required (or 'seed' in the config file)"))
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>, AnyError> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| usage_error(format!("bad number '{t}'")))
        })
        .collect()
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>, AnyError> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| usage_error(format!("bad integer '{t}'")))
        })
        .collect()
}

/// "1,2,4" plus "a-b" ranges.
fn parse_ks(s: &str) -> Result<Vec<usize>, AnyError> {
    let mut out = Vec::new();
    for token in s.split(',') {
        let token = token.trim();
        if let Some((a, b)) = token.split_once('-') {
            let a: usize = a
                .trim()
                .parse()
                .map_err(|_| usage_error(format!("bad range '{token}'")))?;
            let b: usize = b
                .trim()
                .parse()
                .map_err(|_| usage_error(format!("bad range '{token}'")))?;
            if a == 0 || a > b {
                return Err(usage_error(format!("bad range '{token}'")));
            }
            out.extend(a..=b);
        } else {
            let k: usize = token
                .parse()
                .map_err(|_| usage_error(format!("bad integer '{token}'")))?;
            out.push(k);
        }
    }
    if out.is_empty() {
        return Err(usage_error("--ks is empty"));
    }
    Ok(out)
}

fn load_catalog(path: Option<&Path>) -> Result<PredictorCatalog, AnyError> {
    Ok(match path {
        Some(p) => PredictorCatalog::load_json(p)?,
        None => PredictorCatalog::default_71(),
    })
}

fn sanitize_file_component(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn out_dir(path: &Path) -> Result<(), AnyError> {
    fs::create_dir_all(path)?;
    Ok(())
}

fn load_inputs(
    predictors: &Path,
    cohort_path: &Path,
    catalog_path: Option<&Path>,
) -> Result<(PredictorCatalog, PredictorMatrix, CohortTable), AnyError> {
    let catalog = load_catalog(catalog_path)?;
    let matrix = predictors::load_predictor_matrix(predictors, &catalog)?;
    let table = cohort::load_cohort(cohort_path)?;
    Ok((catalog, matrix, table))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter("ECGPD_LOG")).init();
    if cli.jobs > 0 {
        // ignore failure: the global pool may already exist in tests
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let is_io = error_chain_has_io(e.as_ref());
            let kind = if is_io { "io" } else { "validation" };
            let payload = serde_json::json!({ "error": e.to_string(), "kind": kind });
            eprintln!("{payload}");
            if is_io {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

/// I/O failures exit 3; everything else is a validation/usage failure (2).
fn error_chain_has_io(e: &(dyn std::error::Error + 'static)) -> bool {
    let mut cur: Option<&(dyn std::error::Error + 'static)> = Some(e);
    while let Some(err) = cur {
        if err.downcast_ref::<std::io::Error>().is_some() {
            return true;
        }
        // csv::Error does not surface its io cause through source()
        if let Some(csv_err) = err.downcast_ref::<csv::Error>() {
            if csv_err.is_io_error() {
                return true;
            }
        }
        cur = err.source();
    }
    false
}

fn run(cli: Cli) -> Result<(), AnyError> {
    let cfg = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Label(a) => cmd_label(a, &cfg),
        Command::Single(a) => cmd_single(a, &cfg),
        Command::Train(a) => cmd_train(a, &cfg),
        Command::Evaluate(a) => cmd_evaluate(a, &cfg),
        Command::Explain(a) => cmd_explain(a, &cfg),
        Command::Sweep(a) => cmd_sweep(a, &cfg),
        Command::Subgroup(a) => cmd_subgroup(a, &cfg),
        Command::Notes(a) => cmd_notes(a, &cfg),
        Command::Features(a) => cmd_features(a),
        Command::Synth(a) => cmd_synth(a, &cfg),
    }
}

// ---------------------------------------------------------------------------

fn cmd_ingest(args: IngestArgs) -> Result<(), AnyError> {
    out_dir(&args.out)?;
    let (catalog, matrix, mut table) =
        load_inputs(&args.predictors, &args.cohort, args.catalog.as_deref())?;
    // every cohort record must have a predictor row
    for r in &table.records {
        if matrix.get(&r.record_id).is_none() {
            return Err(usage_error(format!(
                "cohort record {} missing from predictor matrix",
                r.record_id
            )));
        }
    }
    let imputation = match &args.echo_findings {
        Some(p) => {
            let (findings, imputation) = cohort::load_echo_findings(p)?;
            table.echo_findings = Some(findings);
            Some(imputation)
        }
        None => None,
    };
    let summary = cohort::summarize_cohort(&table)?;

    #[derive(Serialize)]
    struct IngestSummary {
        n_records: usize,
        n_predictor_rows: usize,
        splits: Vec<cohort::SplitSummary>,
        #[serde(skip_serializing_if = "Option::is_none")]
        findings_imputation: Option<cohort::FindingsImputation>,
    }
    let out = IngestSummary {
        n_records: table.records.len(),
        n_predictor_rows: matrix.n_records(),
        splits: summary,
        findings_imputation: imputation,
    };
    fs::write(
        args.out.join("cohort_summary.json"),
        serde_json::to_string_pretty(&out)? + "\n",
    )?;

    let hash = config_hash("ingest", &args);
    let mut mb = ManifestBuilder::new(&args.out, "ingest", hash);
    mb.catalog_version(&catalog.version);
    mb.add("cohort_summary.json")?;
    mb.write()?;
    Ok(())
}

fn cmd_label(args: LabelArgs, cfg: &FileConfig) -> Result<(), AnyError> {
    out_dir(&args.out)?;
    let window_days = args.window_days.or_else(|| cfg.i64("window_days")).unwrap_or(365);

    let mut echo_reader = csv::Reader::from_path(&args.echo_events)?;
    let mut echoes = Vec::new();
    for rec in echo_reader.records() {
        let rec = rec?;
        echoes.push(cohort::EchoEvent {
            patient_id: rec[0].to_string(),
            echo_time: rec[1]
                .parse()
                .map_err(|_| usage_error(format!("bad echo_time '{}'", &rec[1])))?,
            ef_percent: rec[2]
                .parse()
                .map_err(|_| usage_error(format!("bad ef_percent '{}'", &rec[2])))?,
        });
    }
    let mut ecg_reader = csv::Reader::from_path(&args.ecg_events)?;
    let mut ecgs = Vec::new();
    for rec in ecg_reader.records() {
        let rec = rec?;
        ecgs.push(cohort::EcgEvent {
            patient_id: rec[0].to_string(),
            record_id: rec[1].to_string(),
            ecg_time: rec[2]
                .parse()
                .map_err(|_| usage_error(format!("bad ecg_time '{}'", &rec[2])))?,
        });
    }

    let outcome = cohort::assign_labels(&echoes, &ecgs, window_days)?;
    let mut w = fs::File::create(args.out.join("labels.csv"))?;
    writeln!(w, "record_id,patient_id,label,ef_percent,ecg_time,ref_time")?;
    for a in &outcome.labeled {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            a.record_id, a.patient_id, a.label as u8, a.ef_percent, a.ecg_time, a.ref_time
        )?;
    }
    drop(w);
    let mut w = fs::File::create(args.out.join("unlabeled.csv"))?;
    writeln!(w, "record_id,patient_id,ecg_time")?;
    for e in &outcome.unlabeled {
        writeln!(w, "{},{},{}", e.record_id, e.patient_id, e.ecg_time)?;
    }
    drop(w);

    #[derive(Serialize)]
    struct Resolved<'a> {
        args: &'a LabelArgs,
        window_days: i64,
    }
    let hash = config_hash("label", &Resolved { args: &args, window_days });
    let mut mb = ManifestBuilder::new(&args.out, "label", hash);
    mb.add("labels.csv")?;
    mb.add("unlabeled.csv")?;
    mb.write()?;
    Ok(())
}

fn cmd_single(args: SingleArgs, cfg: &FileConfig) -> Result<(), AnyError> {
    out_dir(&args.out)?;
    let seed = require_seed(args.seed, cfg)?;
    let resamples = args.resamples.or_else(|| cfg.usize("resamples")).unwrap_or(1000);
    let min_recall = args.min_recall.or_else(|| cfg.f64("min_recall")).unwrap_or(0.90);
    let objective = match args.objective.as_str() {
        "f1-max" => ThresholdObjective::F1Max,
        "recall-floor" => ThresholdObjective::RecallFloor,
        other => return Err(usage_error(format!("unknown objective '{other}'"))),
    };
    let (catalog, matrix, table) =
        load_inputs(&args.predictors, &args.cohort, args.catalog.as_deref())?;

    let codes: Vec<String> = match &args.codes {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
        None => catalog.codes(),
    };

    let mut reports = Vec::with_capacity(codes.len());
    let mut ledger_entries = Vec::with_capacity(codes.len() * 2);
    for code in &codes {
        let report = single_predictor::evaluate_single(
            code,
            &matrix,
            &table,
            &catalog,
            args.selection_split,
            args.eval_split,
            objective,
            min_recall,
            resamples,
            seed,
        )?;
        // the ledger always carries both threshold policies per code
        let (sel_scores, sel_labels) = single_predictor::oriented_split_scores(
            code,
            &matrix,
            &table,
            &catalog,
            args.selection_split,
        )?;
        let mut f1_choice = single_predictor::select_threshold_f1(&sel_scores, &sel_labels)?;
        f1_choice.code = Some(code.clone());
        f1_choice.selected_on = Some(args.selection_split);
        let mut recall_choice =
            single_predictor::select_threshold_recall(&sel_scores, &sel_labels, min_recall)?;
        recall_choice.code = Some(code.clone());
        recall_choice.selected_on = Some(args.selection_split);
        ledger_entries.push(single_predictor::ledger_entry(&f1_choice, &catalog)?);
        ledger_entries.push(single_predictor::ledger_entry(&recall_choice, &catalog)?);
        reports.push(report);
    }

    single_predictor::write_threshold_ledger(
        &args.out.join("thresholds.json"),
        &single_predictor::ThresholdLedger { entries: ledger_entries },
    )?;
    fs::write(
        args.out.join("single_reports.json"),
        serde_json::to_string_pretty(&reports)? + "\n",
    )?;

    let wrote_ranking = args.codes.is_none();
    if wrote_ranking {
        let ranking = single_predictor::rank_predictors(&reports, &catalog)?;
        single_predictor::write_ranking_csv(&args.out.join("ranking.csv"), &ranking)?;
    }

    #[derive(Serialize)]
    struct Resolved<'a> {
        args: &'a SingleArgs,
        seed: u64,
        resamples: usize,
        min_recall: f64,
    }
    let hash = config_hash("single", &Resolved { args: &args, seed, resamples, min_recall });
    let mut mb = ManifestBuilder::new(&args.out, "single", hash);
    mb.seed(seed).catalog_version(&catalog.version);
    mb.add("thresholds.json")?;
    mb.add("single_reports.json")?;
    if wrote_ranking {
        mb.add("ranking.csv")?;
    }
    mb.write()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn build_train_config(
    family: ModelFamily,
    seed: u64,
    lambda_grid: Option<&str>,
    lr_grid: Option<&str>,
    depth_grid: Option<&str>,
    n_estimators: Option<usize>,
    early_stopping: Option<usize>,
    leaf_lambda: Option<f64>,
    selection_metric: Option<&str>,
) -> Result<TrainConfig, AnyError> {
    let mut config = TrainConfig::new(family, seed);
    if let Some(s) = lambda_grid {
        config.lambda_grid = parse_f64_list(s)?;
    }
    if let Some(s) = lr_grid {
        config.learning_rate_grid = parse_f64_list(s)?;
    }
    if let Some(s) = depth_grid {
        config.max_depth_grid = parse_usize_list(s)?;
    }
    if let Some(n) = n_estimators {
        config.n_estimators = n;
    }
    if let Some(n) = early_stopping {
        config.early_stopping_rounds = n;
    }
    if let Some(l) = leaf_lambda {
        config.leaf_lambda = l;
    }
    if let Some(m) = selection_metric {
        config.selection_metric = parse_selection_metric(m).map_err(usage_error)?;
    }
    config.validate()?;
    Ok(config)
}

fn cmd_train(args: TrainArgs, cfg: &FileConfig) -> Result<(), AnyError> {
    out_dir(&args.out)?;
    let seed = require_seed(args.seed, cfg)?;
    let (catalog, matrix, table) =
        load_inputs(&args.predictors, &args.cohort, args.catalog.as_deref())?;
    let config = build_train_config(
        args.family,
        seed,
        args.lambda_grid.as_deref().or(cfg.string("lambda_grid").as_deref()),
        args.lr_grid.as_deref().or(cfg.string("lr_grid").as_deref()),
        args.depth_grid.as_deref().or(cfg.string("depth_grid").as_deref()),
        args.n_estimators.or_else(|| cfg.usize("n_estimators")),
        args.early_stopping.or_else(|| cfg.usize("early_stopping")),
        args.leaf_lambda.or_else(|| cfg.f64("leaf_lambda")),
        args.selection_metric.as_deref().or(cfg.string("selection_metric").as_deref()),
    )?;

    let train = Dataset::from_split(&matrix, &table, args.train_split)?;
    let val = Dataset::from_split(&matrix, &table, args.val_split)?;
    let result = tabular::grid_search(&config, &train, &val)?;
    let threshold = tabular::choose_decision_threshold(&result.model, &val, args.val_split)?;

    let mut artifact = tabular::ModelArtifact::new(result.model, &config);
    artifact.selection = Some(result.selection);
    artifact.threshold = Some(threshold);
    tabular::save_model(&args.out.join("model.json"), &artifact)?;

    #[derive(Serialize)]
    struct Resolved<'a> {
        args: &'a TrainArgs,
        config: &'a TrainConfig,
    }
    let hash = config_hash("train", &Resolved { args: &args, config: &config });
    let mut mb = ManifestBuilder::new(&args.out, "train", hash);
    mb.seed(seed).catalog_version(&catalog.version);
    mb.add("model.json")?;
    mb.write()?;
    Ok(())
}

/// Dataset restricted and ordered to the model's feature codes.
fn dataset_for_model(
    model: &tabular::TabularModel,
    matrix: &PredictorMatrix,
    table: &CohortTable,
    split: Split,
) -> Result<Dataset, AnyError> {
    let full = Dataset::from_split(matrix, table, split)?;
    let data = full.select_codes(model.feature_codes())?;
    if data.codes != model.feature_codes() {
        return Err(usage_error(
            "predictor matrix columns do not line up with the model's feature codes",
        ));
    }
    Ok(data)
}

fn cmd_evaluate(args: EvaluateArgs, cfg: &FileConfig) -> Result<(), AnyError> {
    out_dir(&args.out)?;
    let seed = require_seed(args.seed, cfg)?;
    let resamples = args.resamples.or_else(|| cfg.usize("resamples")).unwrap_or(1000);
    let (catalog, matrix, table) =
        load_inputs(&args.predictors, &args.cohort, args.catalog.as_deref())?;
    let artifact = tabular::load_model(&args.model)?;
    let threshold = artifact
        .threshold
        .clone()
        .ok_or_else(|| usage_error("model artifact carries no decision threshold"))?;

    let data = dataset_for_model(&artifact.model, &matrix, &table, args.split)?;
    let probas = artifact.model.predict_probas(&data)?;
    let auroc = metrics::bootstrap_ci(&probas, &data.labels, MetricSpec::Auroc, resamples, seed)?;
    let auprc = metrics::bootstrap_ci(&probas, &data.labels, MetricSpec::Auprc, resamples, seed)?;
    let f1 = metrics::bootstrap_ci(
        &probas,
        &data.labels,
        MetricSpec::F1 {
            threshold: threshold.threshold,
            direction: threshold.direction,
        },
        resamples,
        seed,
    )?;
    let curves = metrics::compute_curves(&probas, &data.labels)?;

    let n = data.n_rows();
    let n_pos = data.labels.iter().filter(|&&y| y).count();

    #[derive(Serialize)]
    struct Resolved<'a> {
        args: &'a EvaluateArgs,
        seed: u64,
        resamples: usize,
    }
    let hash = config_hash("evaluate", &Resolved { args: &args, seed, resamples });

    #[derive(Serialize)]
    struct Report<'a> {
        schema: &'static str,
        split: Split,
        n: usize,
        n_pos: usize,
        prevalence: f64,
        threshold: &'a ecgpd_core::single_predictor::ThresholdChoice,
        auroc: &'a metrics::MetricReport,
        auprc: &'a metrics::MetricReport,
        f1: &'a metrics::MetricReport,
        config_hash: &'a str,
    }
    let report = Report {
        schema: "ecgpd-report/v1",
        split: args.split,
        n,
        n_pos,
        prevalence: n_pos as f64 / n as f64,
        threshold: &threshold,
        auroc: &auroc,
        auprc: &auprc,
        f1: &f1,
        config_hash: &hash,
    };
    fs::write(
        args.out.join("report.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;

    let mut w = fs::File::create(args.out.join("roc.csv"))?;
    writeln!(w, "fpr,tpr")?;
    for (fpr, tpr) in &curves.roc {
        writeln!(w, "{fpr},{tpr}")?;
    }
    drop(w);
    let mut w = fs::File::create(args.out.join("pr.csv"))?;
    writeln!(w, "recall,precision")?;
    for (recall, precision) in &curves.pr {
        writeln!(w, "{recall},{precision}")?;
    }
    drop(w);

    let mut mb = ManifestBuilder::new(&args.out, "evaluate", hash);
    mb.seed(seed).catalog_version(&catalog.version);
    mb.add("report.json")?;
    mb.add("roc.csv")?;
    mb.add("pr.csv")?;
    mb.write()?;
    Ok(())
}

fn cmd_explain(args: ExplainArgs, cfg: &FileConfig) -> Result<(), AnyError> {
    out_dir(&args.out)?;
    let top_n = args.top_n.or_else(|| cfg.usize("top_n")).unwrap_or(10);
    let (catalog, matrix, table) =
        load_inputs(&args.predictors, &args.cohort, args.catalog.as_deref())?;
    let artifact = tabular::load_model(&args.model)?;
    let data = dataset_for_model(&artifact.model, &matrix, &table, args.split)?;

    let attributions = explain::explain_dataset(&artifact.model, &data)?;
    let global = explain::global_importance(&attributions, &data.codes)?;
    explain::write_global_csv(&args.out.join("shap_global.csv"), &global)?;

    // beeswarm ranking: supplied F1 ranking, or mean |phi| order
    let ranking: Vec<String> = match &args.ranking {
        Some(path) => single_predictor::read_ranking_csv(path)?,
        None => global.iter().map(|r| r.code.clone()).collect(),
    };
    let bees =
        explain::beeswarm_data(&attributions, &data, &ranking, top_n.min(data.n_features()))?;
    explain::write_beeswarm_csv(&args.out.join("shap_beeswarm.csv"), &bees)?;

    // reference thresholds for dependence and waterfall views
    let mut lef_raw: HashMap<String, f64> = HashMap::new();
    if let Some(path) = &args.thresholds {
        let text = fs::read_to_string(path)?;
        let ledger: ecgpd_core::single_predictor::ThresholdLedger = serde_json::from_str(&text)?;
        for e in ledger.entries {
            if e.objective == ThresholdObjective::F1Max {
                lef_raw.insert(e.code.clone(), e.raw_threshold);
            }
        }
    }
    let mut diagnosis: HashMap<String, f64> = HashMap::new();
    for entry in catalog.entries() {
        if let Some(t) = entry.diagnosis_threshold {
            diagnosis.insert(entry.code.clone(), t);
        }
    }

    let mut dependence_codes = Vec::new();
    for spec in &args.dependence {
        for code in spec.split(',') {
            dependence_codes.push(code.trim().to_string());
        }
    }
    let mut written = vec![
        "shap_global.csv".to_string(),
        "shap_beeswarm.csv".to_string(),
    ];
    for code in &dependence_codes {
        let t = explain::dependence_data(
            &attributions,
            &data,
            code,
            lef_raw.get(code).copied(),
            diagnosis.get(code).copied(),
        )?;
        let name = format!("shap_dependence_{}.csv", sanitize_file_component(code));
        explain::write_dependence_csv(&args.out.join(&name), &t)?;
        written.push(name);
    }

    for record_id in &args.record {
        let row = data
            .record_ids
            .iter()
            .position(|r| r == record_id)
            .ok_or_else(|| usage_error(format!("record {record_id} not found in split")))?;
        let report = explain::waterfall_local(
            &artifact.model,
            &data.row(row),
            record_id,
            top_n,
            &lef_raw,
            &diagnosis,
        )?;
        let name = format!("shap_local_{}.json", sanitize_file_component(record_id));
        explain::write_local_json(&args.out.join(&name), &report)?;
        written.push(name);
    }

    #[derive(Serialize)]
    struct Resolved<'a> {
        args: &'a ExplainArgs,
        top_n: usize,
    }
    let hash = config_hash("explain", &Resolved { args: &args, top_n });
    let mut mb = ManifestBuilder::new(&args.out, "explain", hash);
    mb.catalog_version(&catalog.version);
    for name in &written {
        mb.add(name)?;
    }
    mb.write()?;
    Ok(())
}

fn cmd_sweep(args: SweepArgs, cfg: &FileConfig) -> Result<(), AnyError> {
    out_dir(&args.out)?;
    let seed = require_seed(args.seed, cfg)?;
    let resamples = args.resamples.or_else(|| cfg.usize("resamples")).unwrap_or(1000);
    let (catalog, matrix, table) =
        load_inputs(&args.predictors, &args.cohort, args.catalog.as_deref())?;
    let ranking = single_predictor::read_ranking_csv(&args.ranking)?;
    let ks = parse_ks(&args.ks)?;

    let cell = match args.family {
        ModelFamily::Gbdt => GridCell::Gbdt {
            learning_rate: args
                .learning_rate
                .or_else(|| cfg.f64("learning_rate"))
                .ok_or_else(|| usage_error("--learning-rate is required for the gbdt family"))?,
            max_depth: args
                .max_depth
                .or_else(|| cfg.usize("max_depth"))
                .ok_or_else(|| usage_error("--max-depth is required for the gbdt family"))?,
        },
        ModelFamily::Logistic => GridCell::Logistic {
            lambda: args
                .lambda
                .or_else(|| cfg.f64("lambda"))
                .ok_or_else(|| usage_error("--lambda is required for the logistic family"))?,
        },
    };
    let mut config = TrainConfig::new(args.family, seed);
    if let Some(n) = args.n_estimators.or_else(|| cfg.usize("n_estimators")) {
        config.n_estimators = n;
    }
    if let Some(n) = args.early_stopping.or_else(|| cfg.usize("early_stopping")) {
        config.early_stopping_rounds = n;
    }
    if let Some(l) = args.leaf_lambda.or_else(|| cfg.f64("leaf_lambda")) {
        config.leaf_lambda = l;
    }

    let train = Dataset::from_split(&matrix, &table, args.train_split)?;
    let val = Dataset::from_split(&matrix, &table, args.val_split)?;
    let eval = Dataset::from_split(&matrix, &table, args.eval_split)?;
    let rows = tabular::predictor_count_sweep(
        &ranking, &ks, &config, &cell, &train, &val, &eval, resamples, seed,
    )?;
    tabular::write_sweep_csv(&args.out.join("sweep.csv"), &rows)?;

    #[derive(Serialize)]
    struct Resolved<'a> {
        args: &'a SweepArgs,
        seed: u64,
        resamples: usize,
        cell: GridCell,
        ks: &'a [usize],
    }
    let hash = config_hash(
        "sweep",
        &Resolved { args: &args, seed, resamples, cell, ks: &ks },
    );
    let mut mb = ManifestBuilder::new(&args.out, "sweep", hash);
    mb.seed(seed).catalog_version(&catalog.version);
    mb.add("sweep.csv")?;
    mb.write()?;
    Ok(())
}

fn cmd_subgroup(args: SubgroupArgs, cfg: &FileConfig) -> Result<(), AnyError> {
    out_dir(&args.out)?;
    let seed = require_seed(args.seed, cfg)?;
    let resamples = args.resamples.or_else(|| cfg.usize("resamples")).unwrap_or(1000);
    let (catalog, matrix, mut table) =
        load_inputs(&args.predictors, &args.cohort, args.catalog.as_deref())?;
    if let Some(p) = &args.echo_findings {
        let (findings, _imputation) = cohort::load_echo_findings(p)?;
        table.echo_findings = Some(findings);
    }
    let artifact = tabular::load_model(&args.model)?;
    let threshold = artifact
        .threshold
        .clone()
        .ok_or_else(|| usage_error("model artifact carries no decision threshold"))?;

    let dims: Vec<subgroups::Dimension> = match &args.dims {
        Some(list) => list
            .split(',')
            .map(|s| {
                subgroups::Dimension::parse(s.trim())
                    .ok_or_else(|| usage_error(format!("unknown dimension '{s}'")))
            })
            .collect::<Result<_, _>>()?,
        None => {
            let mut d = vec![
                subgroups::Dimension::Age,
                subgroups::Dimension::Sex,
                subgroups::Dimension::Race,
                subgroups::Dimension::Context,
            ];
            if table.echo_findings.is_some() {
                d.push(subgroups::Dimension::Shd);
                d.push(subgroups::Dimension::Vhd);
            }
            d
        }
    };

    let data = dataset_for_model(&artifact.model, &matrix, &table, args.split)?;
    let probas = artifact.model.predict_probas(&data)?;
    let records: Vec<&cohort::LabeledRecord> = table
        .records
        .iter()
        .filter(|r| r.split == args.split)
        .collect();
    let rows = subgroups::subgroup_report(
        &records,
        &probas,
        &dims,
        table.echo_findings.as_ref(),
        threshold.threshold,
        threshold.direction,
        resamples,
        seed,
    )?;
    subgroups::write_subgroups_csv(&args.out.join("subgroups.csv"), &rows)?;

    #[derive(Serialize)]
    struct Resolved<'a> {
        args: &'a SubgroupArgs,
        seed: u64,
        resamples: usize,
        threshold: f64,
    }
    let hash = config_hash(
        "subgroup",
        &Resolved { args: &args, seed, resamples, threshold: threshold.threshold },
    );
    let mut mb = ManifestBuilder::new(&args.out, "subgroup", hash);
    mb.seed(seed).catalog_version(&catalog.version);
    mb.add("subgroups.csv")?;
    mb.write()?;
    Ok(())
}

/// Spawns the configured command per note; the request rides stdin as JSON.
struct CommandLlmClient {
    cmd: String,
}

impl notes::EfLlmClient for CommandLlmClient {
    fn request_ef(&self, note_text: &str) -> Result<String, String> {
        use std::process::{Command, Stdio};
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.cmd)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| e.to_string())?;
        let request = serde_json::json!({ "text": note_text }).to_string();
        child
            .stdin
            .take()
            .ok_or("no stdin")?
            .write_all(request.as_bytes())
            .map_err(|e| e.to_string())?;
        let output = child.wait_with_output().map_err(|e| e.to_string())?;
        if !output.status.success() {
            return Err(format!("client exited with {:?}", output.status.code()));
        }
        String::from_utf8(output.stdout).map_err(|e| e.to_string())
    }
}

fn cmd_notes(args: NotesArgs, cfg: &FileConfig) -> Result<(), AnyError> {
    out_dir(&args.out)?;
    let window_days = args.window_days.or_else(|| cfg.i64("window_days")).unwrap_or(365);
    let keyword_config: notes::KeywordConfig = match &args.keywords {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => notes::KeywordConfig::default(),
    };
    let client = args
        .llm_cmd
        .as_ref()
        .map(|cmd| CommandLlmClient { cmd: cmd.clone() });
    let note_rows = notes::read_notes_jsonl(&args.notes)?;

    let mut gated_out = 0usize;
    let mut extractions = Vec::new();
    let mut labels: BTreeMap<&str, (&notes::NoteRecord, notes::NoteLabel)> = BTreeMap::new();
    for note in &note_rows {
        if !notes::gate_note_with(&note.text, &keyword_config) {
            gated_out += 1;
            continue;
        }
        let extraction = notes::extract_ef_with(
            &note.text,
            client.as_ref().map(|c| c as &dyn notes::EfLlmClient),
            notes::LlmRetryPolicy::default(),
        )?;
        let label = match notes::label_from_ef(&extraction) {
            Ok(l) => l,
            Err(notes::NoteError::NoValue) => notes::NoteLabel::Unlabeled,
            Err(e) => return Err(e.into()),
        };
        extractions.push(notes::ExtractionRow::from_extraction(&note.note_id, &extraction));
        labels.insert(&note.note_id, (note, label));
    }
    notes::write_extractions_jsonl(&args.out.join("extractions.jsonl"), &extractions)?;

    let mut w = fs::File::create(args.out.join("note_labels.csv"))?;
    writeln!(w, "note_id,patient_id,note_time,label")?;
    for (note_id, (note, label)) in &labels {
        let label_str = match label {
            notes::NoteLabel::Positive => "1",
            notes::NoteLabel::Negative => "0",
            notes::NoteLabel::Unlabeled => "",
        };
        writeln!(w, "{},{},{},{}", note_id, note.patient_id, note.note_time, label_str)?;
    }
    drop(w);
    let mut written = vec!["extractions.jsonl".to_string(), "note_labels.csv".to_string()];

    if let Some(ecg_path) = &args.ecg_events {
        let mut reader = csv::Reader::from_path(ecg_path)?;
        let mut pairs = Vec::new();
        let window_secs = window_days * 86_400;
        for rec in reader.records() {
            let rec = rec?;
            let patient_id = rec[0].to_string();
            let record_id = rec[1].to_string();
            let ecg_time: i64 = rec[2]
                .parse()
                .map_err(|_| usage_error(format!("bad ecg_time '{}'", &rec[2])))?;
            for (note, label) in labels.values() {
                if note.patient_id != patient_id {
                    continue;
                }
                let interval = note.note_time - ecg_time;
                if (0..=window_secs).contains(&interval) && *label != notes::NoteLabel::Unlabeled {
                    pairs.push((
                        notes::NotePair {
                            patient_id: patient_id.clone(),
                            record_id: record_id.clone(),
                            note_id: note.note_id.clone(),
                            ecg_time,
                            note_time: note.note_time,
                            interval_seconds: interval,
                        },
                        *label,
                    ));
                }
            }
        }
        let mut label_of: BTreeMap<(String, String), notes::NoteLabel> = BTreeMap::new();
        for (p, l) in &pairs {
            label_of.insert((p.record_id.clone(), p.note_id.clone()), *l);
        }
        let mut selected: Vec<(notes::NotePair, notes::NoteLabel)> = {
            let bare: Vec<notes::NotePair> = pairs.iter().map(|(p, _)| p.clone()).collect();
            notes::select_pairs(&bare)
                .into_iter()
                .map(|p| {
                    let l = label_of[&(p.record_id.clone(), p.note_id.clone())];
                    (p, l)
                })
                .collect()
        };
        if let Some(cross) = &args.cross_labels {
            let mut reader = csv::Reader::from_path(cross)?;
            let mut external = BTreeMap::new();
            for rec in reader.records() {
                let rec = rec?;
                external.insert(rec[0].to_string(), &rec[1] == "1");
            }
            selected = notes::consistency_join(&selected, &external);
        }
        let mut w = fs::File::create(args.out.join("selected_pairs.csv"))?;
        writeln!(
            w,
            "patient_id,record_id,note_id,ecg_time,note_time,interval_seconds,label"
        )?;
        for (p, l) in &selected {
            let label_str = if *l == notes::NoteLabel::Positive { "1" } else { "0" };
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                p.patient_id,
                p.record_id,
                p.note_id,
                p.ecg_time,
                p.note_time,
                p.interval_seconds,
                label_str
            )?;
        }
        drop(w);
        written.push("selected_pairs.csv".to_string());
    }

    #[derive(Serialize)]
    struct Resolved<'a> {
        args: &'a NotesArgs,
        window_days: i64,
        gated_out: usize,
    }
    let hash = config_hash("notes", &Resolved { args: &args, window_days, gated_out });
    let mut mb = ManifestBuilder::new(&args.out, "notes", hash);
    for name in &written {
        mb.add(name)?;
    }
    mb.write()?;
    Ok(())
}

fn cmd_features(args: FeaturesArgs) -> Result<(), AnyError> {
    out_dir(&args.out)?;
    let rows = features::load_measurements(&args.measurements)?;
    let mut derived = Vec::with_capacity(rows.len());
    for (id, age, sex, m) in &rows {
        derived.push((id.clone(), features::derive_baseline_features(m, *age, *sex)?));
    }
    features::write_features_csv(&args.out.join("features.csv"), &derived)?;

    let hash = config_hash("features", &args);
    let mut mb = ManifestBuilder::new(&args.out, "features", hash);
    mb.add("features.csv")?;
    mb.write()?;
    Ok(())
}

fn default_signal() -> Vec<synth::SignalCode> {
    let mut signal = vec![synth::SignalCode {
        code: "NORM".to_string(),
        effect_size: 1.5,
    }];
    for code in ["ILBBB", "INJAL", "ISCLA", "ANEUR", "ISCAL"] {
        signal.push(synth::SignalCode {
            code: code.to_string(),
            effect_size: 0.4,
        });
    }
    signal
}

fn cmd_synth(args: SynthArgs, cfg: &FileConfig) -> Result<(), AnyError> {
    out_dir(&args.out)?;
    let seed = require_seed(args.seed, cfg)?;
    let (n_train, n_val, n_test) = match (args.n_train, args.n_val, args.n_test) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => {
            let n = args
                .n
                .or_else(|| cfg.usize("n"))
                .ok_or_else(|| usage_error("give --n or all of --n-train/--n-val/--n-test"))?;
            let n_val = (n * 15) / 100;
            let n_test = (n * 15) / 100;
            (n - n_val - n_test, n_val, n_test)
        }
    };
    let signal = match &args.signal {
        None => default_signal(),
        Some(spec) => {
            let mut out = Vec::new();
            for part in spec.split(',') {
                let (code, effect) = part.split_once('=').ok_or_else(|| {
                    usage_error(format!("bad signal token '{part}', want CODE=EFFECT"))
                })?;
                out.push(synth::SignalCode {
                    code: code.trim().to_string(),
                    effect_size: effect
                        .trim()
                        .parse()
                        .map_err(|_| usage_error(format!("bad effect '{effect}'")))?,
                });
            }
            out
        }
    };
    let spec = synth::SyntheticSpec {
        n_train,
        n_validation: n_val,
        n_test,
        prevalence: args.prevalence.or_else(|| cfg.f64("prevalence")).unwrap_or(0.2),
        signal,
        noise_scale: args.noise_scale.or_else(|| cfg.f64("noise_scale")).unwrap_or(1.0),
        seed,
        demographics: synth::DemographicMix::default(),
    };
    let catalog = PredictorCatalog::default_71();
    let generated = synth::generate(&spec, &catalog)?;

    predictors::write_predictor_matrix(&args.out.join("predictors.csv"), &generated.matrix)?;
    cohort::write_cohort(&args.out.join("cohort.csv"), &generated.cohort)?;
    catalog.save_json(&args.out.join("catalog.json"))?;
    #[derive(Serialize)]
    struct Truth<'a> {
        spec: &'a synth::SyntheticSpec,
        truth: &'a synth::SyntheticTruth,
    }
    fs::write(
        args.out.join("truth.json"),
        serde_json::to_string_pretty(&Truth { spec: &spec, truth: &generated.truth })? + "\n",
    )?;

    let hash = config_hash("synth", &spec);
    let mut mb = ManifestBuilder::new(&args.out, "synth", hash);
    mb.seed(seed).catalog_version(&catalog.version);
    mb.add("predictors.csv")?;
    mb.add("cohort.csv")?;
    mb.add("catalog.json")?;
    mb.add("truth.json")?;
    mb.write()?;
    Ok(())
}
