//! Multi-predictor LEF models: L2 logistic regression and gradient-boosted
//! trees, plus grid search, decision thresholding, the predictor-count
//! sweep, and the versioned model artifact.

mod gbdt;
mod logistic;

pub use gbdt::{train_gbdt, GbdtParams, GbdtTrainLog, Tree, TreeEnsemble, TreeNode};
pub use logistic::{logistic_gradient, logistic_objective, train_logistic, LogisticModel, GRAD_TOL};

use crate::cohort::{CohortTable, Split};
use crate::metrics::{self, MetricReport, MetricSpec, MetricsError};
use crate::predictors::PredictorMatrix;
use crate::single_predictor::{self, SinglePredictorError, ThresholdChoice};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

pub const MODEL_SCHEMA: &str = "ecgpd-model/v1";

#[derive(Debug, Error)]
pub enum TabularError {
    #[error("labels are degenerate: need at least one positive and one negative")]
    DegenerateLabels,
    #[error("empty feature set")]
    EmptyFeatureSet,
    #[error("dimension mismatch: expected {expected} features, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("optimizer failed to converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NonConvergence { iterations: usize, grad_norm: f64 },
    #[error("non-finite feature value in column {code}, row {row}")]
    NonFiniteFeature { code: String, row: usize },
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("unknown feature code: {0}")]
    UnknownFeature(String),
    #[error("no record in predictor matrix for cohort record {0}")]
    MissingRecord(String),
    #[error("unsupported model schema: {0}")]
    UnsupportedSchema(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Threshold(#[from] SinglePredictorError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub fn sigmoid(m: f64) -> f64 {
    if m >= 0.0 {
        1.0 / (1.0 + (-m).exp())
    } else {
        let e = m.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable mean logistic loss over margins.
pub fn logloss_mean(margins: &[f64], labels: &[bool]) -> f64 {
    let total: f64 = margins
        .iter()
        .zip(labels)
        .map(|(&m, &y)| {
            let t = if y { m } else { -m };
            if t > 0.0 {
                (-t).exp().ln_1p()
            } else {
                -t + t.exp().ln_1p()
            }
        })
        .sum();
    total / labels.len() as f64
}

/// Column-major feature table aligned with labels and record ids; the common
/// input to both model families.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub codes: Vec<String>,
    pub columns: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
    pub record_ids: Vec<String>,
}

impl Dataset {
    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[i]).collect()
    }

    pub fn check_finite(&self) -> Result<(), TabularError> {
        for (f, col) in self.columns.iter().enumerate() {
            if let Some(row) = col.iter().position(|v| !v.is_finite()) {
                return Err(TabularError::NonFiniteFeature {
                    code: self.codes[f].clone(),
                    row,
                });
            }
        }
        Ok(())
    }

    /// Gather one split of a cohort against the predictor matrix, preserving
    /// cohort row order.
    pub fn from_split(
        matrix: &PredictorMatrix,
        cohort: &CohortTable,
        split: Split,
    ) -> Result<Self, TabularError> {
        let n_features = matrix.codes.len();
        let mut columns = vec![Vec::new(); n_features];
        let mut labels = Vec::new();
        let mut record_ids = Vec::new();
        for r in &cohort.records {
            if r.split != split {
                continue;
            }
            let v = matrix
                .get(&r.record_id)
                .ok_or_else(|| TabularError::MissingRecord(r.record_id.clone()))?;
            for (f, col) in columns.iter_mut().enumerate() {
                col.push(v.values()[f]);
            }
            labels.push(r.label);
            record_ids.push(r.record_id.clone());
        }
        Ok(Dataset {
            codes: matrix.codes.clone(),
            columns,
            labels,
            record_ids,
        })
    }

    /// Restrict to a subset of feature codes, keeping this dataset's column
    /// order (not the order of `selected`).
    pub fn select_codes(&self, selected: &[String]) -> Result<Self, TabularError> {
        let wanted: std::collections::HashSet<&str> =
            selected.iter().map(|s| s.as_str()).collect();
        for s in selected {
            if !self.codes.iter().any(|c| c == s) {
                return Err(TabularError::UnknownFeature(s.clone()));
            }
        }
        let mut codes = Vec::new();
        let mut columns = Vec::new();
        for (c, col) in self.codes.iter().zip(&self.columns) {
            if wanted.contains(c.as_str()) {
                codes.push(c.clone());
                columns.push(col.clone());
            }
        }
        Ok(Dataset {
            codes,
            columns,
            labels: self.labels.clone(),
            record_ids: self.record_ids.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    Logistic,
    Gbdt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    Auroc,
    LogLoss,
    Auprc,
}

/// Training configuration: grids, budget, and the validation selection
/// metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub family: ModelFamily,
    pub lambda_grid: Vec<f64>,
    pub learning_rate_grid: Vec<f64>,
    pub max_depth_grid: Vec<usize>,
    pub n_estimators: usize,
    pub early_stopping_rounds: usize,
    pub leaf_lambda: f64,
    pub seed: u64,
    pub selection_metric: SelectionMetric,
}

impl TrainConfig {
    pub fn new(family: ModelFamily, seed: u64) -> Self {
        TrainConfig {
            family,
            lambda_grid: vec![0.001, 0.01, 0.1, 1.0, 10.0],
            learning_rate_grid: vec![0.05, 0.1, 0.2],
            max_depth_grid: vec![3, 5, 7],
            n_estimators: 1000,
            early_stopping_rounds: 30,
            leaf_lambda: 1.0,
            seed,
            selection_metric: SelectionMetric::Auroc,
        }
    }

    pub fn validate(&self) -> Result<(), TabularError> {
        let grid_empty = match self.family {
            ModelFamily::Logistic => self.lambda_grid.is_empty(),
            ModelFamily::Gbdt => {
                self.learning_rate_grid.is_empty() || self.max_depth_grid.is_empty()
            }
        };
        if grid_empty {
            return Err(TabularError::BadConfig("empty hyperparameter grid".to_string()));
        }
        if self.early_stopping_rounds < 1 {
            return Err(TabularError::BadConfig(
                "early_stopping_rounds must be >= 1".to_string(),
            ));
        }
        if self.n_estimators < 1 {
            return Err(TabularError::BadConfig("n_estimators must be >= 1".to_string()));
        }
        Ok(())
    }

    /// Grid cells in deterministic enumeration order.
    pub fn cells(&self) -> Vec<GridCell> {
        match self.family {
            ModelFamily::Logistic => self
                .lambda_grid
                .iter()
                .map(|&l| GridCell::Logistic { lambda: l })
                .collect(),
            ModelFamily::Gbdt => {
                let mut cells = Vec::new();
                for &lr in &self.learning_rate_grid {
                    for &depth in &self.max_depth_grid {
                        cells.push(GridCell::Gbdt {
                            learning_rate: lr,
                            max_depth: depth,
                        });
                    }
                }
                cells
            }
        }
    }

    pub fn gbdt_params(&self, cell: &GridCell) -> Result<GbdtParams, TabularError> {
        match cell {
            GridCell::Gbdt {
                learning_rate,
                max_depth,
            } => Ok(GbdtParams {
                learning_rate: *learning_rate,
                max_depth: *max_depth,
                n_estimators: self.n_estimators,
                early_stopping_rounds: self.early_stopping_rounds,
                leaf_lambda: self.leaf_lambda,
                seed: self.seed,
            }),
            _ => Err(TabularError::BadConfig("not a GBDT grid cell".to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridCell {
    Logistic { lambda: f64 },
    Gbdt { learning_rate: f64, max_depth: usize },
}

/// A trained model of either family behind one margin interface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum TabularModel {
    Logistic(LogisticModel),
    Gbdt(TreeEnsemble),
}

impl TabularModel {
    pub fn family(&self) -> ModelFamily {
        match self {
            TabularModel::Logistic(_) => ModelFamily::Logistic,
            TabularModel::Gbdt(_) => ModelFamily::Gbdt,
        }
    }

    pub fn feature_codes(&self) -> &[String] {
        match self {
            TabularModel::Logistic(m) => &m.feature_codes,
            TabularModel::Gbdt(m) => &m.feature_codes,
        }
    }

    /// Log-odds output.
    pub fn predict_margin(&self, x: &[f64]) -> Result<f64, TabularError> {
        match self {
            TabularModel::Logistic(m) => m.predict_margin(x),
            TabularModel::Gbdt(m) => m.predict_margin(x),
        }
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<f64, TabularError> {
        Ok(sigmoid(self.predict_margin(x)?))
    }

    pub fn predict_margins(&self, data: &Dataset) -> Result<Vec<f64>, TabularError> {
        (0..data.n_rows())
            .map(|i| self.predict_margin(&data.row(i)))
            .collect()
    }

    pub fn predict_probas(&self, data: &Dataset) -> Result<Vec<f64>, TabularError> {
        Ok(self.predict_margins(data)?.into_iter().map(sigmoid).collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellOutcome {
    pub cell: GridCell,
    /// Higher-is-better selection score (log-loss is negated).
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionInfo {
    pub metric: SelectionMetric,
    pub validation_score: f64,
    pub cell: GridCell,
    pub cells: Vec<CellOutcome>,
}

pub struct GridSearchResult {
    pub model: TabularModel,
    pub selection: SelectionInfo,
}

fn selection_score(
    metric: SelectionMetric,
    margins: &[f64],
    labels: &[bool],
) -> Result<f64, TabularError> {
    Ok(match metric {
        SelectionMetric::Auroc => metrics::auroc(margins, labels)?,
        SelectionMetric::Auprc => metrics::auprc(margins, labels)?,
        SelectionMetric::LogLoss => -logloss_mean(margins, labels),
    })
}

fn fit_cell(
    config: &TrainConfig,
    cell: &GridCell,
    train: &Dataset,
    val: &Dataset,
) -> Result<TabularModel, TabularError> {
    match cell {
        GridCell::Logistic { lambda } => {
            Ok(TabularModel::Logistic(train_logistic(train, *lambda)?))
        }
        GridCell::Gbdt { .. } => {
            let params = config.gbdt_params(cell)?;
            let (model, _log) = train_gbdt(train, val, &params)?;
            Ok(TabularModel::Gbdt(model))
        }
    }
}

/// Train every grid cell and keep the one with the best validation score;
/// ties break toward the earlier cell in grid order.
pub fn grid_search(
    config: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
) -> Result<GridSearchResult, TabularError> {
    config.validate()?;
    let cells = config.cells();
    let mut outcomes = Vec::with_capacity(cells.len());
    let mut best: Option<(usize, f64, TabularModel)> = None;
    for (i, cell) in cells.iter().enumerate() {
        let model = fit_cell(config, cell, train, val)?;
        let margins = model.predict_margins(val)?;
        let score = selection_score(config.selection_metric, &margins, &val.labels)?;
        outcomes.push(CellOutcome { cell: *cell, score });
        let replace = match &best {
            None => true,
            Some((_, best_score, _)) => score > *best_score,
        };
        if replace {
            best = Some((i, score, model));
        }
    }
    let (idx, score, model) = best.expect("non-empty grid");
    Ok(GridSearchResult {
        model,
        selection: SelectionInfo {
            metric: config.selection_metric,
            validation_score: score,
            cell: cells[idx],
            cells: outcomes,
        },
    })
}

/// F1-max decision threshold on validation probabilities. The stored
/// threshold lives in probability space.
pub fn choose_decision_threshold(
    model: &TabularModel,
    val: &Dataset,
    selected_on: Split,
) -> Result<ThresholdChoice, TabularError> {
    let probas = model.predict_probas(val)?;
    let mut choice = single_predictor::select_threshold_f1(&probas, &val.labels)?;
    choice.selected_on = Some(selected_on);
    Ok(choice)
}

/// Versioned JSON artifact wrapping a trained model plus its selection
/// metadata and frozen decision threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub schema: String,
    pub seed: u64,
    pub n_estimators: usize,
    pub early_stopping_rounds: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionInfo>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<ThresholdChoice>,
    pub model: TabularModel,
}

impl ModelArtifact {
    pub fn new(model: TabularModel, config: &TrainConfig) -> Self {
        ModelArtifact {
            schema: MODEL_SCHEMA.to_string(),
            seed: config.seed,
            n_estimators: config.n_estimators,
            early_stopping_rounds: config.early_stopping_rounds,
            selection: None,
            threshold: None,
            model,
        }
    }
}

pub fn save_model(path: &Path, artifact: &ModelArtifact) -> Result<(), TabularError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, artifact)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelArtifact, TabularError> {
    let r = BufReader::new(File::open(path)?);
    let artifact: ModelArtifact = serde_json::from_reader(r)?;
    if artifact.schema != MODEL_SCHEMA {
        return Err(TabularError::UnsupportedSchema(artifact.schema));
    }
    Ok(artifact)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub k: usize,
    pub auroc: MetricReport,
    pub auprc: MetricReport,
    pub f1: MetricReport,
}

/// Train on the top-k ranked predictors for each k and evaluate on the eval
/// split. Selected codes are re-ordered to this dataset's column order so
/// that k = n_features reproduces the full model bit-exactly.
#[allow(clippy::too_many_arguments)]
pub fn predictor_count_sweep(
    ranking: &[String],
    ks: &[usize],
    config: &TrainConfig,
    cell: &GridCell,
    train: &Dataset,
    val: &Dataset,
    eval: &Dataset,
    n_resamples: usize,
    seed: u64,
) -> Result<Vec<SweepRow>, TabularError> {
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        if k == 0 || k > ranking.len() {
            return Err(TabularError::BadConfig(format!(
                "sweep k must be in 1..={}, got {k}",
                ranking.len()
            )));
        }
        let selected: Vec<String> = ranking[..k].to_vec();
        let sub_train = train.select_codes(&selected)?;
        let sub_val = val.select_codes(&selected)?;
        let sub_eval = eval.select_codes(&selected)?;
        let model = fit_cell(config, cell, &sub_train, &sub_val)?;
        let choice = choose_decision_threshold(&model, &sub_val, Split::Validation)?;
        let probas = model.predict_probas(&sub_eval)?;
        let auroc =
            metrics::bootstrap_ci(&probas, &sub_eval.labels, MetricSpec::Auroc, n_resamples, seed)?;
        let auprc =
            metrics::bootstrap_ci(&probas, &sub_eval.labels, MetricSpec::Auprc, n_resamples, seed)?;
        let f1 = metrics::bootstrap_ci(
            &probas,
            &sub_eval.labels,
            MetricSpec::F1 {
                threshold: choice.threshold,
                direction: choice.direction,
            },
            n_resamples,
            seed,
        )?;
        rows.push(SweepRow { k, auroc, auprc, f1 });
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<(), TabularError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(
        w,
        "k,auroc,auroc_ci_lo,auroc_ci_hi,auprc,auprc_ci_lo,auprc_ci_hi,f1,f1_ci_lo,f1_ci_hi"
    )?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.k,
            r.auroc.point,
            r.auroc.ci_low,
            r.auroc.ci_high,
            r.auprc.point,
            r.auprc.ci_low,
            r.auprc.ci_high,
            r.f1.point,
            r.f1.ci_low,
            r.f1.ci_high
        )?;
    }
    w.flush()?;
    Ok(())
}
