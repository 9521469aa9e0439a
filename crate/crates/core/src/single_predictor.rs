//! Zero-shot-like LEF inference from one oriented predictor score: threshold
//! selection (F1-max and recall-floor policies), per-predictor evaluation,
//! and the F1 ranking used to order predictors elsewhere.
//!
//! Candidate thresholds are the distinct observed scores plus a sentinel
//! above the maximum (predict none); the decision rule is fixed as
//! "positive iff oriented score >= threshold". F1 ties break toward the
//! larger threshold.

use crate::cohort::{CohortTable, Split};
use crate::metrics::{self, Direction, MetricReport, MetricSpec, MetricsError};
use crate::predictors::{GatewayError, PredictorCatalog, PredictorMatrix};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SinglePredictorError {
    #[error("labels are degenerate: need at least one positive and one negative")]
    DegenerateLabels,
    #[error("scores and labels have different lengths ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("min_recall must be in (0,1], got {0}")]
    BadMinRecall(f64),
    #[error("no record in predictor matrix for cohort record {0}")]
    MissingRecord(String),
    #[error("split {0:?} has no records")]
    EmptySplit(Split),
    #[error("no report for catalog code {0}")]
    MissingCode(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdObjective {
    F1Max,
    RecallFloor,
}

/// A selected decision threshold in oriented-score space, together with what
/// it achieved on the selection split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    pub threshold: f64,
    pub direction: Direction,
    pub objective: ThresholdObjective,
    pub achieved_f1: f64,
    pub achieved_recall: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selected_on: Option<Split>,
    /// False only when no candidate threshold reaches the recall floor.
    pub floor_met: bool,
}

struct Cut {
    threshold: f64,
    tp: usize,
    fp: usize,
}

/// Enumerate candidate cuts in descending threshold order. The first entry is
/// the predict-none sentinel (+inf).
fn candidate_cuts(scores: &[f64], labels: &[bool]) -> Result<Vec<Cut>, SinglePredictorError> {
    if scores.len() != labels.len() {
        return Err(SinglePredictorError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(SinglePredictorError::DegenerateLabels);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));

    let mut cuts = vec![Cut {
        threshold: f64::INFINITY,
        tp: 0,
        fp: 0,
    }];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &k in &order[i..=j] {
            if labels[k] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        cuts.push(Cut {
            threshold: scores[order[i]],
            tp,
            fp,
        });
        i = j + 1;
    }
    Ok(cuts)
}

fn f1_of(cut: &Cut, n_pos: usize) -> f64 {
    if cut.tp == 0 {
        return 0.0;
    }
    2.0 * cut.tp as f64 / (2 * cut.tp + cut.fp + (n_pos - cut.tp)) as f64
}

/// Threshold maximizing F1 for the rule `score >= threshold`, ties broken
/// toward the larger threshold.
pub fn select_threshold_f1(
    scores: &[f64],
    labels: &[bool],
) -> Result<ThresholdChoice, SinglePredictorError> {
    let cuts = candidate_cuts(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let mut best = &cuts[0];
    let mut best_f1 = f1_of(best, n_pos);
    for cut in &cuts[1..] {
        let f1 = f1_of(cut, n_pos);
        if f1 > best_f1 {
            best = cut;
            best_f1 = f1;
        }
    }
    Ok(ThresholdChoice {
        code: None,
        threshold: best.threshold,
        direction: Direction::ScoreGe,
        objective: ThresholdObjective::F1Max,
        achieved_f1: best_f1,
        achieved_recall: best.tp as f64 / n_pos as f64,
        selected_on: None,
        floor_met: true,
    })
}

/// Largest threshold whose recall reaches `min_recall` on the selection data.
/// If no candidate reaches the floor the choice falls back to -inf
/// (predict everything) with `floor_met = false`.
pub fn select_threshold_recall(
    scores: &[f64],
    labels: &[bool],
    min_recall: f64,
) -> Result<ThresholdChoice, SinglePredictorError> {
    if !(min_recall > 0.0 && min_recall <= 1.0) {
        return Err(SinglePredictorError::BadMinRecall(min_recall));
    }
    let cuts = candidate_cuts(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    for cut in &cuts {
        let recall = cut.tp as f64 / n_pos as f64;
        if recall >= min_recall {
            return Ok(ThresholdChoice {
                code: None,
                threshold: cut.threshold,
                direction: Direction::ScoreGe,
                objective: ThresholdObjective::RecallFloor,
                achieved_f1: f1_of(cut, n_pos),
                achieved_recall: recall,
                selected_on: None,
                floor_met: true,
            });
        }
    }
    // unreachable for min_recall <= 1 (the lowest cut predicts everything)
    let last = cuts.last().expect("at least the sentinel cut");
    Ok(ThresholdChoice {
        code: None,
        threshold: f64::NEG_INFINITY,
        direction: Direction::ScoreGe,
        objective: ThresholdObjective::RecallFloor,
        achieved_f1: f1_of(last, n_pos),
        achieved_recall: 1.0,
        selected_on: None,
        floor_met: false,
    })
}

/// Oriented scores and labels for one code over one split, aligned to cohort
/// row order.
pub fn oriented_split_scores(
    code: &str,
    matrix: &PredictorMatrix,
    cohort: &CohortTable,
    catalog: &PredictorCatalog,
    split: Split,
) -> Result<(Vec<f64>, Vec<bool>), SinglePredictorError> {
    let pos = catalog.position(code)?;
    let inverted = catalog.is_inverted(code)?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for r in &cohort.records {
        if r.split != split {
            continue;
        }
        let pv = matrix
            .value(&r.record_id, pos)
            .ok_or_else(|| SinglePredictorError::MissingRecord(r.record_id.clone()))?;
        scores.push(if inverted { 1.0 - pv } else { pv });
        labels.push(r.label);
    }
    if scores.is_empty() {
        return Err(SinglePredictorError::EmptySplit(split));
    }
    Ok((scores, labels))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SinglePredictorReport {
    pub code: String,
    pub auroc: MetricReport,
    pub auprc: MetricReport,
    pub f1: MetricReport,
    pub threshold: ThresholdChoice,
}

/// Evaluate one predictor: AUROC/AUPRC threshold-free on the eval split, F1
/// at the threshold chosen on the selection split, bootstrap CIs attached.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_single(
    code: &str,
    matrix: &PredictorMatrix,
    cohort: &CohortTable,
    catalog: &PredictorCatalog,
    selection_split: Split,
    eval_split: Split,
    objective: ThresholdObjective,
    min_recall: f64,
    n_resamples: usize,
    seed: u64,
) -> Result<SinglePredictorReport, SinglePredictorError> {
    let (sel_scores, sel_labels) =
        oriented_split_scores(code, matrix, cohort, catalog, selection_split)?;
    let mut choice = match objective {
        ThresholdObjective::F1Max => select_threshold_f1(&sel_scores, &sel_labels)?,
        ThresholdObjective::RecallFloor => {
            select_threshold_recall(&sel_scores, &sel_labels, min_recall)?
        }
    };
    choice.code = Some(code.to_string());
    choice.selected_on = Some(selection_split);

    let (eval_scores, eval_labels) =
        oriented_split_scores(code, matrix, cohort, catalog, eval_split)?;
    let auroc = metrics::bootstrap_ci(&eval_scores, &eval_labels, MetricSpec::Auroc, n_resamples, seed)?;
    let auprc = metrics::bootstrap_ci(&eval_scores, &eval_labels, MetricSpec::Auprc, n_resamples, seed)?;
    let f1 = metrics::bootstrap_ci(
        &eval_scores,
        &eval_labels,
        MetricSpec::F1 {
            threshold: choice.threshold,
            direction: choice.direction,
        },
        n_resamples,
        seed,
    )?;
    Ok(SinglePredictorReport {
        code: code.to_string(),
        auroc,
        auprc,
        f1,
        threshold: choice,
    })
}

/// Order catalog codes by descending single-predictor F1 point estimate,
/// ties broken by catalog order. Requires one report per catalog code.
pub fn rank_predictors(
    reports: &[SinglePredictorReport],
    catalog: &PredictorCatalog,
) -> Result<Vec<String>, SinglePredictorError> {
    let mut by_code = std::collections::HashMap::new();
    for r in reports {
        by_code.insert(r.code.as_str(), r.f1.point);
    }
    let mut ranked: Vec<(usize, String, f64)> = Vec::with_capacity(catalog.len());
    for (i, code) in catalog.codes().into_iter().enumerate() {
        let f1 = *by_code
            .get(code.as_str())
            .ok_or_else(|| SinglePredictorError::MissingCode(code.clone()))?;
        ranked.push((i, code, f1));
    }
    // stable sort: equal F1 keeps catalog order
    ranked.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());
    Ok(ranked.into_iter().map(|(_, code, _)| code).collect())
}

/// One row of the threshold ledger. The selected threshold lives in oriented
/// space; `raw_threshold`/`raw_direction` express the same rule in raw
/// predictor-value space so either convention can be applied downstream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdLedgerEntry {
    pub code: String,
    pub objective: ThresholdObjective,
    pub selected_on: Option<Split>,
    pub oriented_threshold: f64,
    pub oriented_direction: Direction,
    pub raw_threshold: f64,
    pub raw_direction: Direction,
    pub achieved_f1: f64,
    pub achieved_recall: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnosis_threshold: Option<f64>,
}

pub fn ledger_entry(
    choice: &ThresholdChoice,
    catalog: &PredictorCatalog,
) -> Result<ThresholdLedgerEntry, SinglePredictorError> {
    let code = choice.code.clone().unwrap_or_default();
    let inverted = catalog.is_inverted(&code)?;
    let (raw_threshold, raw_direction) = if inverted {
        // oriented = 1 - PV, so "oriented >= t" is "PV <= 1 - t"
        (1.0 - choice.threshold, Direction::ScoreLe)
    } else {
        (choice.threshold, Direction::ScoreGe)
    };
    Ok(ThresholdLedgerEntry {
        code: code.clone(),
        objective: choice.objective,
        selected_on: choice.selected_on,
        oriented_threshold: choice.threshold,
        oriented_direction: choice.direction,
        raw_threshold,
        raw_direction,
        achieved_f1: choice.achieved_f1,
        achieved_recall: choice.achieved_recall,
        diagnosis_threshold: catalog.diagnosis_threshold(&code)?,
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ThresholdLedger {
    pub entries: Vec<ThresholdLedgerEntry>,
}

pub fn write_threshold_ledger(path: &Path, ledger: &ThresholdLedger) -> Result<(), SinglePredictorError> {
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(w, ledger)?;
    Ok(())
}

pub fn write_ranking_csv(path: &Path, ranking: &[String]) -> Result<(), SinglePredictorError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "rank,code")?;
    for (i, code) in ranking.iter().enumerate() {
        writeln!(w, "{},{}", i + 1, code)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ranking_csv(path: &Path) -> Result<Vec<String>, SinglePredictorError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(
        |e| match e.into_kind() {
            csv::ErrorKind::Io(io) => SinglePredictorError::Io(io),
            other => SinglePredictorError::Io(std::io::Error::other(format!("{other:?}"))),
        },
    )?;
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| SinglePredictorError::Io(std::io::Error::other(e)))?;
        out.push(rec[1].to_string());
    }
    Ok(out)
}
