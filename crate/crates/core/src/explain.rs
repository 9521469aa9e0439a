//! Exact Tree SHAP attributions for the tree ensemble plus the aggregation
//! products consumed by plots: global importance with cumulative
//! contribution, beeswarm rows, dependence-with-density tables, and local
//! waterfalls.
//!
//! The background distribution is the cover-weighted tree-path conditioning
//! recorded at training time. All attributions live in margin (log-odds)
//! space, where they are additive: `base_value + sum(phi) == margin`.

use crate::tabular::{sigmoid, TabularError, TabularModel, Tree, TreeEnsemble};
use rayon::prelude::*;
use serde::Serialize;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("dimension mismatch: expected {expected} features, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("node {node} of tree {tree} has non-positive cover")]
    MissingCover { tree: usize, node: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("total attribution mass is zero; cumulative percentages undefined")]
    EmptyTotal,
    #[error("attributions and data are misaligned at row {0}")]
    AlignmentMismatch(usize),
    #[error("top_n must be in 1..{limit}, got {top_n}")]
    BadTopN { top_n: usize, limit: usize },
    #[error("unknown code: {0}")]
    UnknownCode(String),
    #[error(transparent)]
    Tabular(#[from] TabularError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Per-instance Shapley attribution in log-odds units.
#[derive(Debug, Clone, Serialize)]
pub struct ShapAttribution {
    pub record_id: String,
    pub phi: Vec<f64>,
    pub base_value: f64,
    pub margin: f64,
}

impl ShapAttribution {
    /// |base + sum(phi) - margin|
    pub fn additivity_gap(&self) -> f64 {
        (self.base_value + self.phi.iter().sum::<f64>() - self.margin).abs()
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct PathElement {
    feature_index: i32,
    zero_fraction: f64,
    one_fraction: f64,
    pweight: f64,
}

fn extend_path(
    path: &mut Vec<PathElement>,
    unique_depth: usize,
    zero_fraction: f64,
    one_fraction: f64,
    feature_index: i32,
) {
    let el = PathElement {
        feature_index,
        zero_fraction,
        one_fraction,
        pweight: if unique_depth == 0 { 1.0 } else { 0.0 },
    };
    if path.len() == unique_depth {
        path.push(el);
    } else {
        path[unique_depth] = el;
    }
    for i in (0..unique_depth).rev() {
        path[i + 1].pweight +=
            one_fraction * path[i].pweight * (i + 1) as f64 / (unique_depth + 1) as f64;
        path[i].pweight =
            zero_fraction * path[i].pweight * (unique_depth - i) as f64 / (unique_depth + 1) as f64;
    }
}

fn unwind_path(path: &mut [PathElement], unique_depth: usize, path_index: usize) {
    let one_fraction = path[path_index].one_fraction;
    let zero_fraction = path[path_index].zero_fraction;
    let mut next_one_portion = path[unique_depth].pweight;
    for i in (0..unique_depth).rev() {
        if one_fraction != 0.0 {
            let tmp = path[i].pweight;
            path[i].pweight =
                next_one_portion * (unique_depth + 1) as f64 / ((i + 1) as f64 * one_fraction);
            next_one_portion = tmp
                - path[i].pweight * zero_fraction * (unique_depth - i) as f64
                    / (unique_depth + 1) as f64;
        } else {
            path[i].pweight = path[i].pweight * (unique_depth + 1) as f64
                / (zero_fraction * (unique_depth - i) as f64);
        }
    }
    for i in path_index..unique_depth {
        path[i].feature_index = path[i + 1].feature_index;
        path[i].zero_fraction = path[i + 1].zero_fraction;
        path[i].one_fraction = path[i + 1].one_fraction;
    }
}

fn unwound_path_sum(path: &[PathElement], unique_depth: usize, path_index: usize) -> f64 {
    let one_fraction = path[path_index].one_fraction;
    let zero_fraction = path[path_index].zero_fraction;
    let mut next_one_portion = path[unique_depth].pweight;
    let mut total = 0.0;
    for i in (0..unique_depth).rev() {
        if one_fraction != 0.0 {
            let tmp =
                next_one_portion * (unique_depth + 1) as f64 / ((i + 1) as f64 * one_fraction);
            total += tmp;
            next_one_portion = path[i].pweight
                - tmp * zero_fraction * ((unique_depth - i) as f64 / (unique_depth + 1) as f64);
        } else if zero_fraction != 0.0 {
            total += (path[i].pweight / zero_fraction)
                / ((unique_depth - i) as f64 / (unique_depth + 1) as f64);
        }
    }
    total
}

const ROOT_SENTINEL_FEATURE: i32 = -1;

#[allow(clippy::too_many_arguments)]
fn shap_recurse(
    tree: &Tree,
    x: &[f64],
    phi: &mut [f64],
    node_index: usize,
    mut unique_depth: usize,
    parent_path: &[PathElement],
    parent_zero_fraction: f64,
    parent_one_fraction: f64,
    parent_feature_index: i32,
) {
    let mut path: Vec<PathElement> = parent_path.to_vec();
    extend_path(
        &mut path,
        unique_depth,
        parent_zero_fraction,
        parent_one_fraction,
        parent_feature_index,
    );

    let node = &tree.nodes[node_index];
    if node.is_leaf() {
        for i in 1..=unique_depth {
            let w = unwound_path_sum(&path, unique_depth, i);
            let el = &path[i];
            phi[el.feature_index as usize] +=
                w * (el.one_fraction - el.zero_fraction) * node.leaf_value;
        }
        return;
    }

    let feature = node.feature_index;
    let (hot, cold) = if x[feature as usize] < node.threshold {
        (node.left as usize, node.right as usize)
    } else {
        (node.right as usize, node.left as usize)
    };
    let hot_zero_fraction = tree.nodes[hot].cover / node.cover;
    let cold_zero_fraction = tree.nodes[cold].cover / node.cover;
    let mut incoming_zero_fraction = 1.0;
    let mut incoming_one_fraction = 1.0;

    // if the feature already appears on the path, undo its factor first
    let mut path_index = 0usize;
    while path_index <= unique_depth {
        if path[path_index].feature_index == feature {
            break;
        }
        path_index += 1;
    }
    if path_index != unique_depth + 1 {
        incoming_zero_fraction = path[path_index].zero_fraction;
        incoming_one_fraction = path[path_index].one_fraction;
        unwind_path(&mut path, unique_depth, path_index);
        unique_depth -= 1;
    }

    shap_recurse(
        tree,
        x,
        phi,
        hot,
        unique_depth + 1,
        &path[..=unique_depth],
        hot_zero_fraction * incoming_zero_fraction,
        incoming_one_fraction,
        feature,
    );
    shap_recurse(
        tree,
        x,
        phi,
        cold,
        unique_depth + 1,
        &path[..=unique_depth],
        cold_zero_fraction * incoming_zero_fraction,
        0.0,
        feature,
    );
}

fn check_covers(ensemble: &TreeEnsemble) -> Result<(), ExplainError> {
    for (t, tree) in ensemble.trees[..ensemble.n_trees_used].iter().enumerate() {
        for (i, n) in tree.nodes.iter().enumerate() {
            if n.cover <= 0.0 || n.cover.is_nan() {
                return Err(ExplainError::MissingCover { tree: t, node: i });
            }
        }
    }
    Ok(())
}

/// Shapley attribution of one instance for a single tree.
pub fn tree_shap_single(tree: &Tree, x: &[f64], n_features: usize) -> Vec<f64> {
    let mut phi = vec![0.0; n_features];
    shap_recurse(tree, x, &mut phi, 0, 0, &[], 1.0, 1.0, ROOT_SENTINEL_FEATURE);
    phi
}

/// Exact Tree SHAP for the ensemble. Per-tree attributions sum by linearity;
/// the base value is the ensemble's cover-weighted expected margin.
pub fn tree_shap(
    ensemble: &TreeEnsemble,
    x: &[f64],
    record_id: &str,
) -> Result<ShapAttribution, ExplainError> {
    let n_features = ensemble.feature_codes.len();
    if x.len() != n_features {
        return Err(ExplainError::DimensionMismatch {
            expected: n_features,
            found: x.len(),
        });
    }
    check_covers(ensemble)?;
    let mut phi = vec![0.0; n_features];
    let mut base = ensemble.base_score_logodds;
    for tree in &ensemble.trees[..ensemble.n_trees_used] {
        shap_recurse(tree, x, &mut phi, 0, 0, &[], 1.0, 1.0, ROOT_SENTINEL_FEATURE);
        base += tree.mean_value();
    }
    let margin = ensemble.predict_margin(x)?;
    Ok(ShapAttribution {
        record_id: record_id.to_string(),
        phi,
        base_value: base,
        margin,
    })
}

/// Linear attribution for the logistic family: `phi_i = w_i (x_i - mean_i)`
/// with the base at the training feature means. Provided for parity with the
/// tree explainer.
pub fn linear_shap(
    model: &crate::tabular::LogisticModel,
    x: &[f64],
    record_id: &str,
) -> Result<ShapAttribution, ExplainError> {
    if x.len() != model.weights.len() {
        return Err(ExplainError::DimensionMismatch {
            expected: model.weights.len(),
            found: x.len(),
        });
    }
    let phi: Vec<f64> = model
        .weights
        .iter()
        .zip(x.iter().zip(&model.feature_means))
        .map(|(w, (xi, mi))| w * (xi - mi))
        .collect();
    let base = model
        .weights
        .iter()
        .zip(&model.feature_means)
        .map(|(w, m)| w * m)
        .sum::<f64>()
        + model.bias;
    let margin = model.predict_margin(x)?;
    Ok(ShapAttribution {
        record_id: record_id.to_string(),
        phi,
        base_value: base,
        margin,
    })
}

/// Attribution for either family.
pub fn explain_instance(
    model: &TabularModel,
    x: &[f64],
    record_id: &str,
) -> Result<ShapAttribution, ExplainError> {
    match model {
        TabularModel::Gbdt(e) => tree_shap(e, x, record_id),
        TabularModel::Logistic(m) => linear_shap(m, x, record_id),
    }
}

/// Instance-parallel attribution over a dataset; row order is preserved.
pub fn explain_dataset(
    model: &TabularModel,
    data: &crate::tabular::Dataset,
) -> Result<Vec<ShapAttribution>, ExplainError> {
    if let TabularModel::Gbdt(e) = model {
        check_covers(e)?;
    }
    (0..data.n_rows())
        .into_par_iter()
        .map(|i| explain_instance(model, &data.row(i), &data.record_ids[i]))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct GlobalImportanceRow {
    pub code: String,
    pub mean_abs_phi: f64,
    pub rank: usize,
    pub cumulative_pct: f64,
}

/// Mean |phi| per code, ranked descending (catalog order on ties), with the
/// running share of the total in percent.
pub fn global_importance(
    attributions: &[ShapAttribution],
    codes: &[String],
) -> Result<Vec<GlobalImportanceRow>, ExplainError> {
    if attributions.is_empty() {
        return Err(ExplainError::EmptyInput);
    }
    let d = codes.len();
    let mut mean_abs = vec![0.0f64; d];
    for a in attributions {
        if a.phi.len() != d {
            return Err(ExplainError::DimensionMismatch {
                expected: d,
                found: a.phi.len(),
            });
        }
        for (m, p) in mean_abs.iter_mut().zip(&a.phi) {
            *m += p.abs();
        }
    }
    let n = attributions.len() as f64;
    for m in mean_abs.iter_mut() {
        *m /= n;
    }
    let total: f64 = mean_abs.iter().sum();
    if total == 0.0 {
        return Err(ExplainError::EmptyTotal);
    }

    let mut order: Vec<usize> = (0..d).collect();
    // stable: ties keep catalog order
    order.sort_by(|&a, &b| mean_abs[b].partial_cmp(&mean_abs[a]).unwrap());
    let mut rows = Vec::with_capacity(d);
    let mut running = 0.0;
    for (rank0, &i) in order.iter().enumerate() {
        running += mean_abs[i];
        rows.push(GlobalImportanceRow {
            code: codes[i].clone(),
            mean_abs_phi: mean_abs[i],
            rank: rank0 + 1,
            cumulative_pct: running / total * 100.0,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct BeeswarmRow {
    pub code: String,
    pub record_id: String,
    pub phi: f64,
    pub predictor_value: f64,
}

/// Long-form rows restricted to the first `top_n` codes of `ranking`.
pub fn beeswarm_data(
    attributions: &[ShapAttribution],
    data: &crate::tabular::Dataset,
    ranking: &[String],
    top_n: usize,
) -> Result<Vec<BeeswarmRow>, ExplainError> {
    if top_n == 0 || top_n > data.n_features() || top_n > ranking.len() {
        return Err(ExplainError::BadTopN {
            top_n,
            limit: data.n_features().min(ranking.len()),
        });
    }
    if attributions.len() != data.n_rows() {
        return Err(ExplainError::AlignmentMismatch(attributions.len().min(data.n_rows())));
    }
    let mut rows = Vec::with_capacity(top_n * attributions.len());
    for code in &ranking[..top_n] {
        let f = data
            .codes
            .iter()
            .position(|c| c == code)
            .ok_or_else(|| ExplainError::UnknownCode(code.clone()))?;
        for (i, a) in attributions.iter().enumerate() {
            if a.record_id != data.record_ids[i] {
                return Err(ExplainError::AlignmentMismatch(i));
            }
            rows.push(BeeswarmRow {
                code: code.clone(),
                record_id: a.record_id.clone(),
                phi: a.phi[f],
                predictor_value: data.columns[f][i],
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct DependencePoint {
    pub record_id: String,
    pub predictor_value: f64,
    pub phi: f64,
    pub density: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DependenceTable {
    pub code: String,
    /// Gaussian-kernel bandwidth on the log10 axis (Silverman's rule).
    pub bandwidth: f64,
    /// Predictor values clamped up to the floor before the log transform.
    pub n_clamped: usize,
    pub lef_threshold: Option<f64>,
    pub diagnosis_threshold: Option<f64>,
    pub points: Vec<DependencePoint>,
}

const LOG_CLAMP_FLOOR: f64 = 1e-12;

fn quantile_of_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
    }
}

/// Per-record (value, phi) pairs for one code plus a Gaussian kernel density
/// estimated over log10(value). Values at or below the clamp floor are
/// clamped rather than rejected. The two reference thresholds ride along as
/// metadata.
pub fn dependence_data(
    attributions: &[ShapAttribution],
    data: &crate::tabular::Dataset,
    code: &str,
    lef_threshold: Option<f64>,
    diagnosis_threshold: Option<f64>,
) -> Result<DependenceTable, ExplainError> {
    if attributions.is_empty() {
        return Err(ExplainError::EmptyInput);
    }
    if attributions.len() != data.n_rows() {
        return Err(ExplainError::AlignmentMismatch(attributions.len().min(data.n_rows())));
    }
    let f = data
        .codes
        .iter()
        .position(|c| c == code)
        .ok_or_else(|| ExplainError::UnknownCode(code.to_string()))?;

    let mut n_clamped = 0usize;
    let logs: Vec<f64> = data.columns[f]
        .iter()
        .map(|&v| {
            if v < LOG_CLAMP_FLOOR {
                n_clamped += 1;
                LOG_CLAMP_FLOOR.log10()
            } else {
                v.log10()
            }
        })
        .collect();

    let n = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / n;
    let sd = (logs.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut sorted = logs.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let iqr = quantile_of_sorted(&sorted, 0.75) - quantile_of_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let mut bandwidth = 0.9 * spread * n.powf(-0.2);
    if bandwidth <= 0.0 || bandwidth.is_nan() {
        bandwidth = 1e-9; // all values identical
    }

    let norm = 1.0 / (n * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let points = attributions
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let u = logs[i];
            let density = norm
                * logs
                    .iter()
                    .map(|&uj| (-0.5 * ((u - uj) / bandwidth).powi(2)).exp())
                    .sum::<f64>();
            DependencePoint {
                record_id: a.record_id.clone(),
                predictor_value: data.columns[f][i],
                phi: a.phi[f],
                density,
            }
        })
        .collect();
    Ok(DependenceTable {
        code: code.to_string(),
        bandwidth,
        n_clamped,
        lef_threshold,
        diagnosis_threshold,
        points,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct WaterfallEntry {
    pub code: String,
    pub phi: f64,
    pub predictor_value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lef_threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnosis_threshold: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct WaterfallReport {
    pub record_id: String,
    pub base_value: f64,
    pub margin: f64,
    pub probability: f64,
    /// Top contributions by |phi|, descending.
    pub top: Vec<WaterfallEntry>,
    /// Number of features aggregated into `other_phi_sum`.
    pub n_other: usize,
    pub other_phi_sum: f64,
}

/// Local explanation: the `top_n` codes by |phi| plus one aggregate row for
/// the remainder; entries carry the raw predictor value and both reference
/// thresholds where known.
pub fn waterfall_local(
    model: &TabularModel,
    x: &[f64],
    record_id: &str,
    top_n: usize,
    lef_thresholds: &HashMap<String, f64>,
    diagnosis_thresholds: &HashMap<String, f64>,
) -> Result<WaterfallReport, ExplainError> {
    let codes = model.feature_codes();
    if top_n == 0 || top_n >= codes.len() {
        return Err(ExplainError::BadTopN {
            top_n,
            limit: codes.len(),
        });
    }
    let a = explain_instance(model, x, record_id)?;
    let mut order: Vec<usize> = (0..codes.len()).collect();
    // ties keep catalog (feature) order
    order.sort_by(|&i, &j| a.phi[j].abs().partial_cmp(&a.phi[i].abs()).unwrap());
    let top: Vec<WaterfallEntry> = order[..top_n]
        .iter()
        .map(|&i| WaterfallEntry {
            code: codes[i].clone(),
            phi: a.phi[i],
            predictor_value: x[i],
            lef_threshold: lef_thresholds.get(&codes[i]).copied(),
            diagnosis_threshold: diagnosis_thresholds.get(&codes[i]).copied(),
        })
        .collect();
    let other_phi_sum: f64 = order[top_n..].iter().map(|&i| a.phi[i]).sum();
    Ok(WaterfallReport {
        record_id: record_id.to_string(),
        base_value: a.base_value,
        margin: a.margin,
        probability: sigmoid(a.margin),
        top,
        n_other: codes.len() - top_n,
        other_phi_sum,
    })
}

pub fn write_global_csv(path: &Path, rows: &[GlobalImportanceRow]) -> Result<(), ExplainError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "rank,code,mean_abs_phi,cumulative_pct")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.rank, r.code, r.mean_abs_phi, r.cumulative_pct)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_beeswarm_csv(path: &Path, rows: &[BeeswarmRow]) -> Result<(), ExplainError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "code,record_id,phi,predictor_value")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.code, r.record_id, r.phi, r.predictor_value)?;
    }
    w.flush()?;
    Ok(())
}

/// The reference thresholds repeat on every row so the file stays
/// self-contained for plotting.
pub fn write_dependence_csv(path: &Path, table: &DependenceTable) -> Result<(), ExplainError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(
        w,
        "record_id,predictor_value,phi,density,lef_threshold,diagnosis_threshold"
    )?;
    let lef = table.lef_threshold.map(|v| v.to_string()).unwrap_or_default();
    let diag = table
        .diagnosis_threshold
        .map(|v| v.to_string())
        .unwrap_or_default();
    for p in &table.points {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            p.record_id, p.predictor_value, p.phi, p.density, lef, diag
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_local_json(path: &Path, report: &WaterfallReport) -> Result<(), ExplainError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, report)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::{Dataset, LogisticModel, TreeNode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn leaf(value: f64, cover: f64) -> TreeNode {
        TreeNode {
            feature_index: -1,
            threshold: 0.0,
            left: -1,
            right: -1,
            leaf_value: value,
            cover,
        }
    }

    fn split(feature: usize, threshold: f64, left: i32, right: i32, cover: f64) -> TreeNode {
        TreeNode {
            feature_index: feature as i32,
            threshold,
            left,
            right,
            leaf_value: 0.0,
            cover,
        }
    }

    fn ensemble_of(trees: Vec<Tree>, n_features: usize) -> TreeEnsemble {
        let n = trees.len();
        TreeEnsemble {
            trees,
            base_score_logodds: 0.0,
            learning_rate: 1.0,
            max_depth: 8,
            leaf_lambda: 1.0,
            n_trees_used: n,
            feature_codes: (0..n_features).map(|f| format!("F{f}")).collect(),
            seed: 0,
        }
    }

    #[test]
    fn depth1_tree_analytic_shapley() {
        // split on feature 0 at 0.5, half the cover on each side,
        // leaves +1 (left) and -1 (right); instance routed left
        let tree = Tree {
            nodes: vec![split(0, 0.5, 1, 2, 2.0), leaf(1.0, 1.0), leaf(-1.0, 1.0)],
        };
        let e = ensemble_of(vec![tree], 3);
        let a = tree_shap(&e, &[0.3, 0.9, 0.9], "r").unwrap();
        assert!((a.phi[0] - 1.0).abs() < 1e-12);
        assert_eq!(a.phi[1], 0.0);
        assert_eq!(a.phi[2], 0.0);
        assert!(a.base_value.abs() < 1e-12);
        assert!(a.additivity_gap() <= 1e-9);
    }

    #[test]
    fn depth0_tree_has_no_attribution() {
        let tree = Tree {
            nodes: vec![leaf(0.7, 5.0)],
        };
        let e = ensemble_of(vec![tree], 2);
        let a = tree_shap(&e, &[0.1, 0.2], "r").unwrap();
        assert_eq!(a.phi, vec![0.0, 0.0]);
        assert_eq!(a.base_value, 0.7);
        assert_eq!(a.margin, 0.7);
    }

    #[test]
    fn missing_cover_is_rejected() {
        let tree = Tree {
            nodes: vec![split(0, 0.5, 1, 2, 2.0), leaf(1.0, 0.0), leaf(-1.0, 1.0)],
        };
        let e = ensemble_of(vec![tree], 1);
        assert!(matches!(
            tree_shap(&e, &[0.3], "r"),
            Err(ExplainError::MissingCover { .. })
        ));
    }

    // --- brute-force subset-enumeration oracle ---

    fn tree_features(tree: &Tree) -> Vec<usize> {
        let mut fs: Vec<usize> = tree
            .nodes
            .iter()
            .filter(|n| !n.is_leaf())
            .map(|n| n.feature_index as usize)
            .collect();
        fs.sort_unstable();
        fs.dedup();
        fs
    }

    /// Path-dependent conditional expectation with features in `mask` fixed
    /// to the instance values.
    fn cond_expect(tree: &Tree, x: &[f64], features: &[usize], mask: u32, node: usize) -> f64 {
        let n = &tree.nodes[node];
        if n.is_leaf() {
            return n.leaf_value;
        }
        let f = n.feature_index as usize;
        let pos = features.iter().position(|&g| g == f).unwrap();
        if mask & (1 << pos) != 0 {
            let next = if x[f] < n.threshold { n.left } else { n.right } as usize;
            cond_expect(tree, x, features, mask, next)
        } else {
            let l = n.left as usize;
            let r = n.right as usize;
            (tree.nodes[l].cover * cond_expect(tree, x, features, mask, l)
                + tree.nodes[r].cover * cond_expect(tree, x, features, mask, r))
                / n.cover
        }
    }

    fn factorial(k: usize) -> f64 {
        (1..=k).map(|v| v as f64).product()
    }

    fn brute_force_shapley(tree: &Tree, x: &[f64], n_features: usize) -> Vec<f64> {
        let features = tree_features(tree);
        let m = features.len();
        assert!(m <= 20, "oracle only supports small trees");
        let mut v = vec![0.0f64; 1 << m];
        for (mask, value) in v.iter_mut().enumerate() {
            *value = cond_expect(tree, x, &features, mask as u32, 0);
        }
        let mut phi = vec![0.0; n_features];
        for (pos, &f) in features.iter().enumerate() {
            let bit = 1u32 << pos;
            let mut total = 0.0;
            for mask in 0u32..(1 << m) {
                if mask & bit != 0 {
                    continue;
                }
                let s = mask.count_ones() as usize;
                let weight = factorial(s) * factorial(m - s - 1) / factorial(m);
                total += weight * (v[(mask | bit) as usize] - v[mask as usize]);
            }
            phi[f] = total;
        }
        phi
    }

    fn random_tree(rng: &mut ChaCha8Rng, n_features: usize, max_depth: usize) -> Tree {
        fn grow(
            rng: &mut ChaCha8Rng,
            nodes: &mut Vec<TreeNode>,
            depth: usize,
            max_depth: usize,
            n_features: usize,
        ) -> usize {
            let id = nodes.len();
            if depth >= max_depth || rng.gen_bool(0.25) {
                nodes.push(leaf(rng.gen_range(-2.0..2.0), 0.0));
                return id;
            }
            nodes.push(split(rng.gen_range(0..n_features), rng.gen_range(0.1..0.9), 0, 0, 0.0));
            let l = grow(rng, nodes, depth + 1, max_depth, n_features);
            let r = grow(rng, nodes, depth + 1, max_depth, n_features);
            nodes[id].left = l as i32;
            nodes[id].right = r as i32;
            id
        }
        fn assign_covers(rng: &mut ChaCha8Rng, nodes: &mut Vec<TreeNode>, id: usize) -> f64 {
            if nodes[id].is_leaf() {
                let c = rng.gen_range(1.0..50.0f64).round();
                nodes[id].cover = c;
                return c;
            }
            let l = nodes[id].left as usize;
            let r = nodes[id].right as usize;
            let c = assign_covers(rng, nodes, l) + assign_covers(rng, nodes, r);
            nodes[id].cover = c;
            c
        }
        let mut nodes = Vec::new();
        grow(rng, &mut nodes, 0, max_depth, n_features);
        assign_covers(rng, &mut nodes, 0);
        Tree { nodes }
    }

    #[test]
    fn matches_brute_force_on_random_trees() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n_features = 12;
        for _ in 0..40 {
            let tree = random_tree(&mut rng, n_features, 4);
            for _ in 0..10 {
                let x: Vec<f64> = (0..n_features).map(|_| rng.gen::<f64>()).collect();
                let fast = tree_shap_single(&tree, &x, n_features);
                let slow = brute_force_shapley(&tree, &x, n_features);
                for (a, b) in fast.iter().zip(&slow) {
                    assert!((a - b).abs() <= 1e-10, "fast {a} vs brute {b}");
                }
            }
        }
    }

    #[test]
    fn unused_features_have_exactly_zero_phi() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let tree = random_tree(&mut rng, 4, 3);
        let used = tree_features(&tree);
        let e = ensemble_of(vec![tree], 9);
        let x: Vec<f64> = (0..9).map(|_| rng.gen::<f64>()).collect();
        let a = tree_shap(&e, &x, "r").unwrap();
        for f in 0..9 {
            if !used.contains(&f) {
                assert_eq!(a.phi[f], 0.0);
            }
        }
    }

    #[test]
    fn ensemble_phi_is_sum_of_per_tree_phi() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let t1 = random_tree(&mut rng, 6, 3);
        let t2 = random_tree(&mut rng, 6, 4);
        let t3 = random_tree(&mut rng, 6, 2);
        let x: Vec<f64> = (0..6).map(|_| rng.gen::<f64>()).collect();
        let mut summed = [0.0; 6];
        for t in [&t1, &t2, &t3] {
            for (s, p) in summed.iter_mut().zip(tree_shap_single(t, &x, 6)) {
                *s += p;
            }
        }
        let e = ensemble_of(vec![t1, t2, t3], 6);
        let a = tree_shap(&e, &x, "r").unwrap();
        for (s, p) in summed.iter().zip(&a.phi) {
            assert!((s - p).abs() <= 1e-12);
        }
        assert!(a.additivity_gap() <= 1e-9);
    }

    #[test]
    fn linear_shap_additivity_is_exact() {
        let model = LogisticModel {
            weights: vec![0.5, -1.5, 2.0],
            bias: 0.25,
            l2_lambda: 0.1,
            feature_codes: vec!["A".into(), "B".into(), "C".into()],
            feature_means: vec![0.4, 0.3, 0.2],
        };
        let a = linear_shap(&model, &[0.9, 0.1, 0.6], "r").unwrap();
        assert!(a.additivity_gap() <= 1e-12);
    }

    #[test]
    fn global_importance_cumulative_arithmetic() {
        let codes: Vec<String> = vec!["A".into(), "B".into(), "C".into()];
        let attributions = vec![ShapAttribution {
            record_id: "r0".into(),
            phi: vec![2.0, 1.0, -1.0],
            base_value: 0.0,
            margin: 2.0,
        }];
        let rows = global_importance(&attributions, &codes).unwrap();
        assert_eq!(rows[0].code, "A");
        assert_eq!(rows[0].mean_abs_phi, 2.0); // single record: |phi|
        let pct: Vec<f64> = rows.iter().map(|r| r.cumulative_pct).collect();
        assert_eq!(pct, vec![50.0, 75.0, 100.0]);
        // monotone, ends at 100
        assert!(pct.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*pct.last().unwrap(), 100.0);
    }

    #[test]
    fn global_importance_degenerate_cases() {
        let codes: Vec<String> = vec!["A".into()];
        assert!(matches!(
            global_importance(&[], &codes),
            Err(ExplainError::EmptyInput)
        ));
        let zero = vec![ShapAttribution {
            record_id: "r".into(),
            phi: vec![0.0],
            base_value: 0.0,
            margin: 0.0,
        }];
        assert!(matches!(
            global_importance(&zero, &codes),
            Err(ExplainError::EmptyTotal)
        ));
    }

    fn small_dataset(n: usize, d: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Dataset {
            codes: (0..d).map(|f| format!("F{f}")).collect(),
            columns: (0..d).map(|_| (0..n).map(|_| rng.gen::<f64>()).collect()).collect(),
            labels: (0..n).map(|i| i % 3 == 0).collect(),
            record_ids: (0..n).map(|i| format!("r{i}")).collect(),
        }
    }

    #[test]
    fn beeswarm_shape_and_precision_round_trip() {
        let data = small_dataset(5, 12, 1);
        let attributions: Vec<ShapAttribution> = (0..5)
            .map(|i| ShapAttribution {
                record_id: format!("r{i}"),
                phi: (0..12).map(|f| (i * 12 + f) as f64 * 0.017 - 0.3).collect(),
                base_value: 0.0,
                margin: 0.0,
            })
            .collect();
        let ranking: Vec<String> = data.codes.clone();
        let rows = beeswarm_data(&attributions, &data, &ranking, 10).unwrap();
        assert_eq!(rows.len(), 50);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bee.csv");
        write_beeswarm_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        for (line, row) in text.lines().skip(1).zip(&rows) {
            let phi: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
            assert_eq!(phi, row.phi, "full-precision round trip");
        }
    }

    #[test]
    fn dependence_density_properties() {
        let mut data = small_dataset(60, 2, 2);
        // two records share a value: equal density
        data.columns[0][0] = 0.25;
        data.columns[0][1] = 0.25;
        let attributions: Vec<ShapAttribution> = (0..60)
            .map(|i| ShapAttribution {
                record_id: format!("r{i}"),
                phi: vec![0.1, 0.0],
                base_value: 0.0,
                margin: 0.1,
            })
            .collect();
        let t = dependence_data(&attributions, &data, "F0", Some(0.003641), Some(0.370)).unwrap();
        assert_eq!(t.points[0].density, t.points[1].density);
        assert_eq!(t.lef_threshold, Some(0.003641));
        assert_eq!(t.diagnosis_threshold, Some(0.370));

        // the KDE integrates to ~1 over the log axis
        let logs: Vec<f64> = data.columns[0].iter().map(|v| v.log10()).collect();
        let (lo, hi) = logs
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &u| (a.min(u), b.max(u)));
        let (lo, hi) = (lo - 6.0 * t.bandwidth, hi + 6.0 * t.bandwidth);
        let steps = 20_000;
        let du = (hi - lo) / steps as f64;
        let n = logs.len() as f64;
        let norm = 1.0 / (n * t.bandwidth * (2.0 * std::f64::consts::PI).sqrt());
        let integral: f64 = (0..steps)
            .map(|k| {
                let u = lo + (k as f64 + 0.5) * du;
                norm * logs
                    .iter()
                    .map(|&uj| (-0.5 * ((u - uj) / t.bandwidth).powi(2)).exp())
                    .sum::<f64>()
                    * du
            })
            .sum();
        assert!((integral - 1.0).abs() <= 1e-2, "integral {integral}");
    }

    #[test]
    fn dependence_clamps_non_positive_values() {
        let mut data = small_dataset(10, 1, 3);
        data.columns[0][4] = 0.0;
        let attributions: Vec<ShapAttribution> = (0..10)
            .map(|i| ShapAttribution {
                record_id: format!("r{i}"),
                phi: vec![0.0],
                base_value: 0.0,
                margin: 0.0,
            })
            .collect();
        let t = dependence_data(&attributions, &data, "F0", None, None).unwrap();
        assert_eq!(t.n_clamped, 1);
        assert!(t.points[4].density.is_finite());
    }

    #[test]
    fn waterfall_partition_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let trees: Vec<Tree> = (0..5).map(|_| random_tree(&mut rng, 12, 4)).collect();
        let e = ensemble_of(trees, 12);
        let model = TabularModel::Gbdt(e);
        let x: Vec<f64> = (0..12).map(|_| rng.gen::<f64>()).collect();
        let lef = HashMap::new();
        let diag = HashMap::new();
        let w = waterfall_local(&model, &x, "r9", 10, &lef, &diag).unwrap();
        assert_eq!(w.top.len(), 10);
        assert_eq!(w.n_other, 2);
        let total: f64 = w.top.iter().map(|t| t.phi).sum::<f64>() + w.other_phi_sum;
        assert!((w.base_value + total - w.margin).abs() <= 1e-9);

        // aggregate equals sum(all) - sum(top)
        let a = explain_instance(&model, &x, "r9").unwrap();
        let all: f64 = a.phi.iter().sum();
        let top: f64 = w.top.iter().map(|t| t.phi).sum();
        assert!((w.other_phi_sum - (all - top)).abs() <= 1e-12);

        assert!(matches!(
            waterfall_local(&model, &x, "r9", 12, &lef, &diag),
            Err(ExplainError::BadTopN { .. })
        ));
    }

    #[test]
    fn waterfall_ranks_dominant_phi_first() {
        let model = TabularModel::Logistic(LogisticModel {
            weights: vec![0.0, 5.0, 0.0],
            bias: 0.0,
            l2_lambda: 0.1,
            feature_codes: vec!["A".into(), "B".into(), "C".into()],
            feature_means: vec![0.5, 0.5, 0.5],
        });
        let w = waterfall_local(
            &model,
            &[0.9, 0.9, 0.9],
            "r",
            1,
            &HashMap::new(),
            &HashMap::new(),
        )
        .unwrap();
        assert_eq!(w.top[0].code, "B");
    }
}
