//! Second-order gradient boosting on logistic loss with exact greedy split
//! finding over sorted feature values.
//!
//! Per candidate split the gain is computed from gradient sums G and Hessian
//! sums H, and leaves take the value `-G / (H + lambda)` scaled by the
//! learning rate. Training stops when validation log-loss fails to improve
//! for `early_stopping_rounds` consecutive rounds; the best-validation round
//! is retained.

use super::{logloss_mean, sigmoid, Dataset, TabularError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// One tree node. Internal nodes route `x[feature] < threshold` to `left`;
/// leaves carry `feature_index == -1` and a log-odds `leaf_value`. `cover` is
/// the training-instance weight that reached the node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "NodeTuple", into = "NodeTuple")]
pub struct TreeNode {
    pub feature_index: i32,
    pub threshold: f64,
    pub left: i32,
    pub right: i32,
    pub leaf_value: f64,
    pub cover: f64,
}

#[derive(Serialize, Deserialize)]
struct NodeTuple(i32, f64, i32, i32, f64, f64);

impl From<NodeTuple> for TreeNode {
    fn from(t: NodeTuple) -> Self {
        TreeNode {
            feature_index: t.0,
            threshold: t.1,
            left: t.2,
            right: t.3,
            leaf_value: t.4,
            cover: t.5,
        }
    }
}

impl From<TreeNode> for NodeTuple {
    fn from(n: TreeNode) -> Self {
        NodeTuple(n.feature_index, n.threshold, n.left, n.right, n.leaf_value, n.cover)
    }
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.feature_index < 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    /// Index of the leaf an instance routes to.
    pub fn route(&self, x: &[f64]) -> usize {
        let mut i = 0usize;
        loop {
            let n = &self.nodes[i];
            if n.is_leaf() {
                return i;
            }
            i = if x[n.feature_index as usize] < n.threshold {
                n.left as usize
            } else {
                n.right as usize
            };
        }
    }

    pub fn leaf_value(&self, x: &[f64]) -> f64 {
        self.nodes[self.route(x)].leaf_value
    }

    /// Cover-weighted mean of leaf values (the tree's output under an empty
    /// conditioning set).
    pub fn mean_value(&self) -> f64 {
        let total = self.nodes[0].cover;
        self.nodes
            .iter()
            .filter(|n| n.is_leaf())
            .map(|n| n.cover * n.leaf_value)
            .sum::<f64>()
            / total
    }

    pub fn depth(&self) -> usize {
        fn rec(nodes: &[TreeNode], i: usize) -> usize {
            let n = &nodes[i];
            if n.is_leaf() {
                0
            } else {
                1 + rec(nodes, n.left as usize).max(rec(nodes, n.right as usize))
            }
        }
        rec(&self.nodes, 0)
    }

    /// cover(parent) == cover(left) + cover(right) on every internal node.
    pub fn covers_consistent(&self) -> bool {
        self.nodes.iter().all(|n| {
            n.is_leaf()
                || (self.nodes[n.left as usize].cover + self.nodes[n.right as usize].cover
                    - n.cover)
                    .abs()
                    < 1e-9
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    pub trees: Vec<Tree>,
    pub base_score_logodds: f64,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub leaf_lambda: f64,
    pub n_trees_used: usize,
    pub feature_codes: Vec<String>,
    pub seed: u64,
}

impl TreeEnsemble {
    pub fn predict_margin(&self, x: &[f64]) -> Result<f64, TabularError> {
        if x.len() != self.feature_codes.len() {
            return Err(TabularError::DimensionMismatch {
                expected: self.feature_codes.len(),
                found: x.len(),
            });
        }
        let mut m = self.base_score_logodds;
        for t in &self.trees[..self.n_trees_used] {
            m += t.leaf_value(x);
        }
        Ok(m)
    }

    pub fn max_tree_depth(&self) -> usize {
        self.trees.iter().map(|t| t.depth()).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbdtParams {
    pub learning_rate: f64,
    pub max_depth: usize,
    pub n_estimators: usize,
    pub early_stopping_rounds: usize,
    pub leaf_lambda: f64,
    pub seed: u64,
}

/// Per-round validation log-loss, kept out of the serialized model.
#[derive(Debug, Clone)]
pub struct GbdtTrainLog {
    /// Entry 0 is the loss of the base score alone; entry r the loss after r
    /// trees.
    pub val_logloss: Vec<f64>,
    pub best_round: usize,
    pub rounds_trained: usize,
}

#[derive(Clone, Copy)]
struct SplitCandidate {
    gain: f64,
    feature: usize,
    threshold: f64,
    left_g: f64,
    left_h: f64,
    left_count: usize,
}

#[derive(Clone, Copy)]
struct NodeStats {
    node_id: usize,
    g: f64,
    h: f64,
    count: usize,
}

fn leaf_weight(g: f64, h: f64, lambda: f64) -> f64 {
    -g / (h + lambda)
}

fn gain_term(g: f64, h: f64, lambda: f64) -> f64 {
    g * g / (h + lambda)
}

fn provisional_leaf(cover: f64) -> TreeNode {
    TreeNode {
        feature_index: -1,
        threshold: 0.0,
        left: -1,
        right: -1,
        leaf_value: 0.0,
        cover,
    }
}

/// Grow one tree level-wise with exact greedy splits. Returns the nodes plus
/// the final leaf id of every training sample. Leaf values come out already
/// scaled by the learning rate.
fn build_tree(
    columns: &[Vec<f64>],
    presort: &[Vec<u32>],
    grad: &[f64],
    hess: &[f64],
    max_depth: usize,
    lambda: f64,
    learning_rate: f64,
) -> (Vec<TreeNode>, Vec<u32>) {
    let n = grad.len();
    let n_features = columns.len();

    let root_g: f64 = grad.iter().sum();
    let root_h: f64 = hess.iter().sum();
    let mut nodes = vec![provisional_leaf(n as f64)];
    let mut node_of = vec![0u32; n];
    let mut frontier = vec![NodeStats {
        node_id: 0,
        g: root_g,
        h: root_h,
        count: n,
    }];

    fn finalize(nodes: &mut [TreeNode], s: &NodeStats, lambda: f64, learning_rate: f64) {
        nodes[s.node_id].leaf_value = leaf_weight(s.g, s.h, lambda) * learning_rate;
    }

    for _depth in 0..max_depth {
        if frontier.is_empty() {
            break;
        }
        // node id -> frontier slot
        let mut slot_of = vec![usize::MAX; nodes.len()];
        for (slot, s) in frontier.iter().enumerate() {
            slot_of[s.node_id] = slot;
        }

        // best candidate per frontier slot for one feature; the scan order is
        // fixed by the presort, so accumulation is deterministic
        let scan_feature = |f: usize| -> Vec<Option<SplitCandidate>> {
            let col = &columns[f];
            let mut best: Vec<Option<SplitCandidate>> = vec![None; frontier.len()];
            let mut acc_g = vec![0.0f64; frontier.len()];
            let mut acc_h = vec![0.0f64; frontier.len()];
            let mut acc_n = vec![0usize; frontier.len()];
            let mut last = vec![0.0f64; frontier.len()];
            for &idx in &presort[f] {
                let i = idx as usize;
                let slot = slot_of[node_of[i] as usize];
                if slot == usize::MAX {
                    continue;
                }
                let v = col[i];
                if acc_n[slot] > 0 && v > last[slot] {
                    let threshold = last[slot] + (v - last[slot]) / 2.0;
                    // the midpoint must actually separate the two groups
                    if threshold > last[slot] && threshold <= v {
                        let s = &frontier[slot];
                        let gl = acc_g[slot];
                        let hl = acc_h[slot];
                        let gain = 0.5
                            * (gain_term(gl, hl, lambda)
                                + gain_term(s.g - gl, s.h - hl, lambda)
                                - gain_term(s.g, s.h, lambda));
                        let better = match best[slot] {
                            None => gain > 0.0,
                            Some(b) => gain > b.gain,
                        };
                        if better {
                            best[slot] = Some(SplitCandidate {
                                gain,
                                feature: f,
                                threshold,
                                left_g: gl,
                                left_h: hl,
                                left_count: acc_n[slot],
                            });
                        }
                    }
                }
                acc_g[slot] += grad[i];
                acc_h[slot] += hess[i];
                acc_n[slot] += 1;
                last[slot] = v;
            }
            best
        };

        let per_feature: Vec<Vec<Option<SplitCandidate>>> =
            (0..n_features).into_par_iter().map(scan_feature).collect();

        // deterministic reduction: highest gain wins, lowest feature index on
        // ties (the per-feature scan already kept the smallest threshold)
        let mut chosen: Vec<Option<SplitCandidate>> = vec![None; frontier.len()];
        for feature_best in &per_feature {
            for (slot, cand) in feature_best.iter().enumerate() {
                if let Some(c) = cand {
                    let take = match chosen[slot] {
                        None => true,
                        Some(cur) => c.gain > cur.gain,
                    };
                    if take {
                        chosen[slot] = Some(*c);
                    }
                }
            }
        }

        let mut next_frontier = Vec::new();
        let mut split_lookup: Vec<Option<(usize, f64, u32, u32)>> = vec![None; nodes.len()];
        for (slot, cand) in chosen.iter().enumerate() {
            let s = frontier[slot];
            match cand {
                Some(c) if c.gain > 0.0 => {
                    let left_id = nodes.len();
                    let right_id = nodes.len() + 1;
                    nodes[s.node_id].feature_index = c.feature as i32;
                    nodes[s.node_id].threshold = c.threshold;
                    nodes[s.node_id].left = left_id as i32;
                    nodes[s.node_id].right = right_id as i32;
                    nodes.push(provisional_leaf(c.left_count as f64));
                    nodes.push(provisional_leaf((s.count - c.left_count) as f64));
                    next_frontier.push(NodeStats {
                        node_id: left_id,
                        g: c.left_g,
                        h: c.left_h,
                        count: c.left_count,
                    });
                    next_frontier.push(NodeStats {
                        node_id: right_id,
                        g: s.g - c.left_g,
                        h: s.h - c.left_h,
                        count: s.count - c.left_count,
                    });
                    split_lookup[s.node_id] =
                        Some((c.feature, c.threshold, left_id as u32, right_id as u32));
                }
                _ => finalize(&mut nodes, &s, lambda, learning_rate),
            }
        }

        if next_frontier.is_empty() {
            frontier.clear();
            break;
        }
        for (i, nf) in node_of.iter_mut().enumerate() {
            if let Some((f, thr, left, right)) = split_lookup[*nf as usize] {
                *nf = if columns[f][i] < thr { left } else { right };
            }
        }
        frontier = next_frontier;
    }
    for s in &frontier {
        finalize(&mut nodes, s, lambda, learning_rate);
    }
    (nodes, node_of)
}

pub fn train_gbdt(
    train: &Dataset,
    val: &Dataset,
    params: &GbdtParams,
) -> Result<(TreeEnsemble, GbdtTrainLog), TabularError> {
    if train.n_features() == 0 {
        return Err(TabularError::EmptyFeatureSet);
    }
    train.check_finite()?;
    val.check_finite()?;
    let n = train.n_rows();
    let n_pos = train.labels.iter().filter(|&&y| y).count();
    if n_pos == 0 || n_pos == n {
        return Err(TabularError::DegenerateLabels);
    }
    let val_pos = val.labels.iter().filter(|&&y| y).count();
    if val.n_rows() == 0 || val_pos == 0 || val_pos == val.n_rows() {
        return Err(TabularError::DegenerateLabels);
    }
    if params.n_estimators == 0 || params.early_stopping_rounds == 0 {
        return Err(TabularError::BadConfig(
            "n_estimators and early_stopping_rounds must be >= 1".to_string(),
        ));
    }

    let prevalence = n_pos as f64 / n as f64;
    let base = (prevalence / (1.0 - prevalence)).ln();

    let presort: Vec<Vec<u32>> = (0..train.n_features())
        .into_par_iter()
        .map(|f| {
            let col = &train.columns[f];
            let mut idx: Vec<u32> = (0..n as u32).collect();
            idx.sort_unstable_by(|&a, &b| {
                col[a as usize]
                    .partial_cmp(&col[b as usize])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            idx
        })
        .collect();

    let mut margins = vec![base; n];
    let mut val_margins = vec![base; val.n_rows()];
    let mut grad = vec![0.0f64; n];
    let mut hess = vec![0.0f64; n];
    let mut trees: Vec<Vec<TreeNode>> = Vec::new();

    let mut val_logloss = vec![logloss_mean(&val_margins, &val.labels)];
    let mut best_loss = val_logloss[0];
    let mut best_round = 0usize;
    let mut rounds_trained = 0usize;

    let val_rows: Vec<Vec<f64>> = (0..val.n_rows()).map(|i| val.row(i)).collect();

    for round in 1..=params.n_estimators {
        for i in 0..n {
            let p = sigmoid(margins[i]);
            grad[i] = p - if train.labels[i] { 1.0 } else { 0.0 };
            hess[i] = p * (1.0 - p);
        }
        let (nodes, node_of) = build_tree(
            &train.columns,
            &presort,
            &grad,
            &hess,
            params.max_depth,
            params.leaf_lambda,
            params.learning_rate,
        );
        for i in 0..n {
            margins[i] += nodes[node_of[i] as usize].leaf_value;
        }
        let tree = Tree { nodes };
        for (m, row) in val_margins.iter_mut().zip(val_rows.iter()) {
            *m += tree.leaf_value(row);
        }
        trees.push(tree.nodes);
        rounds_trained = round;

        let loss = logloss_mean(&val_margins, &val.labels);
        val_logloss.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best_round = round;
        }
        if round - best_round >= params.early_stopping_rounds {
            break;
        }
    }

    trees.truncate(best_round);
    let ensemble = TreeEnsemble {
        trees: trees.into_iter().map(|nodes| Tree { nodes }).collect(),
        base_score_logodds: base,
        learning_rate: params.learning_rate,
        max_depth: params.max_depth,
        leaf_lambda: params.leaf_lambda,
        n_trees_used: best_round,
        feature_codes: train.codes.clone(),
        seed: params.seed,
    };
    Ok((
        ensemble,
        GbdtTrainLog {
            val_logloss,
            best_round,
            rounds_trained,
        },
    ))
}
