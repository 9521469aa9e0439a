//! L2-penalized logistic regression fit by damped Newton iterations.
//!
//! Objective: mean log-loss + (lambda/2) * ||w||^2 with the bias unpenalized,
//! minimized to gradient 2-norm 1e-8. Step halving keeps the objective
//! non-increasing across iterations; the fit is deterministic given inputs.

use super::{logloss_mean, sigmoid, Dataset, TabularError};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub const GRAD_TOL: f64 = 1e-8;
const MAX_ITERATIONS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub l2_lambda: f64,
    pub feature_codes: Vec<String>,
    /// Training-split feature means, recorded for the linear explanation
    /// baseline.
    pub feature_means: Vec<f64>,
}

impl LogisticModel {
    pub fn predict_margin(&self, x: &[f64]) -> Result<f64, TabularError> {
        if x.len() != self.weights.len() {
            return Err(TabularError::DimensionMismatch {
                expected: self.weights.len(),
                found: x.len(),
            });
        }
        Ok(self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias)
    }
}

/// Mean log-loss plus the L2 penalty on the weights.
pub fn logistic_objective(
    columns: &[Vec<f64>],
    labels: &[bool],
    weights: &[f64],
    bias: f64,
    lambda: f64,
) -> f64 {
    let margins = margins_of(columns, labels.len(), weights, bias);
    logloss_mean(&margins, labels)
        + 0.5 * lambda * weights.iter().map(|w| w * w).sum::<f64>()
}

fn margins_of(columns: &[Vec<f64>], n: usize, weights: &[f64], bias: f64) -> Vec<f64> {
    let mut m = vec![bias; n];
    for (w, col) in weights.iter().zip(columns) {
        if *w == 0.0 {
            continue;
        }
        for (mi, v) in m.iter_mut().zip(col) {
            *mi += w * v;
        }
    }
    m
}

/// Gradient of the objective: `(grad_w..., grad_b)`.
pub fn logistic_gradient(
    columns: &[Vec<f64>],
    labels: &[bool],
    weights: &[f64],
    bias: f64,
    lambda: f64,
) -> Vec<f64> {
    let n = labels.len();
    let margins = margins_of(columns, n, weights, bias);
    let residuals: Vec<f64> = margins
        .iter()
        .zip(labels)
        .map(|(&m, &y)| sigmoid(m) - if y { 1.0 } else { 0.0 })
        .collect();
    let inv_n = 1.0 / n as f64;
    let mut grad = Vec::with_capacity(weights.len() + 1);
    for (w, col) in weights.iter().zip(columns) {
        let dot: f64 = residuals.iter().zip(col).map(|(r, v)| r * v).sum();
        grad.push(dot * inv_n + lambda * w);
    }
    grad.push(residuals.iter().sum::<f64>() * inv_n);
    grad
}

pub fn train_logistic(train: &Dataset, lambda: f64) -> Result<LogisticModel, TabularError> {
    if train.n_features() == 0 {
        return Err(TabularError::EmptyFeatureSet);
    }
    train.check_finite()?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(TabularError::BadConfig(format!("bad lambda: {lambda}")));
    }
    let n = train.n_rows();
    let n_pos = train.labels.iter().filter(|&&y| y).count();
    if n_pos == 0 || n_pos == n {
        return Err(TabularError::DegenerateLabels);
    }

    let d = train.n_features();
    let cols = &train.columns;
    let labels = &train.labels;
    let inv_n = 1.0 / n as f64;

    let mut weights = vec![0.0f64; d];
    let mut bias = 0.0f64;
    let mut objective = logistic_objective(cols, labels, &weights, bias, lambda);

    let mut converged = false;
    for _iter in 0..MAX_ITERATIONS {
        let grad = logistic_gradient(cols, labels, &weights, bias, lambda);
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if grad_norm <= GRAD_TOL {
            converged = true;
            break;
        }

        // Hessian over (w, b): X~' S X~ / n with lambda on the weight block
        let margins = margins_of(cols, n, &weights, bias);
        let s: Vec<f64> = margins
            .iter()
            .map(|&m| {
                let p = sigmoid(m);
                p * (1.0 - p)
            })
            .collect();
        let mut hess = DMatrix::zeros(d + 1, d + 1);
        for a in 0..d {
            for b in a..d {
                let v: f64 = (0..n).map(|i| s[i] * cols[a][i] * cols[b][i]).sum::<f64>() * inv_n;
                hess[(a, b)] = v;
                hess[(b, a)] = v;
            }
            let v: f64 = (0..n).map(|i| s[i] * cols[a][i]).sum::<f64>() * inv_n;
            hess[(a, d)] = v;
            hess[(d, a)] = v;
            hess[(a, a)] += lambda;
        }
        hess[(d, d)] = s.iter().sum::<f64>() * inv_n;

        let rhs = DVector::from_iterator(d + 1, grad.iter().map(|g| -g));
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => {
                // fall back to a ridge-stabilized solve
                let mut h = hess;
                for i in 0..=d {
                    h[(i, i)] += 1e-10;
                }
                h.cholesky()
                    .ok_or(TabularError::NonConvergence {
                        iterations: _iter,
                        grad_norm,
                    })?
                    .solve(&rhs)
            }
        };

        // step halving: accept only non-increasing objective
        let mut alpha = 1.0f64;
        let mut accepted = false;
        for _ in 0..60 {
            let cand_w: Vec<f64> = weights
                .iter()
                .enumerate()
                .map(|(i, w)| w + alpha * step[i])
                .collect();
            let cand_b = bias + alpha * step[d];
            let cand_obj = logistic_objective(cols, labels, &cand_w, cand_b, lambda);
            if cand_obj <= objective {
                weights = cand_w;
                bias = cand_b;
                objective = cand_obj;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    if !converged {
        let grad = logistic_gradient(cols, labels, &weights, bias, lambda);
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if grad_norm > GRAD_TOL {
            return Err(TabularError::NonConvergence {
                iterations: MAX_ITERATIONS,
                grad_norm,
            });
        }
    }

    let feature_means = (0..d)
        .map(|f| cols[f].iter().sum::<f64>() * inv_n)
        .collect();
    Ok(LogisticModel {
        weights,
        bias,
        l2_lambda: lambda,
        feature_codes: train.codes.clone(),
        feature_means,
    })
}
