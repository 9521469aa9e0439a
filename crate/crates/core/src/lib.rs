//! Detection of low left-ventricular ejection fraction (LEF) from structured
//! ECG-diagnosis probability vectors.
//!
//! The pipeline consumes per-record vectors of 71 diagnostic probabilities
//! produced by an upstream ECG interpretation model, pairs them with
//! echocardiogram- or note-derived labels, and provides:
//!
//! * single-predictor scoring with F1-max and recall-floor thresholding,
//! * multi-predictor tabular models (L2 logistic regression and second-order
//!   gradient-boosted trees) with grid search and early stopping,
//! * exact Tree SHAP attributions and plot-ready explanation tables,
//! * AUROC/AUPRC/F1 with seeded bootstrap confidence intervals,
//! * subgroup evaluation, clinical-note EF extraction, and a seeded synthetic
//!   cohort generator used as a desk-scale oracle.

pub mod cohort;
pub mod explain;
pub mod features;
pub mod metrics;
pub mod notes;
pub mod predictors;
pub mod single_predictor;
pub mod subgroups;
pub mod synth;
pub mod tabular;

pub use cohort::{CohortTable, EchoFindings, LabeledRecord, Sex, Split};
pub use explain::ShapAttribution;
pub use metrics::{Direction, MetricReport};
pub use predictors::{PredictorCatalog, PredictorMatrix, PredictorVector};
pub use single_predictor::{SinglePredictorReport, ThresholdChoice};
pub use tabular::{Dataset, LogisticModel, TabularModel, TrainConfig, TreeEnsemble};
