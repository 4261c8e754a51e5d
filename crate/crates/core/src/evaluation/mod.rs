//! Classification metrics, format metrics and the evidence-consistency protocol.

mod consistency;
mod kfold;
mod metrics;
mod run;
mod silhouette;

pub use consistency::{
    consistency_accuracy, consistency_accuracy_with, ConsistencyReport, EvidenceClassifier,
    LabeledEmbedding, NearestCentroid,
};
pub use kfold::kfold_split;
pub use metrics::{confusion, metrics, perplexity, ConfusionCounts, MetricsReport};
pub use run::{evaluate_run, EvalConfig, EvaluationOutput, EvaluationReport, EvaluationRow};
pub use silhouette::{silhouette, silhouette_with};

use crate::gateway::GatewayError;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("predictions ({predictions}) and golds ({golds}) differ in length")]
    LengthMismatch { predictions: usize, golds: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("logprob {0} is positive or not a number")]
    PositiveLogprob(f64),
    #[error("silhouette needs at least two clusters")]
    SingleCluster,
    #[error("silhouette needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("k = {k} is invalid for n = {n} (need 2 <= k <= n)")]
    BadK { n: usize, k: usize },
    #[error("embedding dimensions differ ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}
