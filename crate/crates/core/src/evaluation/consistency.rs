use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::kfold::kfold_split;
use super::silhouette::{check_dimensions, euclidean, silhouette_with};
use super::EvalError;
use crate::exec::Execution;

/// An evidence embedding tagged with the prediction it supports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledEmbedding {
    pub key: String,
    pub label: i64,
    pub vector: Vec<f64>,
}

/// Anything that can be fit on labeled embeddings and predict held-out labels.
pub trait EvidenceClassifier: Sync {
    fn fit_predict(&self, train: &[&LabeledEmbedding], test: &[&LabeledEmbedding]) -> Vec<i64>;
}

/// Assigns each point the label of the closest class mean. Ties go to the
/// smaller label.
#[derive(Debug, Clone, Copy, Default)]
pub struct NearestCentroid;

impl EvidenceClassifier for NearestCentroid {
    fn fit_predict(&self, train: &[&LabeledEmbedding], test: &[&LabeledEmbedding]) -> Vec<i64> {
        let mut sums: BTreeMap<i64, (Vec<f64>, usize)> = BTreeMap::new();
        for p in train {
            let e = sums
                .entry(p.label)
                .or_insert_with(|| (vec![0.0; p.vector.len()], 0));
            for (s, v) in e.0.iter_mut().zip(&p.vector) {
                *s += v;
            }
            e.1 += 1;
        }
        let centroids: Vec<(i64, Vec<f64>)> = sums
            .into_iter()
            .map(|(l, (s, n))| (l, s.into_iter().map(|x| x / n as f64).collect()))
            .collect();
        test.iter()
            .map(|p| {
                let mut best = (f64::INFINITY, i64::MIN);
                for (label, c) in &centroids {
                    let d = euclidean(&p.vector, c);
                    if d < best.0 {
                        best = (d, *label);
                    }
                }
                best.1
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub silhouette: f64,
    /// Mean held-out accuracy over folds.
    pub kfold_accuracy: f64,
    pub fold_accuracies: Vec<f64>,
    pub k: usize,
    pub fold_seed: u64,
    pub points: usize,
}

pub fn consistency_accuracy(
    points: &[LabeledEmbedding],
    k: usize,
    seed: u64,
    exec: Execution,
) -> Result<ConsistencyReport, EvalError> {
    consistency_accuracy_with(points, k, seed, exec, &NearestCentroid)
}

/// Silhouette of the embeddings under their labels, plus k-fold held-out
/// accuracy of `classifier`. Points are ordered by key first, so input order
/// does not matter.
pub fn consistency_accuracy_with(
    points: &[LabeledEmbedding],
    k: usize,
    seed: u64,
    exec: Execution,
    classifier: &dyn EvidenceClassifier,
) -> Result<ConsistencyReport, EvalError> {
    let mut sorted: Vec<LabeledEmbedding> = points.to_vec();
    sorted.sort_by(|a, b| a.key.cmp(&b.key));
    check_dimensions(&sorted)?;
    let silhouette = silhouette_with(&sorted, exec)?;
    let folds = kfold_split(sorted.len(), k, seed)?;

    let fold_accuracies = exec.map(&folds, |fold| {
        let mut in_fold = vec![false; sorted.len()];
        for &i in fold {
            in_fold[i] = true;
        }
        let train: Vec<&LabeledEmbedding> = sorted
            .iter()
            .enumerate()
            .filter(|(i, _)| !in_fold[*i])
            .map(|(_, p)| p)
            .collect();
        let test: Vec<&LabeledEmbedding> = fold.iter().map(|&i| &sorted[i]).collect();
        let predicted = classifier.fit_predict(&train, &test);
        let correct = predicted
            .iter()
            .zip(&test)
            .filter(|(p, t)| **p == t.label)
            .count();
        correct as f64 / test.len() as f64
    });
    let kfold_accuracy = fold_accuracies.iter().sum::<f64>() / fold_accuracies.len() as f64;
    Ok(ConsistencyReport {
        silhouette,
        kfold_accuracy,
        fold_accuracies,
        k,
        fold_seed: seed,
        points: sorted.len(),
    })
}
