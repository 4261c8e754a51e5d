use super::consistency::LabeledEmbedding;
use super::EvalError;
use crate::exec::Execution;

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub(crate) fn check_dimensions(points: &[LabeledEmbedding]) -> Result<usize, EvalError> {
    let dim = points.first().map(|p| p.vector.len()).unwrap_or(0);
    for p in points {
        if p.vector.len() != dim {
            return Err(EvalError::DimensionMismatch(dim, p.vector.len()));
        }
    }
    Ok(dim)
}

/// Mean Euclidean silhouette over all points.
///
/// Points in singleton clusters score 0, as do points whose intra- and
/// nearest-cluster distances are both 0.
pub fn silhouette(points: &[LabeledEmbedding]) -> Result<f64, EvalError> {
    silhouette_with(points, Execution::default())
}

pub fn silhouette_with(points: &[LabeledEmbedding], exec: Execution) -> Result<f64, EvalError> {
    if points.len() < 3 {
        return Err(EvalError::TooFewPoints(points.len()));
    }
    check_dimensions(points)?;
    let mut labels: Vec<i64> = points.iter().map(|p| p.label).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() < 2 {
        return Err(EvalError::SingleCluster);
    }
    let cluster_of = |label: i64| labels.binary_search(&label).unwrap();

    let scores = exec.map_range(points.len(), |i| {
        let own = cluster_of(points[i].label);
        let mut sums = vec![0.0; labels.len()];
        let mut counts = vec![0usize; labels.len()];
        for (j, q) in points.iter().enumerate() {
            if j == i {
                continue;
            }
            let c = cluster_of(q.label);
            sums[c] += euclidean(&points[i].vector, &q.vector);
            counts[c] += 1;
        }
        if counts[own] == 0 {
            return 0.0;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..labels.len())
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m == 0.0 {
            0.0
        } else {
            (b - a) / m
        }
    });
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt(key: &str, label: i64, v: &[f64]) -> LabeledEmbedding {
        LabeledEmbedding { key: key.into(), label, vector: v.to_vec() }
    }

    /// Straight from the definition, with an explicit distance matrix.
    fn oracle(points: &[LabeledEmbedding]) -> f64 {
        let n = points.len();
        let d: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        points[i]
                            .vector
                            .iter()
                            .zip(&points[j].vector)
                            .map(|(a, b)| (a - b).powi(2))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .collect()
            })
            .collect();
        let mut total = 0.0;
        for i in 0..n {
            let same: Vec<usize> =
                (0..n).filter(|&j| j != i && points[j].label == points[i].label).collect();
            if same.is_empty() {
                continue;
            }
            let a = same.iter().map(|&j| d[i][j]).sum::<f64>() / same.len() as f64;
            let mut others: Vec<i64> = points.iter().map(|p| p.label).collect();
            others.sort();
            others.dedup();
            let mut b = f64::MAX;
            for l in others.into_iter().filter(|&l| l != points[i].label) {
                let members: Vec<usize> = (0..n).filter(|&j| points[j].label == l).collect();
                b = b.min(members.iter().map(|&j| d[i][j]).sum::<f64>() / members.len() as f64);
            }
            if a.max(b) > 0.0 {
                total += (b - a) / a.max(b);
            }
        }
        total / n as f64
    }

    #[test]
    fn well_separated_pair_of_clusters() {
        let pts = vec![
            pt("a", 0, &[0.0, 0.0]),
            pt("b", 0, &[0.0, 1.0]),
            pt("c", 1, &[10.0, 0.0]),
            pt("d", 1, &[10.0, 1.0]),
        ];
        // a: intra 1, nearest mean (10 + sqrt(101)) / 2
        let b = (10.0 + 101f64.sqrt()) / 2.0;
        let expected = (b - 1.0) / b;
        assert!((silhouette(&pts).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn twelve_random_points_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<_> = (0..12)
            .map(|i| {
                let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                pt(&format!("p{i:02}"), (i % 2) as i64, &v)
            })
            .collect();
        let got = silhouette_with(&pts, Execution::Sequential).unwrap();
        assert!((got - oracle(&pts)).abs() < 1e-9);
    }

    #[test]
    fn singleton_scores_zero() {
        let pts = vec![pt("a", 0, &[0.0]), pt("b", 0, &[1.0]), pt("c", 1, &[5.0])];
        // a: a=1 b=5 -> 0.8 ; b: a=1 b=4 -> 0.75 ; c: singleton -> 0
        assert!((silhouette(&pts).unwrap() - (0.8 + 0.75) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn identical_points_score_zero() {
        let pts: Vec<_> = (0..4).map(|i| pt(&i.to_string(), i % 2, &[1.0, 1.0])).collect();
        assert_eq!(silhouette(&pts).unwrap(), 0.0);
    }

    #[test]
    fn preconditions() {
        let two = vec![pt("a", 0, &[0.0]), pt("b", 1, &[1.0])];
        assert!(matches!(silhouette(&two), Err(EvalError::TooFewPoints(2))));
        let one = vec![pt("a", 0, &[0.0]), pt("b", 0, &[1.0]), pt("c", 0, &[2.0])];
        assert!(matches!(silhouette(&one), Err(EvalError::SingleCluster)));
        let ragged = vec![pt("a", 0, &[0.0]), pt("b", 1, &[1.0, 2.0]), pt("c", 0, &[2.0])];
        assert!(matches!(silhouette(&ragged), Err(EvalError::DimensionMismatch(1, 2))));
    }

    proptest! {
        #[test]
        fn bounded_and_matches_oracle(
            raw in prop::collection::vec((0i64..3, -5.0f64..5.0, -5.0f64..5.0), 3..24)
        ) {
            let mut pts: Vec<_> = raw
                .iter()
                .enumerate()
                .map(|(i, (l, x, y))| pt(&i.to_string(), *l, &[*x, *y]))
                .collect();
            pts[0].label = 0;
            pts[1].label = 1;
            let s = silhouette_with(&pts, Execution::Sequential).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
            prop_assert!((s - oracle(&pts)).abs() < 1e-9);
            let p = silhouette_with(&pts, Execution::default()).unwrap();
            prop_assert_eq!(s, p);
        }
    }

    fn clustered(seed: u64) -> Vec<LabeledEmbedding> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..15)
            .map(|i| {
                let c = (i % 3) as i64;
                let v = [c as f64 * 4.0 + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.5];
                pt(&i.to_string(), c, &v)
            })
            .collect()
    }

    #[test]
    fn invariant_under_translation_and_scaling() {
        for seed in 0..20 {
            let pts = clustered(seed);
            let s = silhouette(&pts).unwrap();
            let moved: Vec<_> = pts
                .iter()
                .map(|p| pt(&p.key, p.label, &p.vector.iter().map(|x| x + 37.5).collect::<Vec<_>>()))
                .collect();
            let scaled: Vec<_> = pts
                .iter()
                .map(|p| pt(&p.key, p.label, &p.vector.iter().map(|x| x * 0.125).collect::<Vec<_>>()))
                .collect();
            assert!((silhouette(&moved).unwrap() - s).abs() < 1e-9);
            assert!((silhouette(&scaled).unwrap() - s).abs() < 1e-9);
        }
    }

    #[test]
    fn coincident_clusters_score_one() {
        let pts: Vec<_> = (0..9)
            .map(|i| {
                let c = i % 3;
                pt(&i.to_string(), c, &[c as f64 * 2.0, -(c as f64)])
            })
            .collect();
        assert_eq!(silhouette(&pts).unwrap(), 1.0);
    }
}
