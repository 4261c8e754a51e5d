use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::EvalError;

/// Seeded partition of `0..n` into `k` folds. The first `n % k` folds hold one
/// extra index; indices within a fold are ascending.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>, EvalError> {
    if k < 2 || k > n {
        return Err(EvalError::BadK { n, k });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut fold = order[start..start + size].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += size;
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ten_into_three() {
        let folds = kfold_split(10, 3, 1).unwrap();
        let sizes: Vec<_> = folds.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
    }

    #[test]
    fn bad_k() {
        assert!(matches!(kfold_split(5, 1, 0), Err(EvalError::BadK { .. })));
        assert!(matches!(kfold_split(5, 6, 0), Err(EvalError::BadK { .. })));
        assert!(kfold_split(5, 5, 0).is_ok());
    }

    #[test]
    fn same_seed_same_folds() {
        assert_eq!(kfold_split(40, 5, 9).unwrap(), kfold_split(40, 5, 9).unwrap());
        assert_ne!(kfold_split(40, 5, 9).unwrap(), kfold_split(40, 5, 10).unwrap());
    }

    proptest! {
        #[test]
        fn partition(n in 2usize..200, k in 2usize..12, seed in any::<u64>()) {
            prop_assume!(k <= n);
            let folds = kfold_split(n, k, seed).unwrap();
            prop_assert_eq!(folds.len(), k);
            let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            for (f, fold) in folds.iter().enumerate() {
                prop_assert_eq!(fold.len(), n / k + usize::from(f < n % k));
            }
        }
    }

    #[test]
    fn seeds_give_different_partitions() {
        for n in 4..12 {
            let distinct: std::collections::BTreeSet<_> = (0..100).map(|s| kfold_split(n, 2, s).unwrap()).collect();
            assert!(distinct.len() > 1, "n={n}: every seed gave the same folds");
        }
    }
}
