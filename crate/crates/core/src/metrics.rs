//! Set and ranking metrics for medicine predictions.

use std::collections::BTreeSet;

use medrec_tensor::Tensor;

use crate::config::PairConvention;

/// DDI rate of one patient's predicted sets: interacting pairs over all
/// pairs, pooled across visits. Ordered pairs count `(i, j)` and `(j, i)`
/// separately and include `i = j` in the denominator; unordered pairs
/// count each `{i, j}` with `i < j` once. Zero when there are no pairs.
pub fn ddi_rate(sets: &[BTreeSet<usize>], ddi: &Tensor, convention: PairConvention) -> f64 {
    let n = ddi.cols();
    let mut num = 0.0;
    let mut den = 0.0;
    for s in sets {
        let ids: Vec<usize> = s.iter().copied().filter(|&i| i < n).collect();
        match convention {
            PairConvention::Ordered => {
                den += (s.len() * s.len()) as f64;
                for &i in &ids {
                    for &j in &ids {
                        num += ddi.get(i, j);
                    }
                }
            }
            PairConvention::Unordered => {
                den += (s.len() * s.len().saturating_sub(1) / 2) as f64;
                for (a, &i) in ids.iter().enumerate() {
                    for &j in &ids[a + 1..] {
                        num += ddi.get(i, j);
                    }
                }
            }
        }
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// `|pred ∩ truth| / |pred ∪ truth|`; `empty_match` when both are empty.
pub fn jaccard(pred: &BTreeSet<usize>, truth: &BTreeSet<usize>, empty_match: f64) -> f64 {
    let inter = pred.intersection(truth).count();
    let union = pred.len() + truth.len() - inter;
    if union == 0 {
        empty_match
    } else {
        inter as f64 / union as f64
    }
}

/// Harmonic mean of precision and recall; `empty_match` when both sets
/// are empty and 0 when either set alone is empty.
pub fn f1(pred: &BTreeSet<usize>, truth: &BTreeSet<usize>, empty_match: f64) -> f64 {
    if pred.is_empty() && truth.is_empty() {
        return empty_match;
    }
    let inter = pred.intersection(truth).count() as f64;
    let p = if pred.is_empty() { 0.0 } else { inter / pred.len() as f64 };
    let r = if truth.is_empty() { 0.0 } else { inter / truth.len() as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Area under the precision-recall curve of the score ranking:
/// `Σ_k P(k) ΔR(k)`, ranking by descending score with ties broken by
/// ascending id. `None` when `truth` has no positives.
pub fn prauc(scores: &[f64], truth: &BTreeSet<usize>) -> Option<f64> {
    let positives = truth.iter().filter(|&&i| i < scores.len()).count();
    if positives == 0 {
        return None;
    }
    let order = crate::model::prescriber::rank(scores);
    let mut hits = 0usize;
    let mut area = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if truth.contains(&i) {
            hits += 1;
            area += (hits as f64 / (k + 1) as f64) * (1.0 / positives as f64);
        }
    }
    Some(area)
}

/// Mean set size.
pub fn avg_meds(sets: &[BTreeSet<usize>]) -> f64 {
    if sets.is_empty() {
        0.0
    } else {
        sets.iter().map(BTreeSet::len).sum::<usize>() as f64 / sets.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    fn adj(n: usize, pairs: &[(usize, usize)]) -> Tensor {
        let mut t = Tensor::zeros(n, n);
        for &(a, b) in pairs {
            t.data_mut()[a * n + b] = 1.0;
            t.data_mut()[b * n + a] = 1.0;
        }
        t
    }

    #[test]
    fn ddi_rate_examples() {
        let r = adj(4, &[(0, 1)]);
        assert_eq!(ddi_rate(&[set(&[2, 3])], &r, PairConvention::Ordered), 0.0);
        assert_eq!(ddi_rate(&[set(&[0, 1])], &r, PairConvention::Ordered), 0.5);
        assert_eq!(ddi_rate(&[set(&[0, 1])], &r, PairConvention::Unordered), 1.0);
        assert_eq!(ddi_rate(&[set(&[]), set(&[])], &r, PairConvention::Ordered), 0.0);
        // Pooled over visits: 2 interacting of 4 + 1 ordered pairs.
        assert_eq!(ddi_rate(&[set(&[0, 1]), set(&[3])], &r, PairConvention::Ordered), 0.4);
    }

    #[test]
    fn jaccard_and_f1_examples() {
        assert_eq!(jaccard(&set(&[1, 2]), &set(&[1, 2]), 1.0), 1.0);
        assert_eq!(jaccard(&set(&[1]), &set(&[2]), 1.0), 0.0);
        assert_eq!(jaccard(&set(&[1, 2, 3]), &set(&[2, 3, 4]), 1.0), 0.5);
        assert_eq!(jaccard(&set(&[]), &set(&[]), 1.0), 1.0);
        assert_eq!(jaccard(&set(&[]), &set(&[]), 0.0), 0.0);
        assert_eq!(f1(&set(&[1, 2]), &set(&[1, 2]), 1.0), 1.0);
        assert_eq!(f1(&set(&[1, 2]), &set(&[2, 3]), 1.0), 0.5);
        assert_eq!(f1(&set(&[]), &set(&[2, 3]), 1.0), 0.0);
        assert_eq!(f1(&set(&[4]), &set(&[]), 1.0), 0.0);
    }

    #[test]
    fn prauc_examples() {
        let perfect = [0.9, 0.8, 0.1, 0.2, 0.05];
        assert_eq!(prauc(&perfect, &set(&[0, 1])), Some(1.0));
        let last = [0.9, 0.8, 0.7, 0.6, 0.5];
        assert!((prauc(&last, &set(&[4])).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(prauc(&last, &set(&[])), None);
        // Ties rank the lower id first.
        assert_eq!(prauc(&[0.5, 0.5], &set(&[0])), Some(1.0));
        assert_eq!(prauc(&[0.5, 0.5], &set(&[1])), Some(0.5));
    }

    fn brute_min_prauc(n: usize, truth: &BTreeSet<usize>) -> f64 {
        // Worst case places every positive after every negative.
        let pos = truth.len();
        (1..=pos).map(|h| h as f64 / (n - pos + h) as f64).sum::<f64>() / pos as f64
    }

    proptest! {
        #[test]
        fn reversed_perfect_ranking_is_minimal(n in 2usize..12, mask in any::<u16>()) {
            let truth: BTreeSet<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
            prop_assume!(!truth.is_empty());
            let reversed: Vec<f64> = (0..n).map(|i| if truth.contains(&i) { 0.1 } else { 0.9 }).collect();
            let v = prauc(&reversed, &truth).unwrap();
            prop_assert!((v - brute_min_prauc(n, &truth)).abs() < 1e-12);
        }

        #[test]
        fn metrics_are_bounded(
            a in proptest::collection::btree_set(0usize..15, 0..15),
            b in proptest::collection::btree_set(0usize..15, 0..15),
            scores in proptest::collection::vec(0.0f64..1.0, 15),
        ) {
            for v in [jaccard(&a, &b, 1.0), f1(&a, &b, 1.0)] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if let Some(v) = prauc(&scores, &b) {
                prop_assert!(v > 0.0 && v <= 1.0);
            }
            let r = adj(15, &[(0, 1), (3, 7), (2, 14)]);
            let d = ddi_rate(&[a.clone(), b.clone()], &r, PairConvention::Ordered);
            prop_assert!((0.0..=1.0).contains(&d));
        }

        #[test]
        fn invariant_under_id_permutation(
            a in proptest::collection::btree_set(0usize..10, 0..10),
            b in proptest::collection::btree_set(0usize..10, 1..10),
            scores in proptest::collection::vec(0.0f64..1.0, 10),
            seed in any::<u64>(),
        ) {
            let mut perm: Vec<usize> = (0..10).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut medrec_tensor::Rng::seeded(seed));
            let map = |s: &BTreeSet<usize>| s.iter().map(|&i| perm[i]).collect::<BTreeSet<_>>();
            let mut ps = vec![0.0; 10];
            for i in 0..10 {
                ps[perm[i]] = scores[i];
            }
            let r = adj(10, &[(0, 1), (3, 7), (2, 9), (4, 5)]);
            let mut pr = Tensor::zeros(10, 10);
            for i in 0..10 {
                for j in 0..10 {
                    pr.data_mut()[perm[i] * 10 + perm[j]] = r.get(i, j);
                }
            }
            prop_assert_eq!(jaccard(&a, &b, 1.0), jaccard(&map(&a), &map(&b), 1.0));
            prop_assert_eq!(f1(&a, &b, 1.0), f1(&map(&a), &map(&b), 1.0));
            prop_assert_eq!(
                ddi_rate(&[a.clone()], &r, PairConvention::Ordered),
                ddi_rate(&[map(&a)], &pr, PairConvention::Ordered)
            );
            // Distinct scores keep the ranking free of id tie-breaks.
            let mut sorted = scores.clone();
            sorted.sort_by(f64::total_cmp);
            if sorted.windows(2).all(|w| w[0] != w[1]) {
                let x = prauc(&scores, &b).unwrap();
                let y = prauc(&ps, &map(&b)).unwrap();
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
