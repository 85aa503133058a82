use proptest::prelude::*;
use reasonroute_core::ranking::{advantage_from_parts, ndcg_at_k, pairwise_accuracy, recall_at_k, tradeoff_score, Qrels};

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("c{i}")).collect()
}

fn qrels(grades: &[u32]) -> Qrels {
    grades.iter().enumerate().map(|(i, g)| (format!("c{i}"), *g)).collect()
}

/// Textbook DCG over a permutation, ideal taken as the max over all
/// permutations rather than a sort.
fn brute_ndcg(order: &[usize], grades: &[u32], k: usize) -> f64 {
    fn dcg(order: &[usize], grades: &[u32], k: usize) -> f64 {
        order
            .iter()
            .take(k)
            .enumerate()
            .map(|(pos, &i)| (2f64.powi(grades[i] as i32) - 1.0) / ((pos + 2) as f64).log2())
            .sum()
    }
    fn perms(items: &[usize]) -> Vec<Vec<usize>> {
        if items.len() <= 1 {
            return vec![items.to_vec()];
        }
        let mut out = Vec::new();
        for i in 0..items.len() {
            let mut rest = items.to_vec();
            let head = rest.remove(i);
            for mut p in perms(&rest) {
                p.insert(0, head);
                out.push(p);
            }
        }
        out
    }
    let all: Vec<usize> = (0..grades.len()).collect();
    let ideal = perms(&all).iter().map(|p| dcg(p, grades, k)).fold(0.0, f64::max);
    if ideal == 0.0 {
        0.0
    } else {
        dcg(order, grades, k) / ideal
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn ndcg_matches_permutation_oracle(
        (grades, order, k) in (1usize..=5).prop_flat_map(|n| (
            proptest::collection::vec(0u32..4, n),
            Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
            1usize..=6,
        ))
    ) {
        let names = ids(grades.len());
        let ranking: Vec<String> = order.iter().map(|&i| names[i].clone()).collect();
        let got = ndcg_at_k(&ranking, &qrels(&grades), k).unwrap().value;
        prop_assert!((0.0..=1.0 + 1e-12).contains(&got));
        prop_assert!((got - brute_ndcg(&order, &grades, k)).abs() < 1e-12);
    }

    #[test]
    fn grade_sorted_ranking_is_optimal(grades in proptest::collection::vec(0u32..4, 1..12), k in 1usize..15) {
        let mut order: Vec<usize> = (0..grades.len()).collect();
        order.sort_by(|a, b| grades[*b].cmp(&grades[*a]));
        let names = ids(grades.len());
        let ranking: Vec<String> = order.iter().map(|&i| names[i].clone()).collect();
        let s = ndcg_at_k(&ranking, &qrels(&grades), k).unwrap();
        if grades.iter().any(|g| *g > 0) {
            prop_assert!((s.value - 1.0).abs() < 1e-12);
        } else {
            prop_assert_eq!(s.value, 0.0);
        }
    }

    #[test]
    fn recall_is_monotone_in_k(
        (grades, order) in (1usize..15).prop_flat_map(|n| (
            proptest::collection::vec(0u32..3, n),
            Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
        ))
    ) {
        let names = ids(grades.len());
        let ranking: Vec<String> = order.iter().map(|&i| names[i].clone()).collect();
        let q = qrels(&grades);
        let vals: Vec<f64> = (1..=grades.len() + 1).map(|k| recall_at_k(&ranking, &q, k).unwrap().value).collect();
        prop_assert!(vals.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn pairwise_self_and_reverse(order in Just((0..10usize).collect::<Vec<_>>()).prop_shuffle(), n in 2usize..10) {
        let names = ids(10);
        let list: Vec<String> = order.iter().take(n).map(|&i| names[i].clone()).collect();
        let rev: Vec<String> = list.iter().rev().cloned().collect();
        prop_assert_eq!(pairwise_accuracy(&list, &list).value, 1.0);
        prop_assert_eq!(pairwise_accuracy(&rev, &list).value, 0.0);
    }

    #[test]
    fn advantage_is_linear_in_lambda(
        ut in 0.0f64..1.0, un in 0.0f64..1.0, tt in 0.0f64..2000.0, tn in 0.0f64..2000.0, lambda in 0.0f64..0.01,
    ) {
        prop_assert_eq!(advantage_from_parts(ut, un, tt, tn, 0.0), ut - un);
        let slope = (advantage_from_parts(ut, un, tt, tn, lambda) - (ut - un)) / lambda.max(1e-300);
        if lambda > 1e-9 {
            prop_assert!((slope + (tt - tn)).abs() < 1e-6 * (1.0 + (tt - tn).abs()));
        }
    }

    #[test]
    fn tradeoff_is_affine_in_tokens(u in 0.0f64..1.0, t1 in 0u32..100_000, t2 in 0u32..100_000) {
        let d = tradeoff_score(u, t1 as f64) - tradeoff_score(u, t2 as f64);
        prop_assert!((d + 1e-4 * (t1 as f64 - t2 as f64)).abs() < 1e-9);
    }
}
