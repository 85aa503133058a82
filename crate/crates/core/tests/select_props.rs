use std::collections::BTreeSet;

use ndarray::Array2;
use proptest::prelude::*;
use reasonroute_core::select::{alpha_max, consistency_filter, fit_l1_probe, redundancy_prune};

fn design() -> impl Strategy<Value = (Array2<f64>, Vec<f64>)> {
    (6usize..30, 1usize..6).prop_flat_map(|(n, p)| {
        (
            proptest::collection::vec(-2.0f64..2.0, n * p).prop_map(move |v| Array2::from_shape_vec((n, p), v).unwrap()),
            proptest::collection::vec(-3.0f64..3.0, n),
        )
    })
}

fn names(p: usize) -> Vec<String> {
    (0..p).map(|j| format!("f{j}")).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lasso_objective_never_increases((x, y) in design(), frac in 0.01f64..1.5) {
        let a = alpha_max(&x, &y);
        prop_assume!(a > 1e-9);
        let fit = fit_l1_probe(&x, &y, a * frac).unwrap();
        prop_assert!(fit.objective.windows(2).all(|w| w[1] <= w[0] + 1e-12 * (1.0 + w[0].abs())));
        if frac >= 1.0 {
            prop_assert!(fit.coef.iter().all(|c| *c == 0.0));
        }
    }

    #[test]
    fn raising_tau_never_adds(
        supports in proptest::collection::vec(proptest::collection::btree_set(0u8..8, 0..8), 1..6),
        t1 in 0.01f64..1.0,
        t2 in 0.01f64..1.0,
    ) {
        let s: Vec<BTreeSet<String>> = supports.iter().map(|s| s.iter().map(|v| format!("f{v}")).collect()).collect();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = consistency_filter(&s, lo).unwrap();
        let b = consistency_filter(&s, hi).unwrap();
        prop_assert!(b.is_subset(&a));
    }

    #[test]
    fn pruning_is_a_subset_and_idempotent(
        (x, y) in design(),
        dup in proptest::collection::vec(0usize..5, 0..3),
        rho in 0.5f64..0.99,
    ) {
        let p = x.ncols();
        let extra: Vec<usize> = dup.into_iter().filter(|j| *j < p).collect();
        let cols: Vec<usize> = (0..p).chain(extra).collect();
        let x = x.select(ndarray::Axis(1), &cols);
        let nm = names(cols.len());
        let imp: Vec<f64> = (0..cols.len()).map(|j| (j % 3) as f64).collect();
        let all: BTreeSet<String> = nm.iter().cloned().collect();
        let out = redundancy_prune(&x, &y, &nm, &all, rho, &imp, 3, &BTreeSet::new()).unwrap();
        let kept: BTreeSet<String> = out.kept.iter().cloned().collect();
        prop_assert!(kept.is_subset(&all) && !kept.is_empty());
        prop_assert_eq!(kept.len() + out.dropped.len(), all.len());
        let again = redundancy_prune(&x, &y, &nm, &kept, rho, &imp, 3, &BTreeSet::new()).unwrap();
        prop_assert_eq!(again.kept, out.kept);
    }
}
