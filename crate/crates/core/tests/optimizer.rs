use musa::optimizer::{brute_force, composition_count, gap_params, optimal_config, top_two_values, OptimizeError};
use musa::MeansTable;
use proptest::prelude::*;

fn table() -> impl Strategy<Value = MeansTable> {
    (1usize..=6, 1usize..=4).prop_flat_map(|(m, n)| {
        prop::collection::vec(0.0f64..=1.0, m * n).prop_map(move |v| MeansTable::new(m, n, v).unwrap())
    })
}

fn table_and_users() -> impl Strategy<Value = (MeansTable, usize)> {
    table().prop_flat_map(|t| {
        let cap = t.channels() * t.max_occupancy();
        (Just(t), 0..=cap)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn dp_matches_brute_force((t, k) in table_and_users()) {
        let (best, j1) = optimal_config(&t, k).unwrap();
        let oracle = brute_force(&t, k, u128::MAX).unwrap();
        prop_assert_eq!(&best, &oracle.best);
        prop_assert!((j1 - oracle.j1()).abs() <= 1e-12);
        prop_assert!((best.value(&t) - j1).abs() <= 1e-12);
        match (top_two_values(&t, k), oracle.j2()) {
            (Ok((a, b)), Some(j2)) => {
                prop_assert!((a - j1).abs() <= 1e-12);
                prop_assert!((b - j2).abs() <= 1e-12);
                prop_assert!(b < a);
            }
            (Err(OptimizeError::DegenerateGap { .. }), None) => {}
            (got, want) => prop_assert!(false, "{:?} vs {:?}", got, want),
        }
    }

    #[test]
    fn scaling_keeps_the_argmax((t, k) in table_and_users(), c in 0.01f64..=1.0) {
        let (a, j) = optimal_config(&t, k).unwrap();
        let (b, js) = optimal_config(&t.scaled(c), k).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!((js - c * j).abs() <= 1e-9);
    }

    #[test]
    fn feasible_vectors_extend_by_one_user((t, k) in table_and_users()) {
        let cap = t.channels() * t.max_occupancy();
        let (best, _) = optimal_config(&t, k).unwrap();
        if k < cap {
            let mut counts = best.counts().to_vec();
            let slot = counts.iter().position(|&n| n < t.max_occupancy()).unwrap();
            counts[slot] += 1;
            prop_assert_eq!(counts.iter().sum::<usize>(), k + 1);
            prop_assert!(optimal_config(&t, k + 1).is_ok());
        } else {
            let infeasible = matches!(optimal_config(&t, k + 1), Err(OptimizeError::Infeasible { .. }));
            prop_assert!(infeasible);
        }
    }

    #[test]
    fn gap_is_positive_when_defined((t, k) in table_and_users()) {
        if let Ok(g) = gap_params(&t, k) {
            prop_assert!(g.delta > 0.0);
            let denom = 2.0 * (t.channels() * t.max_occupancy()) as f64;
            prop_assert!((g.delta * denom - (g.j1 - g.j2)).abs() <= 1e-12);
        }
    }
}

#[test]
fn composition_counts_match_enumeration() {
    for m in 1..=4 {
        for n in 1..=3 {
            for k in 0..=m * n {
                let t = MeansTable::new(m, n, vec![0.5; m * n]).unwrap();
                let visited = brute_force(&t, k, u128::MAX).unwrap();
                let direct = (0..(n + 1).pow(m as u32))
                    .filter(|&code| {
                        let mut c = code;
                        let mut sum = 0;
                        for _ in 0..m {
                            sum += c % (n + 1);
                            c /= n + 1;
                        }
                        sum == k
                    })
                    .count();
                assert_eq!(composition_count(m, n, k), direct as u128);
                assert_eq!(visited.visited as usize, direct);
            }
        }
    }
}

#[test]
fn oracle_refuses_large_instances() {
    let t = MeansTable::new(6, 3, vec![0.5; 18]).unwrap();
    assert!(matches!(brute_force(&t, 9, 10), Err(OptimizeError::OracleTooLarge { .. })));
}
