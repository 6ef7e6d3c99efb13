use negmerge_core::consensus_stream::{fold_pool, SignConsensusState};
use negmerge_core::merging::{
    consensus_mask, greedy_soup, merge_conflict, merge_magmax, merge_negmerge, merge_ties,
    merge_uniform, ties_elected_signs, GreedyOrder, MergeSpec, Reduce,
};
use negmerge_core::task_vector::TaskVector;
use negmerge_core::{DType, TensorMap};
use negmerge_testkit::{self as kit, PoolLayout};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

const TOL: f64 = 1e-12;

#[test]
fn negmerge_matches_scalar_oracle() {
    let mut rng = kit::rng(11);
    for case in 0..300 {
        let pool = kit::random_pool_case(&mut rng, 8);
        for reduce in [Reduce::Avg, Reduce::MinMag, Reduce::MaxMag, Reduce::MinValue] {
            let got = merge_negmerge(&pool, &MergeSpec::negmerge(reduce)).unwrap();
            let oracle = kit::oracle_negmerge(&pool, 1.0, reduce);
            kit::check_against(&got, &oracle, TOL).unwrap_or_else(|e| panic!("case {case}: {e}"));
            let mask = consensus_mask(&pool, 1.0).unwrap();
            assert_eq!(kit::mask_vectors(&mask), oracle.masks, "case {case}");
        }
    }
}

#[test]
fn partial_consensus_matches_oracle() {
    let mut rng = kit::rng(12);
    for case in 0..200 {
        let pool = kit::random_pool_case(&mut rng, 8);
        let q = [0.6, 0.7, 0.75, 0.9][case % 4];
        let spec = MergeSpec {
            q,
            ..MergeSpec::negmerge(Reduce::Avg)
        };
        let got = merge_negmerge(&pool, &spec).unwrap();
        let oracle = kit::oracle_negmerge(&pool, q, Reduce::Avg);
        kit::check_against(&got, &oracle, TOL).unwrap_or_else(|e| panic!("case {case}: {e}"));
        assert_eq!(kit::mask_vectors(&consensus_mask(&pool, q).unwrap()), oracle.masks);
    }
}

#[test]
fn baselines_match_oracles() {
    let mut rng = kit::rng(13);
    for case in 0..200 {
        let mut pool = kit::random_pool_case(&mut rng, 8);
        if pool.len() < 2 {
            pool.push(pool[0].scaled(-0.5));
        }
        kit::check_against(&merge_uniform(&pool).unwrap(), &kit::oracle_uniform(&pool), TOL)
            .unwrap_or_else(|e| panic!("uniform {case}: {e}"));
        kit::check_against(&merge_magmax(&pool).unwrap(), &kit::oracle_magmax(&pool), TOL)
            .unwrap_or_else(|e| panic!("magmax {case}: {e}"));
        kit::check_against(&merge_conflict(&pool).unwrap(), &kit::oracle_conflict(&pool), TOL)
            .unwrap_or_else(|e| panic!("conflict {case}: {e}"));
        for k in [0.2, 0.5, 1.0] {
            let got = merge_ties(&pool, &MergeSpec::ties(k)).unwrap();
            let oracle = kit::oracle_ties(&pool, k);
            kit::check_against(&got, &oracle, TOL).unwrap_or_else(|e| panic!("ties {k} {case}: {e}"));
            let elected: Vec<Vec<bool>> = ties_elected_signs(&pool, k)
                .unwrap()
                .values()
                .map(|s| s.iter().map(|&x| x != 0).collect())
                .collect();
            assert_eq!(elected, oracle.masks, "ties {k} case {case}");
        }
    }
}

#[test]
fn greedy_matches_sequential_oracle() {
    let mut rng = kit::rng(14);
    for case in 0..200 {
        let layout = PoolLayout::random(&mut rng, DType::F64);
        let n = rng.random_range(1..=5);
        let base = kit::random_map(&mut rng, &layout, |r| kit::random_value(r, 0.0));
        let target = kit::random_map(&mut rng, &layout, |r| kit::random_value(r, 0.0));
        let candidates: Vec<TensorMap> = (0..n)
            .map(|_| kit::random_map(&mut rng, &layout, |r| kit::random_value(r, 0.1)))
            .collect();
        let loss = |m: &TensorMap| -> f64 {
            m.iter()
                .map(|(name, t)| {
                    let goal = target.get(name).unwrap();
                    (0..t.len()).map(|i| (t.get(i) - goal.get(i)).powi(2)).sum::<f64>()
                })
                .sum()
        };
        for (order, descending) in [(GreedyOrder::LossDescending, true), (GreedyOrder::LossAscending, false)] {
            let soup = greedy_soup(&candidates, &base, order, loss).unwrap();
            let (accepted, oracle_soup) = kit::oracle_greedy(&candidates, descending, loss);
            assert_eq!(soup.accepted, accepted, "case {case}");
            let oracle_tau = negmerge_core::task_vector::diff(&oracle_soup, &base).unwrap();
            assert!(soup.tau.bit_eq(&oracle_tau), "case {case}");
        }
    }
}

#[test]
fn streaming_equals_batch() {
    let mut rng = kit::rng(15);
    for case in 0..300 {
        let pool = kit::random_pool_case(&mut rng, 8);
        let state = fold_pool(pool[0].schema(), &pool).unwrap();
        for reduce in [Reduce::Avg, Reduce::MinMag, Reduce::MaxMag, Reduce::MinValue, Reduce::MaxValue] {
            let batch = merge_negmerge(&pool, &MergeSpec::negmerge(reduce)).unwrap();
            let stream = state.finalize(reduce).unwrap();
            assert!(stream.bit_eq(&batch), "case {case} reduce {reduce}");
        }
        assert_eq!(state.alive_mask(), consensus_mask(&pool, 1.0).unwrap());
    }
}

#[test]
fn mask_shrinks_as_pool_grows() {
    let mut rng = kit::rng(16);
    for _ in 0..200 {
        let layout = PoolLayout::random(&mut rng, DType::F64);
        let pool = kit::random_pool(&mut rng, &layout, 8);
        let mut state = SignConsensusState::init(pool[0].schema());
        let mut previous = None;
        for k in 1..=pool.len() {
            let before = state.alive_mask();
            state.update(&pool[k - 1]).unwrap();
            assert!(state.alive_mask().is_subset_of(&before));
            let mask = consensus_mask(&pool[..k], 1.0).unwrap();
            if let Some(prev) = &previous {
                assert!(mask.is_subset_of(prev));
            }
            previous = Some(mask);
        }
    }
}

#[test]
fn conflict_and_consensus_partition() {
    let mut rng = kit::rng(17);
    for _ in 0..200 {
        let layout = PoolLayout::random(&mut rng, DType::F64);
        let n = rng.random_range(2..=8);
        let pool = kit::random_pool(&mut rng, &layout, n);
        let conflict = kit::support(&merge_conflict(&pool).unwrap());
        let consensus = kit::support(&merge_negmerge(&pool, &MergeSpec::default()).unwrap());
        let flat = kit::flatten(&pool);
        for (t, per_vec) in flat.values.iter().enumerate() {
            for i in 0..per_vec[0].len() {
                let (c, s) = (conflict[t][i], consensus[t][i]);
                assert!(!(c && s), "supports overlap");
                if c || s {
                    continue;
                }
                let column: Vec<f64> = per_vec.iter().map(|v| v[i]).collect();
                let all_zero = column.iter().all(|&v| v == 0.0);
                let mixed = column.iter().any(|&v| v > 0.0) && column.iter().any(|&v| v < 0.0);
                let zero_mean = column.iter().sum::<f64>() / n as f64 == 0.0;
                // one sign plus at least one zero: unanimity broken, no conflict
                let zero_broken = !mixed && column.contains(&0.0);
                assert!(all_zero || (mixed && zero_mean) || zero_broken, "{column:?} uncovered");
            }
        }
    }
}

#[test]
fn degenerate_pools() {
    let mut rng = kit::rng(18);
    for _ in 0..200 {
        let layout = PoolLayout::random(&mut rng, DType::F64);
        let t = kit::random_tau(&mut rng, &layout, 0.3);
        let spec = MergeSpec::default();
        assert!(merge_negmerge(std::slice::from_ref(&t), &spec).unwrap().bit_eq(&t));
        let copies = vec![t.clone(); rng.random_range(2..=8)];
        assert!(merge_negmerge(&copies, &spec).unwrap().bit_eq(&t));
        assert_eq!(merge_negmerge(&[t.clone(), t.scaled(-1.0)], &spec).unwrap().nnz(), 0);
        assert!(merge_uniform(std::slice::from_ref(&t)).unwrap().bit_eq(&t));
        assert!(merge_magmax(std::slice::from_ref(&t)).unwrap().bit_eq(&t));
        assert!(merge_ties(&copies, &MergeSpec::ties(1.0)).unwrap().bit_eq(&t));
    }
}

fn shuffled(pool: &[TaskVector], seed: u64) -> Vec<TaskVector> {
    let mut p = pool.to_vec();
    p.shuffle(&mut kit::rng(seed));
    p
}

fn values_close(a: &TaskVector, b: &TaskVector) -> bool {
    a.delta().iter().zip(b.delta().iter()).all(|((_, x), (_, y))| {
        (0..x.len()).all(|i| kit::rel_close(x.get(i), y.get(i), 1e-12))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn permutation_invariance(seed in any::<u64>(), perm_seed in any::<u64>()) {
        let mut rng = kit::rng(seed);
        let layout = PoolLayout::random(&mut rng, DType::F64);
        let n = rng.random_range(2..=8);
        let pool = kit::random_pool(&mut rng, &layout, n);
        let other = shuffled(&pool, perm_seed);

        prop_assert_eq!(consensus_mask(&pool, 1.0).unwrap(), consensus_mask(&other, 1.0).unwrap());
        prop_assert!(merge_magmax(&pool).unwrap().bit_eq(&merge_magmax(&other).unwrap())
            || has_magnitude_tie(&pool));
        prop_assert_eq!(ties_elected_signs(&pool, 0.5).unwrap(), ties_elected_signs(&other, 0.5).unwrap());
        let spec = MergeSpec::default();
        prop_assert!(values_close(&merge_negmerge(&pool, &spec).unwrap(), &merge_negmerge(&other, &spec).unwrap()));
        prop_assert!(values_close(&merge_uniform(&pool).unwrap(), &merge_uniform(&other).unwrap()));
    }

    #[test]
    fn scaling_equivariance(seed in any::<u64>(), c in prop_oneof![0.01f64..100.0, -100.0f64..-0.01]) {
        let mut rng = kit::rng(seed);
        let layout = PoolLayout::random(&mut rng, DType::F64);
        let n = rng.random_range(1..=8);
        let pool = kit::random_pool(&mut rng, &layout, n);
        let scaled: Vec<TaskVector> = pool.iter().map(|t| t.scaled(c)).collect();
        prop_assert_eq!(consensus_mask(&pool, 1.0).unwrap(), consensus_mask(&scaled, 1.0).unwrap());
        let spec = MergeSpec::default();
        let lhs = merge_negmerge(&scaled, &spec).unwrap();
        let rhs = merge_negmerge(&pool, &spec).unwrap().scaled(c);
        prop_assert!(values_close(&lhs, &rhs));
    }
}

// MagMax ties between equal magnitudes of opposite sign resolve by pool
// position, so reordering may legitimately change the output.
fn has_magnitude_tie(pool: &[TaskVector]) -> bool {
    let flat = kit::flatten(pool);
    flat.values.iter().any(|per_vec| {
        (0..per_vec[0].len()).any(|i| {
            let max = per_vec.iter().map(|v| v[i].abs()).fold(0.0, f64::max);
            let mut winners = per_vec.iter().map(|v| v[i]).filter(|v| v.abs() == max);
            let first = winners.next().unwrap();
            winners.any(|w| w != first)
        })
    })
}
