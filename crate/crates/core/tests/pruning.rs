mod common;

use alqt_core::adapters::{budget_schedule, prune_global, prune_per_layer, AdapterState};
use common::oracles::{dominance_oracle, kept, random_layers, scores_of};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn global_pruning_matches_dominance_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..200 {
        let mut adapters = random_layers(&mut rng);
        let scores = scores_of(&adapters);
        assert!(scores.len() <= 64);
        let budget = rng.random_range(0..=scores.len());
        let expected = dominance_oracle(&scores, budget);
        prune_global(&mut adapters, budget).unwrap();
        assert_eq!(kept(&adapters), expected);
        assert!(adapters.iter().all(|a| a.importance().iter().all(|&s| s == 0.0)));
    }
}

#[test]
fn global_pruning_matches_exhaustive_subset_search_on_small_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..200 {
        let layers = rng.random_range(1..=3);
        let r_max = rng.random_range(1..=4);
        let mut adapters: Vec<AdapterState<f32>> = (0..layers)
            .map(|l| {
                let mut a = AdapterState::init(&format!("l{l}"), 3, 3, r_max, &mut rng);
                let s: Vec<f64> = (0..r_max).map(|_| rng.random_range(0..3) as f64).collect();
                a.set_importance(&s).unwrap();
                a
            })
            .collect();
        let flat: Vec<f64> = adapters.iter().flat_map(|a| a.importance().to_vec()).collect();
        let n = flat.len();
        let budget = rng.random_range(0..=n);
        // Best subset: maximal total score; among equals, lexicographically
        // smallest sorted index list.
        let mut best: Option<(f64, Vec<usize>)> = None;
        for bits in 0u32..(1 << n) {
            if bits.count_ones() as usize != budget {
                continue;
            }
            let idx: Vec<usize> = (0..n).filter(|i| bits & (1 << i) != 0).collect();
            let total: f64 = idx.iter().map(|&i| flat[i]).sum();
            let better = match &best {
                None => true,
                Some((t, b)) => total > *t || (total == *t && idx < *b),
            };
            if better {
                best = Some((total, idx));
            }
        }
        let expected: Vec<(usize, usize)> = best.unwrap().1.into_iter().map(|i| (i / r_max, i % r_max)).collect();
        prune_global(&mut adapters, budget).unwrap();
        assert_eq!(kept(&adapters), expected);
    }
}

#[test]
fn repeated_pruning_only_shrinks() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut adapters: Vec<AdapterState<f32>> =
        (0..4).map(|l| AdapterState::init(&format!("l{l}"), 8, 8, 8, &mut rng)).collect();
    let schedule = budget_schedule(4, 8, 4, 3);
    assert_eq!(schedule, vec![27, 21, 16]);
    let mut previous = kept(&adapters);
    for &b in &schedule {
        for a in &mut adapters {
            let s: Vec<f64> = (0..8).map(|_| rng.random()).collect();
            a.set_importance(&s).unwrap();
        }
        prune_global(&mut adapters, b).unwrap();
        let now = kept(&adapters);
        assert_eq!(now.len(), b);
        assert!(now.iter().all(|c| previous.contains(c)));
        previous = now;
    }
    assert!(prune_global(&mut adapters, 17).is_err());
}

#[test]
fn per_layer_pruning_keeps_rank_in_each_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut adapters: Vec<AdapterState<f32>> =
        (0..3).map(|l| AdapterState::init(&format!("l{l}"), 8, 8, 6, &mut rng)).collect();
    for a in &mut adapters {
        let s: Vec<f64> = (0..6).map(|_| rng.random_range(0..2) as f64).collect();
        a.set_importance(&s).unwrap();
    }
    let scores: Vec<Vec<f64>> = adapters.iter().map(|a| a.importance().to_vec()).collect();
    prune_per_layer(&mut adapters, 2).unwrap();
    for (a, s) in adapters.iter().zip(&scores) {
        assert_eq!(a.active_rank(), 2);
        let layer: Vec<(usize, usize, f64)> = s.iter().enumerate().map(|(i, &v)| (0, i, v)).collect();
        let expected: Vec<usize> = dominance_oracle(&layer, 2).into_iter().map(|(_, i)| i).collect();
        let got: Vec<usize> = a.mask().iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
        assert_eq!(got, expected);
    }
}

#[test]
fn schedule_ends_at_target_for_many_shapes() {
    for layers in 1..=12 {
        for r_max in 1..=16 {
            for r_target in 1..=r_max {
                for events in 1..=5 {
                    let s = budget_schedule(layers, r_max, r_target, events);
                    assert_eq!(s.len(), events);
                    assert_eq!(*s.last().unwrap(), layers * r_target);
                    assert!(s.windows(2).all(|w| w[0] >= w[1]));
                    assert!(s[0] <= layers * r_max);
                }
            }
        }
    }
}
