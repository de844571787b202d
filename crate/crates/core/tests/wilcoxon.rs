mod common;

use alqt_core::stats::{average_ranks, wilcoxon_signed_rank, WilcoxonMethod};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use common::oracles::{enumeration_p, paired};
use statrs::distribution::{ContinuousCDF, Normal};

#[test]
fn exact_method_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..100 {
        let n = rng.random_range(1..=12);
        let (x, y) = paired(&mut rng, n);
        let r = wilcoxon_signed_rank(&x, &y).unwrap();
        let oracle = enumeration_p(&x, &y);
        assert!((r.p_value - oracle).abs() <= 1e-12, "trial {trial}: {} vs {oracle}", r.p_value);
        if r.n_effective > 0 {
            assert_eq!(r.method, WilcoxonMethod::Exact);
        }
    }
}

#[test]
fn exact_method_matches_enumeration_up_to_twenty() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for _ in 0..10 {
        let n = rng.random_range(13..=20);
        let (x, y) = paired(&mut rng, n);
        let r = wilcoxon_signed_rank(&x, &y).unwrap();
        assert!((r.p_value - enumeration_p(&x, &y)).abs() <= 1e-12);
    }
}

#[test]
fn identical_samples_give_p_one() {
    let x = [0.9, 0.8, 0.95, 0.7];
    let r = wilcoxon_signed_rank(&x, &x).unwrap();
    assert_eq!(r.p_value, 1.0);
    assert_eq!(r.n_effective, 0);
}

#[test]
fn all_positive_six_is_one_over_thirty_two() {
    let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let y = [0.0; 6];
    let r = wilcoxon_signed_rank(&x, &y).unwrap();
    assert_eq!(r.p_value, 0.03125);
    assert_eq!((r.w_plus, r.w_minus), (21.0, 0.0));
}

#[test]
fn large_samples_use_tie_corrected_normal() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let n = rng.random_range(21..80);
        let (x, y) = paired(&mut rng, n);
        let r = wilcoxon_signed_rank(&x, &y).unwrap();
        let d: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
        let m = d.len() as f64;
        let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
        let ranks = average_ranks(&abs);
        let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        let mut tie_term = 0.0;
        let mut i = 0;
        while i < sorted.len() {
            let j = sorted[i..].iter().take_while(|v| **v == sorted[i]).count();
            tie_term += (j * j * j - j) as f64;
            i += j;
        }
        let mean = m * (m + 1.0) / 4.0;
        let var = m * (m + 1.0) * (2.0 * m + 1.0) / 24.0 - tie_term / 48.0;
        let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
        let p = (2.0 * (1.0 - Normal::standard().cdf(z))).clamp(f64::MIN_POSITIVE, 1.0);
        if d.len() > 20 {
            assert_eq!(r.method, WilcoxonMethod::NormalApproximation);
            assert!((r.p_value - p).abs() < 1e-12, "{} vs {p}", r.p_value);
        }
    }
}

#[test]
fn symmetric_in_argument_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let n = rng.random_range(1..40);
        let (x, y) = paired(&mut rng, n);
        let (a, b) = (wilcoxon_signed_rank(&x, &y).unwrap(), wilcoxon_signed_rank(&y, &x).unwrap());
        assert_eq!(a.p_value, b.p_value);
        assert_eq!((a.w_plus, a.w_minus), (b.w_minus, b.w_plus));
    }
}

#[test]
fn length_mismatch_is_rejected() {
    assert!(wilcoxon_signed_rank(&[1.0, 2.0], &[1.0]).is_err());
}
