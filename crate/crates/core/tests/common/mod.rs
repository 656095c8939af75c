//! Shared oracles for the integration and acceptance tests.

#![allow(dead_code)]

pub mod gradcheck;

/// Brute-force AP: for every positive, the precision among all items scored
/// at least as high as it, with ties broken by original position (the same
/// stable order a descending sort produces).
pub fn ap_oracle(scores: &[f64], truth: &[u8]) -> Option<f64> {
    let positives: Vec<usize> = (0..scores.len()).filter(|&i| truth[i] == 1).collect();
    if positives.is_empty() {
        return None;
    }
    let ranked_before = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j <= i);
    let mut total = 0.0;
    for &i in &positives {
        let above: Vec<usize> = (0..scores.len()).filter(|&j| ranked_before(j, i)).collect();
        let hits = above.iter().filter(|&&j| truth[j] == 1).count();
        total += hits as f64 / above.len() as f64;
    }
    Some(total / positives.len() as f64)
}

/// Brute-force AUC: the fraction of (positive, negative) pairs ordered
/// correctly, counting ties as one half.
pub fn auc_oracle(scores: &[f64], truth: &[u8]) -> Option<f64> {
    let pos: Vec<f64> = (0..scores.len()).filter(|&i| truth[i] == 1).map(|i| scores[i]).collect();
    let neg: Vec<f64> = (0..scores.len()).filter(|&i| truth[i] == 0).map(|i| scores[i]).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

/// Inverse normal CDF by bisection on `statrs`'s CDF, independent of the
/// rational approximation used by the library.
pub fn probit_oracle(p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    let n = Normal::new(0.0, 1.0).unwrap();
    let (mut lo, mut hi) = (-40.0_f64, 40.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if n.cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
