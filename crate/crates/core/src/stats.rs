//! Paired two-sided randomization (sign-flip permutation) test on per-item metric arrays.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_ROUNDS: usize = 10_000;
pub const DEFAULT_ALPHA: f64 = 0.05;
pub const MAX_EXACT_ITEMS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigTestResult {
    pub observed_diff: f64,
    pub p_value: f64,
    /// Sampled rounds, or `2^N` for the exact test.
    pub rounds: usize,
    pub significant: bool,
}

fn paired_diffs(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::Empty("paired arrays"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("significance test input".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
}

/// Mean of the differences with each sign flipped where `flip(i)` is true.
fn flipped_mean(diffs: &[f64], mut flip: impl FnMut(usize) -> bool) -> f64 {
    let sum: f64 = diffs
        .iter()
        .enumerate()
        .map(|(i, d)| if flip(i) { -d } else { *d })
        .sum();
    sum / diffs.len() as f64
}

/// Flip patterns that tie the observed statistic up to summation rounding count as "at least as extreme".
fn at_least_as_extreme(stat: f64, observed: f64) -> bool {
    stat.abs() >= observed.abs() - 1e-12 * observed.abs().max(1.0)
}

/// Sampled test: each round flips each pair independently with probability 1/2;
/// `p = (c + 1) / (rounds + 1)`.
pub fn randomization_test(a: &[f64], b: &[f64], rounds: usize, alpha: f64, seed: u64) -> Result<SigTestResult> {
    let diffs = paired_diffs(a, b)?;
    if rounds < 1 {
        return Err(Error::Config("rounds must be at least 1".into()));
    }
    let observed = flipped_mean(&diffs, |_| false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exceed = (0..rounds)
        .filter(|_| at_least_as_extreme(flipped_mean(&diffs, |_| rng.gen::<bool>()), observed))
        .count();
    let p_value = (exceed + 1) as f64 / (rounds + 1) as f64;
    Ok(SigTestResult {
        observed_diff: observed,
        p_value,
        rounds,
        significant: p_value < alpha,
    })
}

/// Enumerates all `2^N` flip patterns (N ≤ 20).
pub fn exact_randomization_test(a: &[f64], b: &[f64], alpha: f64) -> Result<SigTestResult> {
    let diffs = paired_diffs(a, b)?;
    if diffs.len() > MAX_EXACT_ITEMS {
        return Err(Error::Config(format!(
            "exact enumeration supports at most {MAX_EXACT_ITEMS} items, got {}",
            diffs.len()
        )));
    }
    let observed = flipped_mean(&diffs, |_| false);
    let patterns = 1usize << diffs.len();
    let count = (0..patterns)
        .filter(|mask| at_least_as_extreme(flipped_mean(&diffs, |i| mask >> i & 1 == 1), observed))
        .count();
    let p_value = count as f64 / patterns as f64;
    Ok(SigTestResult {
        observed_diff: observed,
        p_value,
        rounds: patterns,
        significant: p_value < alpha,
    })
}
