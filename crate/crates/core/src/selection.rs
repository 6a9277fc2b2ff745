//! Confidence-guided token selection: thresholds, masks, and the controls
//! (random count-matched, high-confidence-only, all tokens).
//!
//! A token is selected when its probability under the current policy is at or
//! below the response's threshold (inclusive comparison). Thresholds are
//! always computed per response, never pooled across a pair, and masks are
//! recomputed from the current policy at every optimization step.

use crate::seed;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("probabilities must be non-empty")]
    EmptyProbs,
    #[error("probability at index {index} is {value}; must lie in (0, 1]")]
    InvalidProb { index: usize, value: f64 },
    #[error("fixed threshold {0} must lie in (0, 1)")]
    InvalidFixedThreshold(f64),
    #[error("random selection count {count} out of range 1..={len}")]
    CountOutOfRange { count: usize, len: usize },
    #[error("threshold undefined for random selection mode")]
    NoThresholdForRandom,
}

/// Threshold policy for the selection indicator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ThresholdSpec {
    /// Mean token probability of the response.
    Arithmetic,
    /// Geometric mean, computed in log space.
    Geometric,
    /// A fixed cutoff in (0, 1).
    Fixed { value: f64 },
    /// Select every token.
    All,
    /// Count-matched uniformly-random control: as many tokens as the
    /// arithmetic-threshold mask would select, at random positions.
    Random { seed: u64 },
}

impl ThresholdSpec {
    pub fn validate(&self) -> Result<(), SelectionError> {
        if let ThresholdSpec::Fixed { value } = self {
            if !(*value > 0.0 && *value < 1.0) {
                return Err(SelectionError::InvalidFixedThreshold(*value));
            }
        }
        Ok(())
    }
}

/// Binary per-token inclusion flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionMask {
    bits: Vec<bool>,
    count: usize,
}

impl SelectionMask {
    pub fn new(bits: Vec<bool>) -> Self {
        let count = bits.iter().filter(|b| **b).count();
        Self { bits, count }
    }

    pub fn all_ones(len: usize) -> Self {
        Self {
            bits: vec![true; len],
            count: len,
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_set(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

fn validate_probs(probs: &[f64]) -> Result<(), SelectionError> {
    if probs.is_empty() {
        return Err(SelectionError::EmptyProbs);
    }
    for (index, &value) in probs.iter().enumerate() {
        if !(value > 0.0 && value <= 1.0) {
            return Err(SelectionError::InvalidProb { index, value });
        }
    }
    Ok(())
}

fn min_prob(probs: &[f64]) -> f64 {
    probs.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Per-response confidence threshold.
///
/// For the averaging modes the result is clamped up to min(probs); the true
/// mean can never lie below the minimum, but its floating-point evaluation
/// can, and the at-least-one-token invariant rides on that bound.
pub fn compute_threshold(probs: &[f64], spec: &ThresholdSpec) -> Result<f64, SelectionError> {
    validate_probs(probs)?;
    spec.validate()?;
    let n = probs.len() as f64;
    match spec {
        ThresholdSpec::Arithmetic => {
            let mean = probs.iter().sum::<f64>() / n;
            Ok(mean.max(min_prob(probs)))
        }
        ThresholdSpec::Geometric => {
            let mean = (probs.iter().map(|p| p.ln()).sum::<f64>() / n).exp();
            Ok(mean.max(min_prob(probs)))
        }
        ThresholdSpec::Fixed { value } => Ok(*value),
        ThresholdSpec::All => Ok(1.0),
        ThresholdSpec::Random { .. } => Err(SelectionError::NoThresholdForRandom),
    }
}

/// Indicator mask: bit_i = (prob_i <= tau), inclusive.
pub fn select_tokens(probs: &[f64], tau: f64) -> SelectionMask {
    SelectionMask::new(probs.iter().map(|&p| p <= tau).collect())
}

/// Complement of [`select_tokens`]: strictly-above-threshold tokens only.
/// May be empty; callers must reject empty masks.
pub fn high_confidence_mask(probs: &[f64], tau: f64) -> SelectionMask {
    SelectionMask::new(probs.iter().map(|&p| p > tau).collect())
}

/// Uniformly random subset of exactly `count` positions.
pub fn random_mask(len: usize, count: usize, seed_value: u64) -> Result<SelectionMask, SelectionError> {
    if count == 0 || count > len {
        return Err(SelectionError::CountOutOfRange { count, len });
    }
    let mut rng = seed::rng(seed_value, "random-mask", 0);
    // Partial Fisher-Yates over position indices.
    let mut idx: Vec<usize> = (0..len).collect();
    for i in 0..count {
        let j = rng.gen_range(i..len);
        idx.swap(i, j);
    }
    let mut bits = vec![false; len];
    for &i in &idx[..count] {
        bits[i] = true;
    }
    Ok(SelectionMask::new(bits))
}

/// Fraction of tokens selected, in (0, 1] for non-empty masks.
pub fn selection_ratio(mask: &SelectionMask) -> f64 {
    debug_assert!(!mask.is_empty());
    mask.count() as f64 / mask.len() as f64
}

/// Mask for one response under a threshold policy. This is the single entry
/// point the trainer uses each step; `salt` decorrelates random draws across
/// (step, example, side).
pub fn mask_for(
    probs: &[f64],
    spec: &ThresholdSpec,
    salt: u64,
) -> Result<SelectionMask, SelectionError> {
    validate_probs(probs)?;
    spec.validate()?;
    match spec {
        ThresholdSpec::Arithmetic | ThresholdSpec::Geometric | ThresholdSpec::All => {
            let tau = compute_threshold(probs, spec)?;
            Ok(select_tokens(probs, tau))
        }
        ThresholdSpec::Fixed { value } => {
            let mask = select_tokens(probs, *value);
            if mask.count() > 0 {
                return Ok(mask);
            }
            // Every token sits above the fixed cutoff; the objective needs at
            // least one selected token, so take the least confident one.
            log::warn!(
                "fixed threshold {value} selected no tokens; falling back to the minimum-probability token"
            );
            let min_idx = probs
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            let mut bits = vec![false; probs.len()];
            bits[min_idx] = true;
            Ok(SelectionMask::new(bits))
        }
        ThresholdSpec::Random { seed: s } => {
            let tau = compute_threshold(probs, &ThresholdSpec::Arithmetic)?;
            let count = select_tokens(probs, tau).count();
            random_mask(probs.len(), count, seed::derive(*s, "mask-salt", salt))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn arithmetic_threshold_is_the_mean() {
        let tau = compute_threshold(&[0.1, 0.5, 0.9], &ThresholdSpec::Arithmetic).unwrap();
        assert!((tau - 0.5).abs() < 1e-15);
    }

    #[test]
    fn geometric_threshold_small_case() {
        let tau = compute_threshold(&[0.25, 1.0], &ThresholdSpec::Geometric).unwrap();
        assert!((tau - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fixed_threshold_passes_through() {
        let tau = compute_threshold(&[0.2, 0.8], &ThresholdSpec::Fixed { value: 0.6 }).unwrap();
        assert_eq!(tau, 0.6);
    }

    #[test]
    fn all_mode_selects_everything() {
        let tau = compute_threshold(&[0.2, 0.8], &ThresholdSpec::All).unwrap();
        let mask = select_tokens(&[0.2, 0.8], tau);
        assert_eq!(mask.count(), 2);
    }

    #[test]
    fn empty_probs_is_an_error() {
        assert!(matches!(
            compute_threshold(&[], &ThresholdSpec::Arithmetic),
            Err(SelectionError::EmptyProbs)
        ));
    }

    #[test]
    fn selection_is_inclusive_at_the_threshold() {
        let mask = select_tokens(&[0.1, 0.5, 0.9], 0.5);
        assert_eq!(mask.bits(), &[true, true, false]);
        assert_eq!(mask.count(), 2);
    }

    #[test]
    fn equal_probs_select_everything_under_arithmetic() {
        let probs = vec![0.1; 7];
        let tau = compute_threshold(&probs, &ThresholdSpec::Arithmetic).unwrap();
        let mask = select_tokens(&probs, tau);
        assert_eq!(mask.count(), 7);
    }

    #[test]
    fn high_confidence_is_the_complement() {
        let probs = [0.1, 0.5, 0.9];
        let low = select_tokens(&probs, 0.5);
        let high = high_confidence_mask(&probs, 0.5);
        assert_eq!(high.bits(), &[false, false, true]);
        for i in 0..probs.len() {
            assert!(low.is_set(i) ^ high.is_set(i));
        }
        // All probs equal: everything is <= tau, complement is empty.
        let same = [0.3, 0.3];
        assert_eq!(high_confidence_mask(&same, 0.3).count(), 0);
    }

    #[test]
    fn random_mask_has_exact_count_and_is_seeded() {
        let a = random_mask(5, 2, 99).unwrap();
        assert_eq!(a.count(), 2);
        let b = random_mask(5, 2, 99).unwrap();
        assert_eq!(a, b);
        let full = random_mask(4, 4, 1).unwrap();
        assert_eq!(full.bits(), &[true; 4]);
        assert!(matches!(
            random_mask(3, 0, 1),
            Err(SelectionError::CountOutOfRange { .. })
        ));
        assert!(matches!(
            random_mask(3, 4, 1),
            Err(SelectionError::CountOutOfRange { .. })
        ));
    }

    #[test]
    fn ratio_is_count_over_length() {
        let mask = SelectionMask::new(vec![true, true, false, false]);
        assert_eq!(selection_ratio(&mask), 0.5);
        assert_eq!(selection_ratio(&SelectionMask::all_ones(3)), 1.0);
    }

    #[test]
    fn fixed_mode_falls_back_to_minimum_probability_token() {
        let mask = mask_for(&[0.7, 0.65, 0.9], &ThresholdSpec::Fixed { value: 0.5 }, 0).unwrap();
        assert_eq!(mask.count(), 1);
        assert!(mask.is_set(1));
    }

    #[test]
    fn random_mode_count_matches_arithmetic() {
        let probs = [0.1, 0.2, 0.9, 0.8, 0.3];
        let arith = mask_for(&probs, &ThresholdSpec::Arithmetic, 0).unwrap();
        let rand = mask_for(&probs, &ThresholdSpec::Random { seed: 5 }, 0).unwrap();
        assert_eq!(rand.count(), arith.count());
        // Distinct salts draw distinct subsets (with overwhelming probability
        // at this size), same salt repeats.
        let again = mask_for(&probs, &ThresholdSpec::Random { seed: 5 }, 0).unwrap();
        assert_eq!(rand, again);
    }

    #[test]
    fn invalid_probs_are_rejected() {
        assert!(matches!(
            compute_threshold(&[0.5, 0.0], &ThresholdSpec::Arithmetic),
            Err(SelectionError::InvalidProb { index: 1, .. })
        ));
        assert!(matches!(
            compute_threshold(&[0.5, 1.2], &ThresholdSpec::Arithmetic),
            Err(SelectionError::InvalidProb { index: 1, .. })
        ));
        assert!(matches!(
            compute_threshold(&[0.5], &ThresholdSpec::Fixed { value: 1.0 }),
            Err(SelectionError::InvalidFixedThreshold(_))
        ));
    }

    proptest! {
        /// The averaging modes always select at least one token, and
        /// selection/complement partition the positions.
        #[test]
        fn averaging_modes_never_produce_empty_masks(
            probs in proptest::collection::vec(1e-6f64..=1.0, 1..64)
        ) {
            for spec in [ThresholdSpec::Arithmetic, ThresholdSpec::Geometric] {
                let tau = compute_threshold(&probs, &spec).unwrap();
                let low = select_tokens(&probs, tau);
                prop_assert!(low.count() >= 1);
                let high = high_confidence_mask(&probs, tau);
                prop_assert_eq!(low.count() + high.count(), probs.len());
                for i in 0..probs.len() {
                    prop_assert!(low.is_set(i) ^ high.is_set(i));
                }
            }
        }

        /// log-space geometric mean agrees with the direct product form.
        #[test]
        fn geometric_mean_matches_direct_product(
            probs in proptest::collection::vec(0.01f64..=1.0, 1..=64)
        ) {
            let tau = compute_threshold(&probs, &ThresholdSpec::Geometric).unwrap();
            let direct = probs.iter().product::<f64>().powf(1.0 / probs.len() as f64);
            let rel = (tau - direct).abs() / direct.max(1e-300);
            prop_assert!(rel <= 1e-12, "tau {} direct {}", tau, direct);
        }

        /// Constant-probability responses select all tokens (mean equality is
        /// inclusive) under both averaging modes.
        #[test]
        fn constant_probs_select_all(p in 1e-6f64..=1.0, n in 1usize..32) {
            let probs = vec![p; n];
            for spec in [ThresholdSpec::Arithmetic, ThresholdSpec::Geometric] {
                let tau = compute_threshold(&probs, &spec).unwrap();
                prop_assert_eq!(select_tokens(&probs, tau).count(), n);
            }
        }
    }
}
