//! Random dropping: training-time masking of a random channel subset,
//! applied identically to the model input and the training target. Each step
//! draws a rate `r_d ~ Uniform[0, max_rate]` and zeroes a uniformly random
//! subset of `floor(r_d * C)` channels; at least one channel is always kept.
//! Evaluation never touches this module (a call-count probe verifies it).

use crate::error::{Error, Result};
use crate::rng::Rng;
use rand::Rng as _;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

/// One draw: which channels survive, and the rate that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct DropMask {
    pub keep: Vec<bool>,
    pub rate: f64,
}

impl DropMask {
    pub fn channels(&self) -> usize {
        self.keep.len()
    }

    pub fn dropped(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }

    pub fn keep_all(channels: usize) -> Self {
        DropMask { keep: vec![true; channels], rate: 0.0 }
    }
}

#[derive(Debug)]
pub struct RandomDropping {
    pub max_rate: f64,
    probe: Arc<AtomicU64>,
}

impl Clone for RandomDropping {
    fn clone(&self) -> Self {
        RandomDropping { max_rate: self.max_rate, probe: Arc::clone(&self.probe) }
    }
}

impl RandomDropping {
    pub fn new(max_rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&max_rate) {
            return Err(Error::Config(format!("random-dropping max rate {max_rate} outside [0, 1)")));
        }
        Ok(RandomDropping { max_rate, probe: Arc::new(AtomicU64::new(0)) })
    }

    /// Draws a fresh mask. Counted by the probe, so tests can assert the
    /// evaluation path never lands here.
    pub fn sample_mask(&self, channels: usize, rng: &mut Rng) -> DropMask {
        self.probe.fetch_add(1, Ordering::Relaxed);
        let rate = rng.gen::<f64>() * self.max_rate;
        let mut n_drop = (rate * channels as f64).floor() as usize;
        if n_drop >= channels {
            n_drop = channels - 1;
        }
        // Partial Fisher-Yates: the first `n_drop` entries are the dropped set.
        let mut idx: Vec<usize> = (0..channels).collect();
        for i in 0..n_drop {
            let j = rng.gen_range(i..channels);
            idx.swap(i, j);
        }
        let mut keep = vec![true; channels];
        for &d in &idx[..n_drop] {
            keep[d] = false;
        }
        DropMask { keep, rate }
    }

    /// How many masks have been drawn since construction.
    pub fn probe_count(&self) -> u64 {
        self.probe.load(Ordering::Relaxed)
    }
}

/// Zeroes the dropped channels of both row-major `L x C` blocks in place with
/// the same mask; kept channels are untouched.
pub fn apply_mask(mask: &DropMask, input: &mut [f64], target: &mut [f64]) -> Result<()> {
    let c = mask.channels();
    if input.len() % c != 0 || target.len() % c != 0 {
        return Err(Error::shape(
            "random_dropping",
            format!("block lengths {}/{} not divisible by {} channels", input.len(), target.len(), c),
        ));
    }
    for block in [input, target] {
        for row in block.chunks_mut(c) {
            for (v, &kept) in row.iter_mut().zip(&mask.keep) {
                if !kept {
                    *v = 0.0;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seed_rng;

    #[test]
    fn zero_rate_keeps_everything() {
        let rd = RandomDropping::new(0.0).unwrap();
        let mut rng = seed_rng(0);
        let mask = rd.sample_mask(8, &mut rng);
        assert_eq!(mask.dropped(), 0);
    }

    #[test]
    fn single_channel_is_always_kept() {
        let rd = RandomDropping::new(0.99).unwrap();
        let mut rng = seed_rng(1);
        for _ in 0..1000 {
            let mask = rd.sample_mask(1, &mut rng);
            assert!(mask.keep[0]);
        }
    }

    #[test]
    fn dropped_count_follows_floor_of_rate() {
        let rd = RandomDropping::new(0.99).unwrap();
        let mut rng = seed_rng(2);
        for _ in 0..1000 {
            let mask = rd.sample_mask(8, &mut rng);
            assert_eq!(mask.dropped(), (mask.rate * 8.0).floor() as usize);
        }
    }

    #[test]
    fn empirical_dropped_fraction_matches_analytic_expectation() {
        let rd = RandomDropping::new(0.99).unwrap();
        let mut rng = seed_rng(3);
        let (c, trials) = (8usize, 10_000usize);
        let mut dropped = 0usize;
        for _ in 0..trials {
            dropped += rd.sample_mask(c, &mut rng).dropped();
        }
        let empirical = dropped as f64 / (trials * c) as f64;
        // E[floor(cr)]/c for r ~ U[0, 0.99], by piecewise integration.
        let rmax = 0.99;
        let mut expectation = 0.0;
        for k in 0..c {
            let lo = k as f64 / c as f64;
            let hi = ((k + 1) as f64 / c as f64).min(rmax);
            if hi > lo {
                expectation += k as f64 * (hi - lo) / rmax;
            }
        }
        let analytic = expectation / c as f64;
        assert!(
            (empirical - analytic).abs() / analytic <= 0.02,
            "empirical {empirical} vs analytic {analytic}"
        );
    }

    #[test]
    fn apply_keep_all_is_identity() {
        let mask = DropMask::keep_all(2);
        let mut input = vec![1.0, 2.0, 3.0, 4.0];
        let mut target = vec![5.0, 6.0];
        let orig = (input.clone(), target.clone());
        apply_mask(&mask, &mut input, &mut target).unwrap();
        assert_eq!((input, target), orig);
    }

    #[test]
    fn apply_zeroes_dropped_channel_in_both_blocks() {
        let mask = DropMask { keep: vec![false, true], rate: 0.5 };
        let mut input = vec![1.0, 2.0, 3.0, 4.0];
        let mut target = vec![5.0, 6.0];
        apply_mask(&mask, &mut input, &mut target).unwrap();
        assert_eq!(input, vec![0.0, 2.0, 0.0, 4.0]);
        assert_eq!(target, vec![0.0, 6.0]);
        // Same mask object on both blocks: zero patterns agree per channel.
        assert_eq!(input[0], target[0]);
    }

    #[test]
    fn channel_mismatch_fails() {
        let mask = DropMask::keep_all(3);
        let mut input = vec![0.0; 4];
        let mut target = vec![0.0; 3];
        assert!(apply_mask(&mask, &mut input, &mut target).is_err());
    }

    #[test]
    fn masked_channels_contribute_zero_squared_error() {
        // With the model output forced to zero on dropped channels and the
        // target zeroed by the same mask, those channels add nothing to MSE.
        let mask = DropMask { keep: vec![false, true], rate: 0.5 };
        let mut input = vec![0.3, -0.4, 1.2, 0.9];
        let mut target = vec![2.0, -1.0];
        apply_mask(&mask, &mut input, &mut target).unwrap();
        let forced_output = [0.0, 0.5];
        let err_dropped = (forced_output[0] - target[0]).powi(2);
        assert_eq!(err_dropped, 0.0);
    }

    #[test]
    fn mask_sequence_is_deterministic_per_seed() {
        let rd = RandomDropping::new(0.99).unwrap();
        let seq = |seed: u64| {
            let mut rng = seed_rng(seed);
            (0..50).map(|_| rd.sample_mask(6, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(seq(7), seq(7));
        assert_ne!(seq(7), seq(8));
    }

    #[test]
    fn probe_counts_every_draw() {
        let rd = RandomDropping::new(0.5).unwrap();
        let mut rng = seed_rng(9);
        assert_eq!(rd.probe_count(), 0);
        for _ in 0..5 {
            rd.sample_mask(4, &mut rng);
        }
        assert_eq!(rd.probe_count(), 5);
        // Clones share the probe, mirroring shared use across threads.
        let clone = rd.clone();
        clone.sample_mask(4, &mut rng);
        assert_eq!(rd.probe_count(), 6);
    }
}
