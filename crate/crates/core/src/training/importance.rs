use std::collections::VecDeque;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_HISTORY: usize = 10;

/// Loss-aware timestep sampler.
///
/// Keeps the last `history_len` squared losses seen at every timestep. Until
/// each timestep has a full history, timesteps are drawn uniformly; after
/// that `p(t)` is proportional to the root mean square of the stored losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceSampler {
    timesteps: usize,
    history_len: usize,
    history: Vec<VecDeque<f64>>,
}

impl ImportanceSampler {
    pub fn new(timesteps: usize, history_len: usize) -> Result<Self> {
        if timesteps == 0 || history_len == 0 {
            return Err(Error::invalid("importance sampler needs timesteps and history > 0"));
        }
        Ok(Self {
            timesteps,
            history_len,
            history: vec![VecDeque::with_capacity(history_len); timesteps],
        })
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn is_warm(&self) -> bool {
        self.history.iter().all(|h| h.len() == self.history_len)
    }

    /// Records the (unsquared) loss observed at 1-based timestep `t`.
    pub fn update(&mut self, t: usize, loss: f64) {
        let h = &mut self.history[t - 1];
        if h.len() == self.history_len {
            h.pop_front();
        }
        h.push_back(loss * loss);
    }

    /// `p(t)` for `t = 1..=T` (index 0 is `t = 1`).
    pub fn probabilities(&self) -> Vec<f64> {
        let uniform = vec![1.0 / self.timesteps as f64; self.timesteps];
        if !self.is_warm() {
            return uniform;
        }
        let mut w: Vec<f64> = self
            .history
            .iter()
            .map(|h| (h.iter().sum::<f64>() / h.len() as f64).sqrt())
            .collect();
        let max = w.iter().cloned().fold(0.0, f64::max);
        if !(max.is_finite() && max > 0.0) {
            return uniform;
        }
        // keep every timestep reachable
        for x in &mut w {
            *x = x.max(max * 1e-12);
        }
        let total: f64 = w.iter().sum();
        w.iter().map(|x| x / total).collect()
    }

    /// Draws `t ~ p` and returns it with the weight `1 / (T p(t))`, which
    /// makes the weighted loss an unbiased estimate of the uniform average.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, f64) {
        self.sample_many(rng, 1)[0]
    }

    pub fn sample_many<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Vec<(usize, f64)> {
        if !self.is_warm() {
            return (0..count)
                .map(|_| (rng.gen_range(1..=self.timesteps), 1.0))
                .collect();
        }
        let p = self.probabilities();
        let dist = WeightedIndex::new(&p).expect("probabilities are positive and finite");
        let t_count = self.timesteps as f64;
        (0..count)
            .map(|_| {
                let i = dist.sample(rng);
                (i + 1, 1.0 / (t_count * p[i]))
            })
            .collect()
    }
}

/// Free-function form of [`ImportanceSampler::sample`].
pub fn sample_timestep<R: Rng + ?Sized>(sampler: &ImportanceSampler, rng: &mut R) -> (usize, f64) {
    sampler.sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn warmed(losses: &[f64], k: usize) -> ImportanceSampler {
        let mut s = ImportanceSampler::new(losses.len(), k).unwrap();
        for _ in 0..k {
            for (i, &l) in losses.iter().enumerate() {
                s.update(i + 1, l);
            }
        }
        s
    }

    #[test]
    fn uniform_until_warm() {
        let mut s = ImportanceSampler::new(3, 2).unwrap();
        s.update(1, 5.0);
        s.update(2, 1.0);
        s.update(3, 1.0);
        assert!(!s.is_warm());
        assert_eq!(s.probabilities(), vec![1.0 / 3.0; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(s.sample_many(&mut rng, 100).iter().all(|&(t, w)| (1..=3).contains(&t) && w == 1.0));
    }

    #[test]
    fn flat_history_gives_unit_weights() {
        let s = warmed(&[2.0; 5], 10);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (_, w) in s.sample_many(&mut rng, 50) {
            assert!((w - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_timestep_example() {
        // mean squared losses 1 and 4
        let s = warmed(&[1.0, 2.0], 10);
        let p = s.probabilities();
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-12 && (p[1] - 2.0 / 3.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (t, w) in s.sample_many(&mut rng, 100) {
            let expected = if t == 1 { 1.5 } else { 0.75 };
            assert!((w - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn ring_buffer_forgets() {
        let mut s = warmed(&[1.0, 1.0], 2);
        s.update(2, 3.0);
        s.update(2, 3.0);
        let p = s.probabilities();
        assert!((p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn zero_losses_stay_reachable() {
        let s = warmed(&[0.0, 1.0, 0.0], 1);
        assert!(s.probabilities().iter().all(|&p| p > 0.0));
        let z = warmed(&[0.0, 0.0], 1);
        assert_eq!(z.probabilities(), vec![0.5, 0.5]);
    }
}
