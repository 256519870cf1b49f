//! Noise schedule and the closed-form forward (corruption) process.
//!
//! Timesteps are 1-based in every public method: `t = 1` is the least noisy
//! step and `t = T` the noisiest. `alpha_bar(0)` is defined as 1 so that
//! samplers can step all the way down to the clean latent.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LINEAR_BETA_START: f64 = 0.0001;
pub const LINEAR_BETA_END: f64 = 0.02;

/// Serializable description of a schedule, enough to rebuild it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub kind: ScheduleKind,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

impl ScheduleParams {
    pub fn linear(timesteps: usize) -> Self {
        Self {
            kind: ScheduleKind::Linear,
            timesteps,
            beta_start: LINEAR_BETA_START,
            beta_end: LINEAR_BETA_END,
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        match self.kind {
            ScheduleKind::Linear => {
                NoiseSchedule::linear_with_endpoints(self.timesteps, self.beta_start, self.beta_end)
            }
        }
    }
}

/// Variance schedule `beta_1..beta_T` with the derived `alpha` and cumulative
/// `alpha_bar` products. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linear schedule from 1e-4 at `t = 1` to 0.02 at `t = T`.
pub fn make_linear_schedule(timesteps: usize) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(timesteps)
}

impl NoiseSchedule {
    pub fn linear(timesteps: usize) -> Result<Self> {
        Self::linear_with_endpoints(timesteps, LINEAR_BETA_START, LINEAR_BETA_END)
    }

    pub fn linear_with_endpoints(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps < 2 {
            return Err(Error::invalid(format!(
                "schedule needs at least 2 timesteps, got {timesteps}"
            )));
        }
        let valid = |b: f64| b > 0.0 && b < 1.0;
        if !valid(beta_start) || !valid(beta_end) || beta_start >= beta_end {
            return Err(Error::invalid(format!(
                "beta endpoints must satisfy 0 < start < end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let span = (timesteps - 1) as f64;
        let betas: Vec<f64> = (0..timesteps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0f64, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            params: ScheduleParams {
                kind: ScheduleKind::Linear,
                timesteps,
                beta_start,
                beta_end,
            },
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    /// Number of diffusion steps `T`.
    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product up to and including `t`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::invalid(format!(
                "timestep {t} outside [1, {}]",
                self.timesteps()
            )));
        }
        Ok(())
    }

    /// Samples `q(y_t | y_0)` in closed form with caller-supplied standard
    /// normal `noise`.
    pub fn q_sample(&self, y0: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        self.check_timestep(t)?;
        if y0.dims() != noise.dims() {
            return Err(Error::invalid(format!(
                "noise shape {:?} does not match latent shape {:?}",
                noise.dims(),
                y0.dims()
            )));
        }
        let ab = self.alpha_bar(t);
        Ok(((y0 * ab.sqrt())? + (noise * (1.0 - ab).sqrt())?)?)
    }

    /// Batched closed-form corruption with one timestep per leading-axis item.
    pub fn q_sample_batch(&self, y0: &Tensor, ts: &[usize], noise: &Tensor) -> Result<Tensor> {
        if y0.dims() != noise.dims() {
            return Err(Error::invalid(format!(
                "noise shape {:?} does not match latent shape {:?}",
                noise.dims(),
                y0.dims()
            )));
        }
        let batch = y0.dim(0)?;
        if ts.len() != batch {
            return Err(Error::invalid(format!(
                "{} timesteps for a batch of {batch}",
                ts.len()
            )));
        }
        let mut signal = Vec::with_capacity(batch);
        let mut sigma = Vec::with_capacity(batch);
        for &t in ts {
            self.check_timestep(t)?;
            let ab = self.alpha_bar(t);
            signal.push(ab.sqrt());
            sigma.push((1.0 - ab).sqrt());
        }
        let mut shape = vec![batch];
        shape.extend(std::iter::repeat(1).take(y0.rank() - 1));
        let signal = Tensor::from_vec(signal, shape.as_slice(), y0.device())?.to_dtype(y0.dtype())?;
        let sigma = Tensor::from_vec(sigma, shape.as_slice(), y0.device())?.to_dtype(y0.dtype())?;
        Ok((y0.broadcast_mul(&signal)? + noise.broadcast_mul(&sigma)?)?)
    }

    /// One application of the single-step kernel `q(y_t | y_{t-1})`.
    pub fn q_step(&self, y_prev: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        self.check_timestep(t)?;
        let beta = self.beta(t);
        Ok(((y_prev * (1.0 - beta).sqrt())? + (noise * beta.sqrt())?)?)
    }
}

/// Standard transformer sinusoidal features with interleaved `sin`/`cos`
/// channels: channel `2i` is `sin(p / 10000^(2i/dim))`, channel `2i + 1` the
/// matching cosine.
pub fn sinusoidal_embedding(position: usize, dim: usize) -> Result<Vec<f32>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::invalid(format!(
            "sinusoidal dimension must be even and positive, got {dim}"
        )));
    }
    let p = position as f64;
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = (-(10000f64.ln()) * (2 * i) as f64 / dim as f64).exp();
        let angle = p * freq;
        out.push(angle.sin() as f32);
        out.push(angle.cos() as f32);
    }
    Ok(out)
}

/// Stacks `sinusoidal_embedding` rows for each position into `[n, dim]`.
pub fn sinusoidal_table(positions: &[usize], dim: usize, device: &candle_core::Device) -> Result<Tensor> {
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        data.extend(sinusoidal_embedding(p, dim)?);
    }
    Ok(Tensor::from_vec(data, (positions.len(), dim), device)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn linear_endpoints() {
        let s = make_linear_schedule(1000).unwrap();
        assert_eq!(s.beta(1), 0.0001);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
        assert!(s.alpha_bar(1000) < 0.01);
        assert_eq!(s.alpha_bar(1), 1.0 - s.beta(1));
    }

    #[test]
    fn two_step_schedule() {
        let s = make_linear_schedule(2).unwrap();
        assert_eq!(s.betas(), &[0.0001, 0.02]);
        assert_eq!(s.alpha_bars()[0], 0.9999);
        assert_eq!(s.alpha_bars()[1], 0.9999 * 0.98);
    }

    #[test]
    fn rejects_short_schedule() {
        assert!(matches!(make_linear_schedule(1), Err(Error::InvalidArgument(_))));
        assert!(make_linear_schedule(0).is_err());
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        let s = make_linear_schedule(1000).unwrap();
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.betas().iter().all(|&b| b > 0.0 && b < 1.0));
    }

    #[test]
    fn q_sample_scalar() {
        let s = make_linear_schedule(1000).unwrap();
        let dev = Device::Cpu;
        let y0 = Tensor::new(&[1.0f64], &dev).unwrap();
        let noise = Tensor::new(&[1.0f64], &dev).unwrap();
        let out = s.q_sample(&y0, 1, &noise).unwrap().to_vec1::<f64>().unwrap();
        let expected = 0.9999f64.sqrt() + 0.0001f64.sqrt();
        assert!((out[0] - expected).abs() < 1e-12);
        assert!((out[0] - 1.00995).abs() < 1e-5);
    }

    #[test]
    fn q_sample_zero_noise_and_limit() {
        let s = make_linear_schedule(1000).unwrap();
        let dev = Device::Cpu;
        let y0 = Tensor::new(&[2.0f64, -3.0], &dev).unwrap();
        let zeros = Tensor::zeros(2, candle_core::DType::F64, &dev).unwrap();
        let out = s.q_sample(&y0, 500, &zeros).unwrap().to_vec1::<f64>().unwrap();
        let k = s.alpha_bar(500).sqrt();
        assert!((out[0] - 2.0 * k).abs() < 1e-12 && (out[1] + 3.0 * k).abs() < 1e-12);

        let noise = Tensor::new(&[0.5f64, -0.25], &dev).unwrap();
        let out = s.q_sample(&y0, 1000, &noise).unwrap().to_vec1::<f64>().unwrap();
        assert!((out[0] - 0.5).abs() < 0.05 && (out[1] + 0.25).abs() < 0.05);
    }

    #[test]
    fn q_sample_errors() {
        let s = make_linear_schedule(10).unwrap();
        let dev = Device::Cpu;
        let a = Tensor::new(&[1.0f32, 2.0], &dev).unwrap();
        let b = Tensor::new(&[1.0f32], &dev).unwrap();
        assert!(s.q_sample(&a, 1, &b).is_err());
        assert!(s.q_sample(&a, 0, &a).is_err());
        assert!(s.q_sample(&a, 11, &a).is_err());
    }

    #[test]
    fn q_sample_batch_matches_scalar() {
        let s = make_linear_schedule(100).unwrap();
        let dev = Device::Cpu;
        let y0 = Tensor::new(&[[1.0f64, 2.0], [3.0, 4.0]], &dev).unwrap();
        let noise = Tensor::new(&[[0.5f64, -1.0], [0.1, 0.2]], &dev).unwrap();
        let batch = s.q_sample_batch(&y0, &[3, 70], &noise).unwrap();
        for (row, t) in [(0usize, 3usize), (1, 70)] {
            let single = s
                .q_sample(&y0.get(row).unwrap(), t, &noise.get(row).unwrap())
                .unwrap();
            assert_eq!(
                batch.get(row).unwrap().to_vec1::<f64>().unwrap(),
                single.to_vec1::<f64>().unwrap()
            );
        }
    }

    #[test]
    fn sinusoid_position_zero() {
        let e = sinusoidal_embedding(0, 8).unwrap();
        for pair in e.chunks(2) {
            assert_eq!(pair[0], 0.0);
            assert_eq!(pair[1], 1.0);
        }
    }

    #[test]
    fn sinusoid_deterministic_and_distinct() {
        assert_eq!(sinusoidal_embedding(17, 16).unwrap(), sinusoidal_embedding(17, 16).unwrap());
        let a = sinusoidal_embedding(0, 4).unwrap();
        let b = sinusoidal_embedding(1, 4).unwrap();
        // sin(1) and sin(1/100)
        assert!((b[0] - 1f32.sin()).abs() < 1e-6);
        assert!((b[2] - 0.01f32.sin()).abs() < 1e-6);
        for i in [0, 2] {
            assert_ne!(a[i], b[i]);
        }
    }

    #[test]
    fn sinusoid_rejects_odd_dim() {
        assert!(sinusoidal_embedding(3, 5).is_err());
        assert!(sinusoidal_embedding(3, 0).is_err());
    }
}
