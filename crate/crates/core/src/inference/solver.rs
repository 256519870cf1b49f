use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Stochastic DDPM updates with variance `1 - alpha_bar_t / alpha_bar_s`.
    Ancestral,
    /// Deterministic DDIM updates, optionally second-order multistep.
    FewStep,
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ancestral" => Ok(Self::Ancestral),
            "fewstep" | "few_step" | "few-step" => Ok(Self::FewStep),
            _ => Err(Error::invalid(format!("unknown sampler '{s}'"))),
        }
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ancestral => "ancestral",
            Self::FewStep => "fewstep",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    pub steps: usize,
    /// Second-order multistep (DPM-Solver++ 2M) correction for `FewStep`.
    pub second_order: bool,
}

impl SamplerSpec {
    pub fn fewstep(steps: usize) -> Self {
        Self {
            kind: SamplerKind::FewStep,
            steps,
            second_order: false,
        }
    }

    pub fn ancestral(steps: usize) -> Self {
        Self {
            kind: SamplerKind::Ancestral,
            steps,
            second_order: false,
        }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > schedule.timesteps() {
            return Err(Error::invalid(format!(
                "step count {} outside [1, {}]",
                self.steps,
                schedule.timesteps()
            )));
        }
        Ok(())
    }
}

/// Model-evaluation timesteps, evenly spaced from `T` down to 1 and rounded.
/// Every sequence starts at `T`; with `steps = T` it visits every timestep.
pub fn timestep_sequence(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::invalid(format!("step count {steps} outside [1, {total}]")));
    }
    if steps == 1 {
        return Ok(vec![total]);
    }
    let span = (total - 1) as f64 / (steps - 1) as f64;
    Ok((0..steps)
        .map(|k| (total as f64 - k as f64 * span).round() as usize)
        .collect())
}

/// DDPM posterior-mean update from `t` to `s < t` given the `y0` prediction,
/// plus `sigma * noise` with `sigma^2 = 1 - alpha_bar_t / alpha_bar_s`.
/// At `s = 0` this returns `y0_hat` and ignores the noise.
pub fn ancestral_step(
    schedule: &NoiseSchedule,
    y_t: &Tensor,
    y0_hat: &Tensor,
    t: usize,
    s: usize,
    noise: &Tensor,
) -> Result<Tensor> {
    check_pair(schedule, t, s)?;
    if s == 0 {
        return Ok(y0_hat.clone());
    }
    let (ab_t, ab_s) = (schedule.alpha_bar(t), schedule.alpha_bar(s));
    let beta = 1.0 - ab_t / ab_s;
    let c0 = ab_s.sqrt() * beta / (1.0 - ab_t);
    let ct = (ab_t / ab_s).sqrt() * (1.0 - ab_s) / (1.0 - ab_t);
    Ok(((y0_hat.affine(c0, 0.0)? + y_t.affine(ct, 0.0)?)? + noise.affine(beta.sqrt(), 0.0)?)?)
}

/// Deterministic DDIM update (eta = 0) from `t` to `s < t`.
pub fn ddim_step(schedule: &NoiseSchedule, y_t: &Tensor, y0_hat: &Tensor, t: usize, s: usize) -> Result<Tensor> {
    check_pair(schedule, t, s)?;
    if s == 0 {
        return Ok(y0_hat.clone());
    }
    let (ab_t, ab_s) = (schedule.alpha_bar(t), schedule.alpha_bar(s));
    let ratio = ((1.0 - ab_s) / (1.0 - ab_t)).sqrt();
    // y_s = sqrt(ab_s) y0 + sqrt(1 - ab_s) eps, eps = (y_t - sqrt(ab_t) y0) / sqrt(1 - ab_t)
    let c0 = ab_s.sqrt() - ratio * ab_t.sqrt();
    Ok((y0_hat.affine(c0, 0.0)? + y_t.affine(ratio, 0.0)?)?)
}

fn lambda(schedule: &NoiseSchedule, t: usize) -> f64 {
    let ab = schedule.alpha_bar(t);
    0.5 * (ab / (1.0 - ab)).ln()
}

/// DPM-Solver++(2M) update from `t` to `s` in the data-prediction form.
/// `previous` carries the prior step's `(timestep, y0 prediction)`; without
/// it the update is first order and equals [`ddim_step`].
pub fn multistep_step(
    schedule: &NoiseSchedule,
    y_t: &Tensor,
    y0_hat: &Tensor,
    t: usize,
    s: usize,
    previous: Option<(usize, &Tensor)>,
) -> Result<Tensor> {
    check_pair(schedule, t, s)?;
    if s == 0 {
        return Ok(y0_hat.clone());
    }
    let Some((t_prev, d_prev)) = previous else {
        return ddim_step(schedule, y_t, y0_hat, t, s);
    };
    let (ab_t, ab_s) = (schedule.alpha_bar(t), schedule.alpha_bar(s));
    let h = lambda(schedule, s) - lambda(schedule, t);
    let h_prev = lambda(schedule, t) - lambda(schedule, t_prev);
    let r = h_prev / h;
    let d = (y0_hat.affine(1.0 + 0.5 / r, 0.0)? - d_prev.affine(0.5 / r, 0.0)?)?;
    let sigma_ratio = ((1.0 - ab_s) / (1.0 - ab_t)).sqrt();
    let c0 = -ab_s.sqrt() * ((-h).exp() - 1.0);
    Ok((y_t.affine(sigma_ratio, 0.0)? + d.affine(c0, 0.0)?)?)
}

fn check_pair(schedule: &NoiseSchedule, t: usize, s: usize) -> Result<()> {
    schedule.check_timestep(t)?;
    if s >= t {
        return Err(Error::invalid(format!("solver must move backward, got {t} -> {s}")));
    }
    Ok(())
}
