use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// How the guidance scale varies with the timestep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceSchedule {
    /// `s_t = s`
    Constant,
    /// `s_t = (t / T) s`
    Linear,
    /// `s_t = 1 + (t / T)(s - 1)`, reaching plain conditional sampling at t = 0.
    LinearToOne,
    /// `s_t = sqrt(1 - alpha_bar_t)`, independent of `s`.
    StdDev,
    /// `s_t = s sqrt(1 - alpha_bar_t)`
    StdDevScaled,
}

/// Composition of classifier-free guidance and in-loop clamping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineOrder {
    /// `clamp(cfg(u, c))`
    CfgBeforeClamp,
    /// `cfg(clamp(u), clamp(c))`
    ClampBeforeCfg,
    CfgOnly,
    /// Clamping trick without guidance.
    ClampOnly,
    /// Plain conditional sampling.
    None,
}

impl CombineOrder {
    pub fn uses_cfg(self) -> bool {
        matches!(self, Self::CfgBeforeClamp | Self::ClampBeforeCfg | Self::CfgOnly)
    }

    pub fn clamps_in_loop(self) -> bool {
        matches!(self, Self::CfgBeforeClamp | Self::ClampBeforeCfg | Self::ClampOnly)
    }

    pub const ALL: [CombineOrder; 5] = [
        Self::CfgOnly,
        Self::ClampOnly,
        Self::CfgBeforeClamp,
        Self::ClampBeforeCfg,
        Self::None,
    ];
}

impl GuidanceSchedule {
    pub const ALL: [GuidanceSchedule; 5] = [
        Self::Constant,
        Self::Linear,
        Self::LinearToOne,
        Self::StdDev,
        Self::StdDevScaled,
    ];
}

fn normalise(s: &str) -> String {
    s.trim().to_ascii_lowercase().replace('-', "_")
}

impl FromStr for GuidanceSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match normalise(s).as_str() {
            "constant" => Ok(Self::Constant),
            "linear" => Ok(Self::Linear),
            "linear_to_one" => Ok(Self::LinearToOne),
            "stddev" | "std_dev" => Ok(Self::StdDev),
            "stddev_scaled" | "std_dev_scaled" => Ok(Self::StdDevScaled),
            _ => Err(Error::invalid(format!("unknown guidance schedule '{s}'"))),
        }
    }
}

impl fmt::Display for GuidanceSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Constant => "constant",
            Self::Linear => "linear",
            Self::LinearToOne => "linear-to-one",
            Self::StdDev => "stddev",
            Self::StdDevScaled => "stddev-scaled",
        })
    }
}

impl FromStr for CombineOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match normalise(s).as_str() {
            "cfg_before_clamp" => Ok(Self::CfgBeforeClamp),
            "clamp_before_cfg" => Ok(Self::ClampBeforeCfg),
            "cfg_only" => Ok(Self::CfgOnly),
            "clamp_only" => Ok(Self::ClampOnly),
            "none" => Ok(Self::None),
            _ => Err(Error::invalid(format!("unknown combination order '{s}'"))),
        }
    }
}

impl fmt::Display for CombineOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::CfgBeforeClamp => "cfg-before-clamp",
            Self::ClampBeforeCfg => "clamp-before-cfg",
            Self::CfgOnly => "cfg-only",
            Self::ClampOnly => "clamp-only",
            Self::None => "none",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSpec {
    pub scale: f64,
    pub schedule: GuidanceSchedule,
    pub order: CombineOrder,
}

impl GuidanceSpec {
    pub fn new(scale: f64, schedule: GuidanceSchedule, order: CombineOrder) -> Result<Self> {
        if !(scale >= 0.0) || !scale.is_finite() {
            return Err(Error::invalid(format!("guidance scale must be >= 0, got {scale}")));
        }
        Ok(Self { scale, schedule, order })
    }

    /// Plain conditional sampling.
    pub fn baseline() -> Self {
        Self {
            scale: 1.0,
            schedule: GuidanceSchedule::Constant,
            order: CombineOrder::None,
        }
    }

    pub fn constant(scale: f64, order: CombineOrder) -> Result<Self> {
        Self::new(scale, GuidanceSchedule::Constant, order)
    }
}

/// `u + s_t (c - u)`, evaluated as `(1 - s_t) u + s_t c` so that `s_t = 1`
/// returns `c` and `s_t = 0` returns `u` bit for bit.
pub fn cfg_combine(y0_uncond: &Tensor, y0_cond: &Tensor, s_t: f64) -> Result<Tensor> {
    if y0_uncond.dims() != y0_cond.dims() {
        return Err(Error::invalid(format!(
            "unconditional shape {:?} does not match conditional {:?}",
            y0_uncond.dims(),
            y0_cond.dims()
        )));
    }
    Ok((y0_uncond.affine(1.0 - s_t, 0.0)? + y0_cond.affine(s_t, 0.0)?)?)
}

/// Guidance scale at timestep `t` in `[0, T]`.
pub fn guidance_scale_at(spec: &GuidanceSpec, t: usize, schedule: &NoiseSchedule) -> Result<f64> {
    let big_t = schedule.timesteps();
    if t > big_t {
        return Err(Error::invalid(format!("timestep {t} outside [0, {big_t}]")));
    }
    let frac = t as f64 / big_t as f64;
    let s = spec.scale;
    Ok(match spec.schedule {
        GuidanceSchedule::Constant => s,
        GuidanceSchedule::Linear => frac * s,
        GuidanceSchedule::LinearToOne => 1.0 + frac * (s - 1.0),
        GuidanceSchedule::StdDev => (1.0 - schedule.alpha_bar(t)).sqrt(),
        GuidanceSchedule::StdDevScaled => s * (1.0 - schedule.alpha_bar(t)).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn combine_fixed_points() {
        let dev = Device::Cpu;
        let u = Tensor::new(&[0.3f32, -1.7, 2.25e-3], &dev).unwrap();
        let c = Tensor::new(&[1.1f32, 0.4, -7.5], &dev).unwrap();
        let one = cfg_combine(&u, &c, 1.0).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(one, c.to_vec1::<f32>().unwrap());
        let zero = cfg_combine(&u, &c, 0.0).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(zero, u.to_vec1::<f32>().unwrap());
    }

    #[test]
    fn combine_extrapolates() {
        let dev = Device::Cpu;
        let u = Tensor::new(&[0.0f64, 0.0], &dev).unwrap();
        let c = Tensor::new(&[1.0f64, 1.0], &dev).unwrap();
        let out = cfg_combine(&u, &c, 2.5).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(out, vec![2.5, 2.5]);
        let bad = Tensor::new(&[1.0f64], &dev).unwrap();
        assert!(cfg_combine(&u, &bad, 1.0).is_err());
    }

    #[test]
    fn schedules() {
        let sched = NoiseSchedule::linear(1000).unwrap();
        let spec = |schedule| GuidanceSpec::new(3.0, schedule, CombineOrder::CfgOnly).unwrap();
        let at = |s: GuidanceSchedule, t| guidance_scale_at(&spec(s), t, &sched).unwrap();
        assert_eq!(at(GuidanceSchedule::Constant, 17), 3.0);
        assert_eq!(at(GuidanceSchedule::Linear, 1000), 3.0);
        assert_eq!(at(GuidanceSchedule::Linear, 0), 0.0);
        assert_eq!(at(GuidanceSchedule::LinearToOne, 0), 1.0);
        assert_eq!(at(GuidanceSchedule::LinearToOne, 1000), 3.0);
        assert!((at(GuidanceSchedule::StdDev, 1) - 0.01).abs() < 1e-12);
        assert!((at(GuidanceSchedule::StdDevScaled, 1) - 0.03).abs() < 1e-12);
        assert_eq!(at(GuidanceSchedule::StdDev, 0), 0.0);
        assert!(guidance_scale_at(&spec(GuidanceSchedule::Constant), 1001, &sched).is_err());
    }

    #[test]
    fn parse_names() {
        for s in GuidanceSchedule::ALL {
            assert_eq!(s.to_string().parse::<GuidanceSchedule>().unwrap(), s);
        }
        for o in CombineOrder::ALL {
            assert_eq!(o.to_string().parse::<CombineOrder>().unwrap(), o);
        }
        assert_eq!("std_dev".parse::<GuidanceSchedule>().unwrap(), GuidanceSchedule::StdDev);
        assert!("cosine".parse::<GuidanceSchedule>().is_err());
        assert!(GuidanceSpec::new(-1.0, GuidanceSchedule::Constant, CombineOrder::CfgOnly).is_err());
    }
}
