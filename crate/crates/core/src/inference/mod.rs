//! Guided sampling: the solver loop, classifier-free guidance schedules,
//! in-loop clamping and the final projection to tokens.
//!
//! Every job in a batch owns its RNG stream (ChaCha8 seeded with the job's
//! seed, stream number from the job), so a job's output does not depend on
//! which other jobs share its batch beyond floating-point summation order.

mod guidance;
mod solver;

pub use guidance::{cfg_combine, guidance_scale_at, CombineOrder, GuidanceSchedule, GuidanceSpec};
pub use solver::{
    ancestral_step, ddim_step, multistep_step, timestep_sequence, SamplerKind, SamplerSpec,
};

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::{ConditionMemory, LatentBatch};
use crate::embedder::{ClampMode, ClampSpec, EmbeddingTable, TokenId, MASK_ID};
use crate::error::{Error, Result};
use crate::model::DiffusionModel;

/// One sequence to generate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleJob {
    pub condition: Vec<TokenId>,
    pub length: usize,
    pub seed: u64,
    pub stream: u64,
}

impl SampleJob {
    pub fn new(condition: Vec<TokenId>, length: usize, seed: u64) -> Self {
        Self {
            condition,
            length,
            seed,
            stream: 0,
        }
    }
}

/// Mean distance from the guided `y0` prediction (before any in-loop clamp)
/// to its nearest embedding, over all real positions in the batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostic {
    pub step: usize,
    pub t: usize,
    pub mean_nn_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub tokens: Vec<Vec<TokenId>>,
    pub diagnostics: Vec<StepDiagnostic>,
}

/// Result of one guided model evaluation.
#[derive(Debug, Clone)]
pub struct GuidedPrediction {
    /// Prediction handed to the solver update.
    pub y0: Tensor,
    /// Same prediction before the outermost in-loop clamp.
    pub unclamped: Tensor,
}

/// Per-job random streams: one for noise, optionally a separate one for
/// clamp draws.
pub struct JobRngs {
    noise: Vec<ChaCha8Rng>,
    clamp: Option<Vec<ChaCha8Rng>>,
}

impl JobRngs {
    pub fn new(jobs: &[SampleJob], clamp: &ClampSpec) -> Self {
        let make = |seed: u64, stream: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            rng
        };
        Self {
            noise: jobs.iter().map(|j| make(j.seed, j.stream)).collect(),
            clamp: clamp.rng_seed.map(|cs| {
                jobs.iter()
                    .map(|j| make(cs ^ j.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15), j.stream))
                    .collect()
            }),
        }
    }

    fn clamp_streams(&mut self) -> &mut [ChaCha8Rng] {
        match &mut self.clamp {
            Some(c) => c,
            None => &mut self.noise,
        }
    }
}

/// Clamp settings matching `order`: every-step clamping when the order
/// clamps inside the loop, final-only otherwise. `tau` applies to both.
pub fn clamp_for_order(order: CombineOrder, tau: f64) -> Result<ClampSpec> {
    let mode = if order.clamps_in_loop() {
        ClampMode::EveryStep
    } else {
        ClampMode::FinalOnly
    };
    ClampSpec::new(mode, tau)
}

fn check_clamp_consistency(guidance: &GuidanceSpec, clamp: &ClampSpec) -> Result<()> {
    let wants = guidance.order.clamps_in_loop();
    let has = clamp.mode == ClampMode::EveryStep;
    if wants != has {
        return Err(Error::invalid(format!(
            "order {} {} in-loop clamping but clamp mode is {:?}",
            guidance.order,
            if wants { "needs" } else { "excludes" },
            clamp.mode
        )));
    }
    Ok(())
}

/// Clamps the real rows of every sequence, leaving padding rows untouched.
fn clamp_rows(
    table: &EmbeddingTable,
    latents: &Tensor,
    lengths: &[usize],
    tau: f64,
    rngs: &mut [ChaCha8Rng],
) -> Result<Tensor> {
    let width = latents.dim(1)?;
    let mut out = Vec::with_capacity(lengths.len());
    for (b, (&len, rng)) in lengths.iter().zip(rngs.iter_mut()).enumerate() {
        let item = latents.get(b)?;
        let (_, rows) = table.stochastic_clamp(&item.narrow(0, 0, len)?, tau, rng)?;
        let rows = rows.to_dtype(item.dtype())?;
        out.push(if len < width {
            Tensor::cat(&[rows, item.narrow(0, len, width - len)?], 0)?
        } else {
            rows
        });
    }
    Ok(Tensor::stack(&out, 0)?)
}

/// [`cfg_combine`] with the scale evaluated at each row's own timestep.
fn combine_rows(model: &DiffusionModel, u: &Tensor, c: &Tensor, guidance: &GuidanceSpec, ts: &[usize]) -> Result<Tensor> {
    if ts.windows(2).all(|w| w[0] == w[1]) {
        let s = guidance_scale_at(guidance, ts[0], &model.schedule)?;
        return cfg_combine(u, c, s);
    }
    let scales = ts
        .iter()
        .map(|&t| guidance_scale_at(guidance, t, &model.schedule))
        .collect::<Result<Vec<f64>>>()?;
    let s = Tensor::from_vec(scales.clone(), (ts.len(), 1, 1), u.device())?.to_dtype(u.dtype())?;
    let one_minus: Vec<f64> = scales.iter().map(|s| 1.0 - s).collect();
    let om = Tensor::from_vec(one_minus, (ts.len(), 1, 1), u.device())?.to_dtype(u.dtype())?;
    Ok((u.broadcast_mul(&om)? + c.broadcast_mul(&s)?)?)
}

/// One guided `y0` prediction. The conditional branch always runs; the
/// unconditional branch runs whenever the order involves guidance, so
/// guidance costs exactly two model evaluations regardless of the scale.
pub fn guided_prediction(
    model: &DiffusionModel,
    y_t: &LatentBatch,
    memory_cond: &ConditionMemory,
    memory_null: Option<&ConditionMemory>,
    guidance: &GuidanceSpec,
    clamp: &ClampSpec,
    rngs: &mut JobRngs,
) -> Result<GuidedPrediction> {
    check_clamp_consistency(guidance, clamp)?;
    let table = &model.table;
    let lengths = &y_t.lengths;
    let cond = model.denoiser.predict_y0(y_t, memory_cond)?;
    let uncond = if guidance.order.uses_cfg() {
        let null = memory_null.ok_or_else(|| Error::invalid(format!("order {} needs the null-condition memory", guidance.order)))?;
        Some(model.denoiser.predict_y0(y_t, null)?)
    } else {
        None
    };
    let tau = clamp.tau;
    Ok(match guidance.order {
        CombineOrder::None => GuidedPrediction {
            y0: cond.clone(),
            unclamped: cond,
        },
        CombineOrder::CfgOnly => {
            let y0 = combine_rows(model, &uncond.expect("cfg branch"), &cond, guidance, &y_t.timesteps)?;
            GuidedPrediction {
                y0: y0.clone(),
                unclamped: y0,
            }
        }
        CombineOrder::ClampOnly => GuidedPrediction {
            y0: clamp_rows(table, &cond, lengths, tau, rngs.clamp_streams())?,
            unclamped: cond,
        },
        CombineOrder::CfgBeforeClamp => {
            let mixed = combine_rows(model, &uncond.expect("cfg branch"), &cond, guidance, &y_t.timesteps)?;
            GuidedPrediction {
                y0: clamp_rows(table, &mixed, lengths, tau, rngs.clamp_streams())?,
                unclamped: mixed,
            }
        }
        CombineOrder::ClampBeforeCfg => {
            let u = clamp_rows(table, &uncond.expect("cfg branch"), lengths, tau, rngs.clamp_streams())?;
            let c = clamp_rows(table, &cond, lengths, tau, rngs.clamp_streams())?;
            let y0 = combine_rows(model, &u, &c, guidance, &y_t.timesteps)?;
            GuidedPrediction {
                y0: y0.clone(),
                unclamped: y0,
            }
        }
    })
}

fn mean_nn_distance(table: &EmbeddingTable, latents: &Tensor, lengths: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (b, &len) in lengths.iter().enumerate() {
        let rows = latents.get(b)?.narrow(0, 0, len)?;
        for (_, d) in table.nearest(&rows)? {
            total += d;
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

fn job_noise(jobs: &[SampleJob], rngs: &mut [ChaCha8Rng], width: usize, dim: usize, like: &Tensor) -> Result<Tensor> {
    let mut data = vec![0f32; jobs.len() * width * dim];
    for (b, (job, rng)) in jobs.iter().zip(rngs.iter_mut()).enumerate() {
        let start = b * width * dim;
        for x in &mut data[start..start + job.length * dim] {
            *x = rng.sample(StandardNormal);
        }
    }
    Ok(Tensor::from_vec(data, (jobs.len(), width, dim), like.device())?.to_dtype(like.dtype())?)
}

/// Generates one token sequence per job. Condition memories (conditional
/// and, when guidance is active, null) are encoded once and reused for
/// every step.
pub fn sample_batch(
    model: &DiffusionModel,
    jobs: &[SampleJob],
    sampler: &SamplerSpec,
    guidance: &GuidanceSpec,
    clamp: &ClampSpec,
) -> Result<SampleOutput> {
    if jobs.is_empty() {
        return Ok(SampleOutput {
            tokens: Vec::new(),
            diagnostics: Vec::new(),
        });
    }
    sampler.validate(&model.schedule)?;
    check_clamp_consistency(guidance, clamp)?;
    let max_len = model.config().max_len;
    if let Some(j) = jobs.iter().find(|j| j.length == 0 || j.length > max_len) {
        return Err(Error::invalid(format!("output length {} outside [1, {max_len}]", j.length)));
    }
    let dim = model.config().embed_dim;
    let width = jobs.iter().map(|j| j.length).max().unwrap_or(1);
    let lengths: Vec<usize> = jobs.iter().map(|j| j.length).collect();
    let table = &model.table;
    let mut rngs = JobRngs::new(jobs, clamp);

    let conditions: Vec<Vec<TokenId>> = jobs.iter().map(|j| j.condition.clone()).collect();
    let memory = model.denoiser.encode_condition(table, &conditions)?;
    let null = if guidance.order.uses_cfg() {
        Some(model.denoiser.encode_null(table, jobs.len())?)
    } else {
        None
    };

    let ts = timestep_sequence(model.schedule.timesteps(), sampler.steps)?;
    let mut y = job_noise(jobs, &mut rngs.noise, width, dim, table.weights())?;
    let mut diagnostics = Vec::with_capacity(ts.len());
    let mut previous: Option<(usize, Tensor)> = None;
    for (k, &t) in ts.iter().enumerate() {
        let s = ts.get(k + 1).copied().unwrap_or(0);
        let batch = LatentBatch::new(y.clone(), lengths.clone(), vec![t; jobs.len()])?;
        let pred = guided_prediction(model, &batch, &memory, null.as_ref(), guidance, clamp, &mut rngs)?;
        diagnostics.push(StepDiagnostic {
            step: k,
            t,
            mean_nn_distance: mean_nn_distance(table, &pred.unclamped, &lengths)?,
        });
        // sampling never backpropagates; without this every step's graph
        // stays alive through the latent chain
        let y0 = pred.y0.detach();
        y = match sampler.kind {
            SamplerKind::Ancestral => {
                let noise = if s > 0 {
                    job_noise(jobs, &mut rngs.noise, width, dim, &y)?
                } else {
                    y.zeros_like()?
                };
                ancestral_step(&model.schedule, &y, &y0, t, s, &noise)?
            }
            SamplerKind::FewStep if sampler.second_order => {
                let prev = previous.as_ref().map(|(pt, p)| (*pt, p));
                let next = multistep_step(&model.schedule, &y, &y0, t, s, prev)?;
                previous = Some((t, y0.clone()));
                next
            }
            SamplerKind::FewStep => ddim_step(&model.schedule, &y, &y0, t, s)?,
        };
    }

    let tau = clamp.final_tau();
    let mut tokens = Vec::with_capacity(jobs.len());
    let streams = rngs.clamp_streams();
    for (b, (&len, rng)) in lengths.iter().zip(streams.iter_mut()).enumerate() {
        let (ids, _) = table.stochastic_clamp(&y.get(b)?.narrow(0, 0, len)?, tau, rng)?;
        tokens.push(ids);
    }
    Ok(SampleOutput { tokens, diagnostics })
}

/// Single-sequence convenience wrapper around [`sample_batch`].
pub fn sample(
    model: &DiffusionModel,
    condition: &[TokenId],
    length: usize,
    sampler: &SamplerSpec,
    guidance: &GuidanceSpec,
    clamp: &ClampSpec,
    seed: u64,
) -> Result<(Vec<TokenId>, Vec<StepDiagnostic>)> {
    let job = SampleJob::new(condition.to_vec(), length, seed);
    let mut out = sample_batch(model, &[job], sampler, guidance, clamp)?;
    Ok((out.tokens.pop().expect("one job"), out.diagnostics))
}

/// Samples from the null condition with guidance scale 0.
pub fn sample_unconditional(model: &DiffusionModel, length: usize, sampler: &SamplerSpec, seed: u64) -> Result<Vec<TokenId>> {
    let guidance = GuidanceSpec::constant(0.0, CombineOrder::CfgOnly)?;
    let (tokens, _) = sample(model, &[MASK_ID], length, sampler, &guidance, &ClampSpec::hard_final(), seed)?;
    Ok(tokens)
}
