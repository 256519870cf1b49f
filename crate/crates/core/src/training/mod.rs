//! Objective, timestep importance sampling and the optimisation loop.

mod importance;
mod loss;

pub use importance::{sample_timestep, ImportanceSampler, DEFAULT_HISTORY};
pub use loss::{loss_anchor, loss_anchor_per_sequence, loss_simple, loss_simple_per_sequence};

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::{padding_mask, LatentBatch};
use crate::embedder::{TokenId, MASK_ID};
use crate::error::{Error, Result};
use crate::model::DiffusionModel;

/// One condition/target pair as token ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenPair {
    pub src: Vec<TokenId>,
    pub trg: Vec<TokenId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    /// Length of the cosine decay; `None` derives it from epochs and data size.
    pub total_steps: Option<usize>,
    pub cond_dropout_p: f64,
    pub is_history: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            peak_lr: 1e-4,
            warmup_steps: 2000,
            total_steps: None,
            cond_dropout_p: 0.1,
            is_history: DEFAULT_HISTORY,
            weight_decay: 0.0,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.is_history == 0 {
            return Err(Error::invalid("batch_size and is_history must be positive"));
        }
        if !(self.peak_lr > 0.0) || !(0.0..=1.0).contains(&self.cond_dropout_p) {
            return Err(Error::invalid(format!("bad optimiser settings {self:?}")));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, examples: usize) -> usize {
        examples.div_ceil(self.batch_size).max(1)
    }

    /// Linear warm-up from 0, then cosine decay to 0 at `total` steps.
    /// `step` counts optimiser updates already taken.
    pub fn learning_rate(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        0.5 * self.peak_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    pub loss_simple: f64,
    pub loss_anchor: f64,
    /// Unweighted `loss_simple + loss_anchor`.
    pub total: f64,
    /// Importance-weighted objective that was backpropagated.
    pub weighted: f64,
    pub null_conditions: usize,
}

/// Mutable training state: optimiser, timestep sampler and RNG.
pub struct Trainer {
    pub config: TrainConfig,
    pub sampler: ImportanceSampler,
    rng: ChaCha8Rng,
    optimizer: AdamW,
    vars: Vec<Var>,
    step: usize,
    total_steps: usize,
    last_memory_lengths: Vec<usize>,
}

/// Everything a checkpoint needs to resume the sampler and RNG.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainerState {
    pub step: usize,
    pub total_steps: usize,
    pub sampler: ImportanceSampler,
    pub rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: &DiffusionModel, config: TrainConfig, total_steps: usize) -> Result<Self> {
        config.validate()?;
        let vars = model.trainable_vars();
        let optimizer = AdamW::new(
            vars.clone(),
            ParamsAdamW {
                lr: config.learning_rate(0, total_steps),
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: config.weight_decay,
            },
        )?;
        Ok(Self {
            sampler: ImportanceSampler::new(model.schedule.timesteps(), config.is_history)?,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            optimizer,
            vars,
            step: 0,
            total_steps,
            last_memory_lengths: Vec::new(),
            config,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            step: self.step,
            total_steps: self.total_steps,
            sampler: self.sampler.clone(),
            rng: self.rng.clone(),
        }
    }

    /// Restores sampler/RNG/step counters. Optimiser moments start fresh.
    pub fn restore(&mut self, state: TrainerState) {
        self.step = state.step;
        self.total_steps = state.total_steps;
        self.sampler = state.sampler;
        self.rng = state.rng;
    }

    /// Condition memory lengths seen in the most recent step.
    pub fn last_memory_lengths(&self) -> &[usize] {
        &self.last_memory_lengths
    }

    /// One optimisation step: condition dropout, importance-sampled
    /// timesteps, closed-form noising, weighted `L_simple + L_anchor`,
    /// clipped AdamW update, then embedding renormalisation and sampler
    /// bookkeeping.
    pub fn train_step(&mut self, model: &DiffusionModel, batch: &[TokenPair]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::invalid("empty training batch"));
        }
        let max_len = model.config().max_len;
        if let Some(p) = batch
            .iter()
            .find(|p| p.src.is_empty() || p.trg.is_empty() || p.src.len() > max_len || p.trg.len() > max_len)
        {
            return Err(Error::invalid(format!(
                "pair with lengths ({}, {}) outside [1, {max_len}]",
                p.src.len(),
                p.trg.len()
            )));
        }
        let lr = self.config.learning_rate(self.step, self.total_steps);
        self.optimizer.set_learning_rate(lr);

        let conditions: Vec<Vec<TokenId>> = batch
            .iter()
            .map(|p| {
                if self.rng.gen::<f64>() < self.config.cond_dropout_p {
                    vec![MASK_ID]
                } else {
                    p.src.clone()
                }
            })
            .collect();
        let null_conditions = conditions.iter().filter(|c| c.as_slice() == [MASK_ID]).count();
        let draws = self.sampler.sample_many(&mut self.rng, batch.len());
        let timesteps: Vec<usize> = draws.iter().map(|d| d.0).collect();
        let weights: Vec<f64> = draws.iter().map(|d| d.1).collect();

        let (grid, lengths, width) = pad_targets(batch);
        let b = batch.len();
        let dim = model.config().embed_dim;
        let device = model.table.device().clone();
        let y0 = model.table.embed_grid(&grid, b, width)?;
        let noise: Vec<f32> = (0..b * width * dim).map(|_| self.rng.sample(StandardNormal)).collect();
        let noise = Tensor::from_vec(noise, (b, width, dim), &device)?;
        let y_t = model.schedule.q_sample_batch(&y0, &timesteps, &noise)?;

        let memory = model.denoiser.encode_condition(&model.table, &conditions)?;
        self.last_memory_lengths = memory.lengths.clone();
        let latents = LatentBatch::new(y_t, lengths.clone(), timesteps.clone())?;
        let y0_hat = model.denoiser.predict_y0(&latents, &memory)?;
        let mask = padding_mask(&lengths, width, y0_hat.dtype(), &device)?;

        let simple = loss_simple_per_sequence(&y0, &y0_hat, &mask)?;
        let anchor = loss_anchor_per_sequence(&y0_hat, &grid, &model.table, &mask)?;
        let per_seq = (&simple + &anchor)?;
        let w = Tensor::from_vec(weights.iter().map(|&x| x as f32).collect::<Vec<_>>(), b, &device)?;
        let objective = (&per_seq * &w)?.mean_all()?;

        let weighted = objective.to_scalar::<f32>()? as f64;
        if !weighted.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                t: timesteps.iter().copied().max().unwrap_or(0),
                lr,
                batch: self.step,
            });
        }
        let mut grads = objective.backward()?;
        clip_gradients(&mut grads, &self.vars, self.config.grad_clip)?;
        self.optimizer.step(&grads)?;
        model.table.normalize_rows()?;

        let simple_v = simple.to_vec1::<f32>()?;
        let anchor_v = anchor.to_vec1::<f32>()?;
        for ((&t, s), a) in timesteps.iter().zip(&simple_v).zip(&anchor_v) {
            self.sampler.update(t, (*s + *a) as f64);
        }
        self.step += 1;
        let mean = |v: &[f32]| v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
        let loss_simple = mean(&simple_v);
        let loss_anchor = mean(&anchor_v);
        Ok(StepReport {
            step: self.step,
            lr,
            loss_simple,
            loss_anchor,
            total: loss_simple + loss_anchor,
            weighted,
            null_conditions,
        })
    }

    /// Runs `config.epochs` shuffled passes over `data`, invoking `on_step`
    /// after every update. Returning `false` from the callback stops early.
    pub fn fit<F>(&mut self, model: &DiffusionModel, data: &[TokenPair], mut on_step: F) -> Result<()>
    where
        F: FnMut(&StepReport, &DiffusionModel, &Trainer) -> Result<bool>,
    {
        let mut order: Vec<usize> = (0..data.len()).collect();
        for _ in 0..self.config.epochs {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<TokenPair> = chunk.iter().map(|&i| data[i].clone()).collect();
                let report = self.train_step(model, &batch)?;
                if !on_step(&report, model, self)? || self.step >= self.total_steps {
                    return Ok(());
                }
            }
        }
        Ok(())
    }
}

fn pad_targets(batch: &[TokenPair]) -> (Vec<TokenId>, Vec<usize>, usize) {
    let lengths: Vec<usize> = batch.iter().map(|p| p.trg.len()).collect();
    let width = *lengths.iter().max().unwrap_or(&1);
    let mut grid = Vec::with_capacity(batch.len() * width);
    for p in batch {
        grid.extend_from_slice(&p.trg);
        grid.extend(std::iter::repeat(MASK_ID).take(width - p.trg.len()));
    }
    (grid, lengths, width)
}

fn clip_gradients(grads: &mut candle_core::backprop::GradStore, vars: &[Var], max_norm: f64) -> Result<()> {
    if !(max_norm > 0.0) {
        return Ok(());
    }
    let mut sq = 0.0f64;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for v in vars {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), (g * scale)?);
            }
        }
    }
    Ok(())
}

/// Mean `L_simple` on `pairs` with every target noised to timestep `t`,
/// using noise from a fixed seed.
pub fn evaluate_loss_simple(model: &DiffusionModel, pairs: &[TokenPair], t: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = model.config().embed_dim;
    let device = model.table.device().clone();
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in pairs.chunks(64) {
        let (grid, lengths, width) = pad_targets(chunk);
        let b = chunk.len();
        let y0 = model.table.embed_grid(&grid, b, width)?;
        let noise: Vec<f32> = (0..b * width * dim).map(|_| rng.sample(StandardNormal)).collect();
        let noise = Tensor::from_vec(noise, (b, width, dim), &device)?;
        let y_t = model.schedule.q_sample_batch(&y0, &vec![t; b], &noise)?;
        let conditions: Vec<Vec<TokenId>> = chunk.iter().map(|p| p.src.clone()).collect();
        let memory = model.denoiser.encode_condition(&model.table, &conditions)?;
        let y0_hat = model
            .denoiser
            .predict_y0(&LatentBatch::new(y_t, lengths.clone(), vec![t; b])?, &memory)?;
        let mask = padding_mask(&lengths, width, y0_hat.dtype(), &device)?;
        let per = loss_simple_per_sequence(&y0, &y0_hat, &mask)?.to_vec1::<f32>()?;
        total += per.iter().map(|&x| x as f64).sum::<f64>();
        count += b;
    }
    Ok(total / count.max(1) as f64)
}

/// Share of the most common token among all generated tokens; values near 1
/// indicate the single-token collapse that learning-rate warm-up guards
/// against.
pub fn max_token_frequency(outputs: &[Vec<TokenId>]) -> f64 {
    let mut counts: HashMap<TokenId, usize> = HashMap::new();
    let mut total = 0usize;
    for t in outputs.iter().flatten() {
        *counts.entry(*t).or_default() += 1;
        total += 1;
    }
    if total == 0 {
        return 0.0;
    }
    *counts.values().max().unwrap_or(&0) as f64 / total as f64
}

/// CSV log with columns `step,lr,loss_simple,loss_anchor,wall_time`.
pub struct MetricsLog {
    writer: csv::Writer<std::fs::File>,
    start: Instant,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(["step", "lr", "loss_simple", "loss_anchor", "wall_time"])?;
        Ok(Self {
            writer,
            start: Instant::now(),
        })
    }

    pub fn record(&mut self, report: &StepReport) -> Result<()> {
        self.writer.write_record(&[
            report.step.to_string(),
            format!("{:e}", report.lr),
            report.loss_simple.to_string(),
            report.loss_anchor.to_string(),
            format!("{:.3}", self.start.elapsed().as_secs_f64()),
        ])?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io("metrics log", e))?;
        Ok(())
    }
}

impl Drop for MetricsLog {
    fn drop(&mut self) {
        let _ = self.writer.flush();
    }
}
