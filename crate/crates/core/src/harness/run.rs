use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crate::embedder::{ClampSpec, Vocab};
use crate::error::Result;
use crate::harness::checkpoint::{save_checkpoint, TrainingContext};
use crate::inference::{sample_batch, GuidanceSpec, SampleJob, SamplerSpec};
use crate::model::DiffusionModel;
use crate::training::{max_token_frequency, MetricsLog, TokenPair, TrainConfig, Trainer, TrainerState};

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_DIR: &str = "final";

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_every: usize,
    /// Stop once this much wall time has elapsed.
    pub time_limit: Option<Duration>,
    /// Training conditions sampled at each checkpoint to measure output
    /// collapse.
    pub probe_conditions: usize,
    pub probe_steps: usize,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            checkpoint_every: 0,
            time_limit: None,
            probe_conditions: 32,
            probe_steps: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub steps: usize,
    pub loss_simple: f64,
    pub loss_anchor: f64,
    pub wall_time: f64,
    pub checkpoints: Vec<PathBuf>,
    pub timed_out: bool,
    pub max_token_frequency: f64,
}

/// Share of the most common token in short samples for the first training
/// conditions.
pub fn probe_collapse(model: &DiffusionModel, data: &[TokenPair], count: usize, steps: usize) -> Result<f64> {
    let jobs: Vec<SampleJob> = data
        .iter()
        .take(count.max(1))
        .enumerate()
        .map(|(i, p)| SampleJob {
            condition: p.src.clone(),
            length: p.trg.len(),
            seed: 0,
            stream: i as u64,
        })
        .collect();
    let out = sample_batch(
        model,
        &jobs,
        &SamplerSpec::fewstep(steps.max(1)),
        &GuidanceSpec::baseline(),
        &ClampSpec::hard_final(),
    )?;
    Ok(max_token_frequency(&out.tokens))
}

fn checkpoint(
    dir: &Path,
    model: &DiffusionModel,
    vocab: &Vocab,
    trainer: &Trainer,
    data: &[TokenPair],
    options: &RunOptions,
) -> Result<f64> {
    let freq = probe_collapse(model, data, options.probe_conditions, options.probe_steps)?;
    if freq > 0.5 {
        log::warn!("step {}: most frequent output token covers {:.0}% of samples", trainer.step(), freq * 100.0);
    }
    let ctx = TrainingContext {
        train: Some(trainer.config),
        trainer: Some(trainer.state()),
        max_token_frequency: Some(freq),
    };
    save_checkpoint(dir, model, vocab, &ctx)?;
    Ok(freq)
}

/// Trains `model` on `data`, logging every step to `metrics.csv` and writing
/// periodic checkpoints plus a final one under `out_dir`.
pub fn train_run(
    model: &DiffusionModel,
    vocab: &Vocab,
    data: &[TokenPair],
    config: TrainConfig,
    options: &RunOptions,
    resume: Option<TrainerState>,
) -> Result<RunSummary> {
    std::fs::create_dir_all(&options.out_dir).map_err(|e| crate::Error::io(&options.out_dir, e))?;
    let total = config
        .total_steps
        .unwrap_or_else(|| config.epochs * config.steps_per_epoch(data.len()));
    let mut trainer = Trainer::new(model, config, total)?;
    if let Some(state) = resume {
        trainer.restore(state);
    }
    let mut log = MetricsLog::create(&options.out_dir.join(METRICS_FILE))?;
    let start = Instant::now();
    let mut last = None;
    let mut checkpoints = Vec::new();
    let mut timed_out = false;
    let mut failure = None;
    if trainer.step() < total {
        trainer.fit(model, data, |report, m, tr| {
            log.record(report)?;
            last = Some(*report);
            if options.checkpoint_every > 0 && report.step % options.checkpoint_every == 0 && report.step < total {
                let dir = options.out_dir.join(format!("step-{:08}", report.step));
                if let Err(e) = checkpoint(&dir, m, vocab, tr, data, options) {
                    failure = Some(e);
                    return Ok(false);
                }
                checkpoints.push(dir);
            }
            if options.time_limit.is_some_and(|limit| start.elapsed() >= limit) {
                timed_out = true;
                return Ok(false);
            }
            Ok(true)
        })?;
    }
    if let Some(e) = failure {
        return Err(e);
    }
    log.flush()?;
    let final_dir = options.out_dir.join(FINAL_DIR);
    let freq = checkpoint(&final_dir, model, vocab, &trainer, data, options)?;
    checkpoints.push(final_dir);
    let last = last.unwrap_or_default();
    Ok(RunSummary {
        steps: trainer.step(),
        loss_simple: last.loss_simple,
        loss_anchor: last.loss_anchor,
        wall_time: start.elapsed().as_secs_f64(),
        checkpoints,
        timed_out,
        max_token_frequency: freq,
    })
}
