use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use embdiff::denoiser::DenoiserConfig;
use embdiff::embedder::{Tokenizer, Vocab, WhitespaceTokenizer};
use embdiff::harness::{
    encode_records, load_checkpoint, load_jsonl, make_synthetic_task, read_sweep_csv, run_sweep, train_run, write_jsonl,
    write_plots, Checkpoint, KvConfig, SweepGrid, SweepOptions, TaskSpec,
};
use embdiff::harness::run::RunOptions;
use embdiff::inference::{
    clamp_for_order, sample, sample_batch, CombineOrder, GuidanceSchedule, GuidanceSpec, SampleJob, SamplerSpec,
};
use embdiff::metrics::{evaluate_testset, read_hypotheses, write_eval_csvs, HypothesisRecord};
use embdiff::schedule::ScheduleParams;
use embdiff::training::TrainConfig;
use embdiff::DiffusionModel;

use crate::{Cli, Command, EvalArgs, InferenceArgs, MakeDataArgs, SampleArgs, SweepArgs, TrainArgs};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

fn usage(msg: impl std::fmt::Display) -> CliError {
    CliError::Usage(msg.to_string())
}

pub fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::MakeData(a) => make_data(&cli.home, a),
        Command::Train(a) => train(&cli.home, a),
        Command::Sample(a) => sample_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(&cli.home, a),
    }
}

fn make_data(home: &Path, a: &MakeDataArgs) -> CliResult {
    let spec = TaskSpec::new(a.task, a.vocab_size, a.train, a.test, a.max_len, a.seed);
    let task = make_synthetic_task(&spec).map_err(usage)?;
    let out = a.out.clone().unwrap_or_else(|| home.join("data").join(a.task.to_string()));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_jsonl(&out.join("train.jsonl"), &task.train)?;
    write_jsonl(&out.join("test.jsonl"), &task.test)?;
    std::fs::write(out.join("task.json"), serde_json::to_string_pretty(&spec)?)?;
    println!("wrote {} train and {} test pairs to {}", task.train.len(), task.test.len(), out.display());
    Ok(())
}

/// Flag value, else config-file value, else default.
fn pick<T>(flag: Option<T>, cfg: &KvConfig, key: &str, default: T) -> CliResult<T>
where
    T: std::str::FromStr,
    T::Err: std::fmt::Display,
{
    match flag {
        Some(v) => Ok(v),
        None => cfg.get_or(key, default).map_err(usage),
    }
}

fn train(home: &Path, a: &TrainArgs) -> CliResult {
    let cfg = match &a.config {
        Some(p) => KvConfig::load(p).map_err(usage)?,
        None => KvConfig::default(),
    };
    let data_dir = a.data.clone().unwrap_or_else(|| home.join("data").join("reverse"));
    let out = a.out.clone().unwrap_or_else(|| home.join("runs").join("train"));
    let report = load_jsonl(&data_dir.join("train.jsonl"))?;
    if report.records.is_empty() {
        return Err(usage(format!("{} has no training records", data_dir.join("train.jsonl").display())));
    }

    let desk = DenoiserConfig::desk();
    let defaults = TrainConfig {
        peak_lr: 1e-3,
        warmup_steps: 500,
        ..TrainConfig::default()
    };
    let (model, vocab, resume_state) = match &a.resume {
        Some(dir) => {
            let ck = open_checkpoint(dir)?;
            (ck.model, ck.vocab, ck.manifest.trainer)
        }
        None => {
            let denoiser = DenoiserConfig {
                layers: pick(a.layers, &cfg, "layers", desk.layers)?,
                heads: pick(a.heads, &cfg, "heads", desk.heads)?,
                model_dim: pick(a.model_dim, &cfg, "model-dim", desk.model_dim)?,
                embed_dim: pick(a.embed_dim, &cfg, "embed-dim", desk.embed_dim)?,
                ffn_dim: pick(a.ffn_dim, &cfg, "ffn-dim", desk.ffn_dim)?,
                max_len: pick(a.max_len, &cfg, "max-len", desk.max_len)?,
                cond_dropout_p: pick(a.cond_dropout, &cfg, "cond-dropout", desk.cond_dropout_p)?,
            };
            denoiser.validate().map_err(usage)?;
            let timesteps = pick(a.timesteps, &cfg, "timesteps", 1000)?;
            let schedule = ScheduleParams::linear(timesteps).build().map_err(usage)?;
            let texts = report.records.iter().flat_map(|r| [r.src.as_str(), r.trg.as_str()]);
            let vocab = Vocab::build(texts);
            let seed = pick(a.seed, &cfg, "seed", 0)?;
            let model = DiffusionModel::new(denoiser, schedule, vocab.len(), seed)?;
            (model, vocab, None)
        }
    };
    let config = TrainConfig {
        epochs: pick(a.epochs, &cfg, "epochs", defaults.epochs)?,
        batch_size: pick(a.batch_size, &cfg, "batch-size", defaults.batch_size)?,
        peak_lr: pick(a.lr, &cfg, "lr", defaults.peak_lr)?,
        warmup_steps: pick(a.warmup, &cfg, "warmup", defaults.warmup_steps)?,
        total_steps: match a.steps {
            Some(s) => Some(s),
            None => cfg.get("steps").map_err(usage)?,
        },
        cond_dropout_p: model.config().cond_dropout_p,
        seed: pick(a.seed, &cfg, "seed", 0)?,
        ..defaults
    };
    config.validate().map_err(usage)?;

    let tokenizer = WhitespaceTokenizer::new(vocab.clone());
    let (pairs, dropped) = encode_records(&report.records, &tokenizer, model.config().max_len);
    if pairs.is_empty() {
        return Err(usage("no usable training pairs after length filtering"));
    }
    log::info!(
        "training on {} pairs ({} dropped), {} parameters",
        pairs.len(),
        dropped,
        model.parameter_count()
    );
    let mut options = RunOptions::new(&out);
    options.checkpoint_every = pick(a.checkpoint_every, &cfg, "checkpoint-every", 0)?;
    options.time_limit = match a.time_limit {
        Some(s) => Some(s),
        None => cfg.get::<f64>("time-limit").map_err(usage)?,
    }
    .map(Duration::from_secs_f64);
    let summary = train_run(&model, &vocab, &pairs, config, &options, resume_state)?;
    println!(
        "{} steps in {:.1}s; last loss_simple {:.4}, loss_anchor {:.4}; max token frequency {:.3}{}",
        summary.steps,
        summary.wall_time,
        summary.loss_simple,
        summary.loss_anchor,
        summary.max_token_frequency,
        if summary.timed_out { " (time limit reached)" } else { "" }
    );
    println!("checkpoint: {}", out.join("final").display());
    Ok(())
}

fn open_checkpoint(dir: &Path) -> CliResult<Checkpoint> {
    let final_dir = dir.join("final");
    let dir = if final_dir.join("manifest.json").exists() { final_dir } else { dir.to_path_buf() };
    Ok(load_checkpoint(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))?)
}

fn inference_settings(a: &InferenceArgs) -> CliResult<(SamplerSpec, GuidanceSpec, embdiff::embedder::ClampSpec)> {
    let sampler = SamplerSpec {
        kind: a.sampler,
        steps: a.steps,
        second_order: a.second_order,
    };
    let guidance = GuidanceSpec::new(a.cfg_scale, a.cfg_schedule, a.order).map_err(usage)?;
    if a.order == CombineOrder::None && (a.cfg_scale != 1.0 || a.cfg_schedule != GuidanceSchedule::Constant) {
        log::warn!("--order none ignores the guidance scale and schedule");
    }
    let clamp = clamp_for_order(a.order, a.tau).map_err(usage)?;
    Ok((sampler, guidance, clamp))
}

fn sample_cmd(a: &SampleArgs) -> CliResult {
    let (sampler, guidance, clamp) = inference_settings(&a.inference)?;
    if a.condition.is_none() && a.input.is_none() {
        return Err(usage("give --condition TEXT or --input FILE"));
    }
    let ck = open_checkpoint(&a.checkpoint)?;
    sampler.validate(&ck.model.schedule).map_err(usage)?;
    let tokenizer = WhitespaceTokenizer::new(ck.vocab.clone());
    let max_len = ck.model.config().max_len;
    if let Some(text) = &a.condition {
        let condition = tokenizer.encode(text);
        if condition.is_empty() {
            return Err(usage("empty condition"));
        }
        let length = a.length.unwrap_or(condition.len());
        if length == 0 || length > max_len {
            return Err(usage(format!("--length must be in [1, {max_len}]")));
        }
        let (tokens, diagnostics) = sample(&ck.model, &condition, length, &sampler, &guidance, &clamp, a.seed)?;
        println!("{}", tokenizer.decode(&tokens));
        if let Some(path) = &a.diagnostics {
            let mut w = csv::Writer::from_path(path)?;
            w.write_record(["step", "t", "mean_nn_distance"])?;
            for d in &diagnostics {
                w.write_record([d.step.to_string(), d.t.to_string(), format!("{:.6}", d.mean_nn_distance)])?;
            }
            w.flush()?;
        }
        return Ok(());
    }

    let input = a.input.as_ref().expect("checked above");
    let records = load_jsonl(input)?.records;
    let seeds = a.seeds.clone().unwrap_or_else(|| vec![a.seed]);
    let mut out: Box<dyn Write> = match &a.output {
        Some(p) => Box::new(std::io::BufWriter::new(
            std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    };
    for &seed in &seeds {
        let jobs: Vec<SampleJob> = records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let condition = tokenizer.encode(&r.src);
                let natural = match r.trg.split_whitespace().count() {
                    0 => condition.len(),
                    n => n,
                };
                SampleJob {
                    length: a.length.unwrap_or(natural).clamp(1, max_len),
                    condition,
                    seed,
                    stream: i as u64,
                }
            })
            .collect();
        if let Some(i) = jobs.iter().position(|j| j.condition.is_empty() || j.condition.len() > max_len) {
            return Err(usage(format!("record {i} has an empty or over-long condition")));
        }
        for (chunk_idx, chunk) in jobs.chunks(256).enumerate() {
            let res = sample_batch(&ck.model, chunk, &sampler, &guidance, &clamp)?;
            for (k, tokens) in res.tokens.iter().enumerate() {
                let i = chunk_idx * 256 + k;
                let rec = HypothesisRecord {
                    condition_id: i.to_string(),
                    seed,
                    hypothesis: tokenizer.decode(tokens),
                    reference: records[i].trg.clone(),
                };
                serde_json::to_writer(&mut out, &rec)?;
                out.write_all(b"\n")?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn eval(a: &EvalArgs) -> CliResult {
    let records = read_hypotheses(&a.input)?;
    if records.is_empty() {
        return Err(usage(format!("{} has no hypotheses", a.input.display())));
    }
    let seeds: Vec<u64> = match &a.seeds {
        Some(s) => s.clone(),
        None => records.iter().map(|r| r.seed).collect::<BTreeSet<_>>().into_iter().collect(),
    };
    let summary = evaluate_testset(&records, &seeds)?;
    write_eval_csvs(&summary, &a.summary, &a.per_condition)?;
    let self_bleu = summary.self_bleu.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"));
    println!(
        "bleu4 {:.2} ± {:.2}  rouge_l {:.2} ± {:.2}  self_bleu {}  mean_len {:.2}",
        summary.bleu4_mean, summary.bleu4_std, summary.rouge_l_mean, summary.rouge_l_std, self_bleu, summary.mean_len
    );
    Ok(())
}

fn list_or<T>(flag: &Option<Vec<T>>, cfg: &KvConfig, key: &str, default: Vec<T>) -> CliResult<Vec<T>>
where
    T: std::str::FromStr + Clone,
    T::Err: std::fmt::Display,
{
    let v = match flag {
        Some(v) => v.clone(),
        None => cfg.get_list(key).map_err(usage)?.unwrap_or(default),
    };
    if v.is_empty() {
        return Err(usage(format!("--{key} needs at least one value")));
    }
    Ok(v)
}

fn sweep(home: &Path, a: &SweepArgs) -> CliResult {
    let out: PathBuf = a.out.clone().unwrap_or_else(|| home.join("runs").join("sweep"));
    if a.plots_only {
        let records = read_sweep_csv(&out.join(embdiff::harness::sweep::SWEEP_FILE))?;
        for p in write_plots(&records, &out)? {
            println!("{}", p.display());
        }
        return Ok(());
    }
    let cfg = match &a.config {
        Some(p) => KvConfig::load(p).map_err(usage)?,
        None => KvConfig::default(),
    };
    let grid = SweepGrid {
        scales: list_or(&a.scales, &cfg, "scales", vec![1.0])?,
        taus: list_or(&a.taus, &cfg, "taus", vec![0.0])?,
        schedules: list_or(&a.schedules, &cfg, "schedules", vec![GuidanceSchedule::Constant])?,
        orders: list_or(&a.orders, &cfg, "orders", vec![CombineOrder::None])?,
        steps: list_or(&a.steps, &cfg, "steps", vec![20])?,
    };
    let points = grid.points();
    for p in &points {
        p.guidance().map_err(usage)?;
        p.clamp().map_err(usage)?;
    }
    let ck = open_checkpoint(a.checkpoint.as_ref().expect("required by clap"))?;
    for p in &points {
        p.sampler_spec().validate(&ck.model.schedule).map_err(usage)?;
    }
    let mut test = load_jsonl(a.test.as_ref().expect("required by clap"))?.records;
    if let Some(n) = a.limit {
        test.truncate(n);
    }
    let mut options = SweepOptions::new(&out);
    options.seeds = list_or(&a.seeds, &cfg, "seeds", (0..5).collect())?;
    options.workers = a.workers.max(1);
    options.length_mode = a.length_mode;
    options.batch_size = a.batch_size;
    let records = run_sweep(&ck.model, &ck.vocab, &test, &points, &options)?;
    println!(
        "{} rows written to {}",
        records.len(),
        out.join(embdiff::harness::sweep::SWEEP_FILE).display()
    );
    Ok(())
}
