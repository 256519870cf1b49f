//! End-to-end acceptance checks. Everything runs inside one test so the
//! expensive training runs happen sequentially and each criterion prints a
//! single PASS / FAIL / SKIP line.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use embdiff::denoiser::{padding_mask, DenoiserConfig};
use embdiff::embedder::{ClampSpec, EmbeddingTable, WhitespaceTokenizer};
use embdiff::harness::{
    encode_records, load_generation_outputs, make_synthetic_task, run_sweep, train_run, RunOptions, SweepOptions,
    SweepPoint, SweepRecord, SyntheticTask, TaskKind, TaskSpec,
};
use embdiff::inference::{clamp_for_order, sample_batch, CombineOrder, GuidanceSchedule, GuidanceSpec, SampleJob, SamplerSpec};
use embdiff::metrics::{evaluate_testset, self_bleu};
use embdiff::schedule::NoiseSchedule;
use embdiff::training::{loss_anchor, ImportanceSampler, TokenPair, TrainConfig, Trainer};
use embdiff::DiffusionModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Directory of published generation outputs (one JSONL per seed) for the
/// optional metric-pipeline reproduction.
const OUTPUTS_ENV: &str = "EMBDIFF_DIFFUSEQ_DIR";

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = std::result::Result<Outcome, Box<dyn std::error::Error>>;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
}

fn forward_process() -> Check {
    let schedule = NoiseSchedule::linear(1000)?;
    let n = 10_000;
    let y0 = 1.5;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut notes = Vec::new();
    let mut ok = true;
    for t_end in [1, 500, 1000] {
        let mut y = Tensor::full(y0, n, &Device::Cpu)?;
        for t in 1..=t_end {
            y = schedule.q_step(&y, t, &normal_tensor(&mut rng, &[n]))?;
        }
        let v: Vec<f64> = y.to_vec1()?;
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let ab = schedule.alpha_bar(t_end);
        let (mu, sigma2) = (ab.sqrt() * y0, 1.0 - ab);
        let z_mean = (mean - mu) / (sigma2 / n as f64).sqrt();
        let z_var = (var - sigma2) / (sigma2 * (2.0 / (n - 1) as f64).sqrt());
        ok &= z_mean.abs() < 3.0 && z_var.abs() < 3.0;
        notes.push(format!("t={t_end} z_mean={z_mean:.2} z_var={z_var:.2}"));
    }
    Ok(verdict(ok, notes.join(", ")))
}

fn anchor_gradient() -> Check {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (v, d, b, n) = (5, 6, 2, 3);
    let table = EmbeddingTable::from_tensor(normal_tensor(&mut rng, &[v, d]))?;
    let y = Var::from_tensor(&normal_tensor(&mut rng, &[b, n, d]))?;
    let tokens = [0u32, 3, 4, 2, 1, 0];
    let mask = padding_mask(&[3, 2], n, DType::F64, &dev)?;
    let loss = |y: &Tensor| -> f64 {
        loss_anchor(y, &tokens, &table, &mask).unwrap().to_scalar::<f64>().unwrap()
    };
    let out = loss_anchor(y.as_tensor(), &tokens, &table, &mask)?;
    let grads = out.backward()?;
    let analytic_y: Vec<f64> = grads.get(y.as_tensor()).ok_or("no grad for prediction")?.flatten_all()?.to_vec1()?;
    let analytic_e: Vec<f64> = grads.get(table.weights()).ok_or("no grad for table")?.flatten_all()?.to_vec1()?;

    let h = 1e-6;
    let base: Vec<f64> = y.as_tensor().flatten_all()?.to_vec1()?;
    let mut numeric_y = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let at = |delta: f64| {
            let mut p = base.clone();
            p[i] += delta;
            loss(&Tensor::from_vec(p, (b, n, d), &dev).unwrap())
        };
        numeric_y.push((at(h) - at(-h)) / (2.0 * h));
    }
    let weights: Vec<f64> = table.weights().flatten_all()?.to_vec1()?;
    let mut numeric_e = Vec::with_capacity(weights.len());
    for i in 0..weights.len() {
        let at = |delta: f64| {
            let mut p = weights.clone();
            p[i] += delta;
            let shifted = EmbeddingTable::from_tensor(Tensor::from_vec(p, (v, d), &dev).unwrap()).unwrap();
            loss_anchor(y.as_tensor(), &tokens, &shifted, &mask).unwrap().to_scalar::<f64>().unwrap()
        };
        numeric_e.push((at(h) - at(-h)) / (2.0 * h));
    }
    let rel = |a: &[f64], f: &[f64]| {
        let diff: f64 = a.iter().zip(f).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = f.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff / norm.max(1e-12)
    };
    let (ry, re) = (rel(&analytic_y, &numeric_y), rel(&analytic_e, &numeric_e));
    let padded_zero = analytic_y[(n + 2) * d..(n + 3) * d].iter().all(|&g| g == 0.0);
    Ok(verdict(
        ry < 1e-3 && re < 1e-3 && padded_zero,
        format!("rel err prediction {ry:.2e}, table {re:.2e}, padded grad zero {padded_zero}"),
    ))
}

fn importance_unbiased() -> Check {
    let steps = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let table: Vec<f64> = (1..=steps)
        .map(|t| 0.05 + (t as f64 / steps as f64).powf(1.5) + 0.1 * rng.gen::<f64>())
        .collect();
    let mut sampler = ImportanceSampler::new(steps, 10)?;
    for (i, &l) in table.iter().enumerate() {
        for _ in 0..10 {
            // observed losses scatter around the table so p(t) is only
            // roughly proportional to it
            sampler.update(i + 1, l * (0.5 + rng.gen::<f64>()));
        }
    }
    let truth = table.iter().sum::<f64>() / steps as f64;
    let draws = sampler.sample_many(&mut rng, 100_000);
    let est = draws.iter().map(|&(t, w)| w * table[t - 1]).sum::<f64>() / draws.len() as f64;
    let rel = (est - truth).abs() / truth;
    Ok(verdict(sampler.is_warm() && rel < 0.01, format!("estimate {est:.5} vs {truth:.5} (rel {rel:.2e})")))
}

fn tokenize(task: &SyntheticTask, max_len: usize) -> (Vec<TokenPair>, Vec<TokenPair>) {
    let tok = WhitespaceTokenizer::new(task.vocab.clone());
    (encode_records(&task.train, &tok, max_len).0, encode_records(&task.test, &tok, max_len).0)
}

fn normalization_invariant() -> Check {
    let task = make_synthetic_task(&TaskSpec::new(TaskKind::Copy, 20, 2000, 10, 8, 4))?;
    let (train, _) = tokenize(&task, 8);
    let config = DenoiserConfig {
        layers: 1,
        heads: 2,
        model_dim: 32,
        embed_dim: 16,
        ffn_dim: 64,
        max_len: 8,
        cond_dropout_p: 0.1,
    };
    let model = DiffusionModel::new(config, NoiseSchedule::linear(1000)?, task.vocab.len(), 2)?;
    let tc = TrainConfig {
        batch_size: 16,
        peak_lr: 1e-3,
        warmup_steps: 50,
        total_steps: Some(500),
        ..Default::default()
    };
    let mut trainer = Trainer::new(&model, tc, 500)?;
    let mut worst = (0.0f64, 0.0f64);
    let mut checked = 0;
    trainer.fit(&model, &train, |_, m, _| {
        let (mean, std) = m.table.normalization_error()?;
        worst = (worst.0.max(mean), worst.1.max(std));
        checked += 1;
        Ok(true)
    })?;
    Ok(verdict(
        checked == 500 && worst.0 < 1e-5 && worst.1 < 1e-4,
        format!("{checked} steps, max |mean| {:.1e}, max |std-1| {:.1e}", worst.0, worst.1),
    ))
}

fn jobs_for(pairs: &[TokenPair], seed: u64) -> Vec<SampleJob> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| SampleJob {
            condition: p.src.clone(),
            length: p.trg.len(),
            seed,
            stream: i as u64,
        })
        .collect()
}

fn token_accuracy(model: &DiffusionModel, pairs: &[TokenPair]) -> embdiff::Result<f64> {
    let out = sample_batch(
        model,
        &jobs_for(pairs, 0),
        &SamplerSpec::fewstep(20),
        &GuidanceSpec::baseline(),
        &ClampSpec::hard_final(),
    )?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (o, p) in out.tokens.iter().zip(pairs) {
        hit += o.iter().zip(&p.trg).filter(|(a, b)| a == b).count();
        total += p.trg.len();
    }
    Ok(hit as f64 / total as f64)
}

fn reverse_quality() -> Check {
    let task = make_synthetic_task(&TaskSpec::new(TaskKind::Reverse, 100, 20_000, 500, 16, 0))?;
    let (train, test) = tokenize(&task, 16);
    let model = DiffusionModel::new(DenoiserConfig::desk(), NoiseSchedule::linear(1000)?, task.vocab.len(), 1)?;
    let tc = TrainConfig {
        batch_size: 64,
        peak_lr: 1e-3,
        warmup_steps: 100,
        total_steps: Some(1500),
        ..Default::default()
    };
    let mut trainer = Trainer::new(&model, tc, 1500)?;
    let budget = Duration::from_secs(30 * 60);
    let start = Instant::now();
    // early stop on a slice of the training pairs, never the test split
    let monitor = &train[..128];
    let mut failure = None;
    trainer.fit(&model, &train[128..], |r, m, _| {
        if start.elapsed() >= budget {
            return Ok(false);
        }
        if r.step % 250 == 0 {
            match token_accuracy(m, monitor) {
                Ok(acc) => return Ok(acc < 0.97),
                Err(e) => failure = Some(e),
            }
            return Ok(false);
        }
        Ok(true)
    })?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    let elapsed = start.elapsed();
    let acc = token_accuracy(&model, &test)?;
    Ok(verdict(
        acc >= 0.90 && elapsed <= budget,
        format!("test token accuracy {:.1}% after {} steps, {:.0}s", acc * 100.0, trainer.step(), elapsed.as_secs_f64()),
    ))
}

struct SynonymSetup {
    model: DiffusionModel,
    task: SyntheticTask,
    records: Vec<SweepRecord>,
}

fn synonym_setup(dir: &std::path::Path) -> embdiff::Result<SynonymSetup> {
    let task = make_synthetic_task(&TaskSpec::new(TaskKind::SynonymParaphrase, 50, 20_000, 100, 12, 0))?;
    let (train, _) = tokenize(&task, 12);
    let model = DiffusionModel::new(DenoiserConfig::desk(), NoiseSchedule::linear(1000)?, task.vocab.len(), 1)?;
    let tc = TrainConfig {
        batch_size: 64,
        peak_lr: 1e-3,
        warmup_steps: 100,
        total_steps: Some(600),
        ..Default::default()
    };
    let summary = train_run(&model, &task.vocab, &train, tc, &RunOptions::new(dir.join("train")), None)?;
    say(format!("synonym model: {} steps in {:.0}s", summary.steps, summary.wall_time));
    let c = GuidanceSchedule::Constant;
    let mut points = vec![SweepPoint::new(1.0, 0.0, c, CombineOrder::None, 20)];
    for tau in [0.0, 0.2, 0.5, 1.0] {
        points.push(SweepPoint::new(1.0, tau, c, CombineOrder::ClampOnly, 20));
    }
    for s in [0.5, 1.0, 2.0, 3.0, 4.0] {
        points.push(SweepPoint::new(s, 0.0, c, CombineOrder::CfgOnly, 20));
    }
    let mut options = SweepOptions::new(dir.join("sweep"));
    options.plots = false;
    let records = run_sweep(&model, &task.vocab, &task.test, &points, &options)?
        .into_iter()
        .filter(SweepRecord::is_aggregate)
        .collect();
    Ok(SynonymSetup {
        model,
        task,
        records,
    })
}

fn row<'a>(records: &'a [SweepRecord], order: CombineOrder, s: f64, tau: f64) -> &'a SweepRecord {
    records
        .iter()
        .find(|r| r.order == order && r.s == s && r.tau == tau)
        .expect("grid point present")
}

fn clamping_direction(setup: &SynonymSetup) -> Check {
    let base = row(&setup.records, CombineOrder::None, 1.0, 0.0);
    let clamp = row(&setup.records, CombineOrder::ClampOnly, 1.0, 0.0);
    let (bs, cs) = (base.self_bleu.unwrap_or(f64::NAN), clamp.self_bleu.unwrap_or(f64::NAN));
    Ok(verdict(
        clamp.bleu4 >= base.bleu4 && cs > bs,
        format!("BLEU-4 {:.2} -> {:.2}, self-BLEU {bs:.2} -> {cs:.2}", base.bleu4, clamp.bleu4),
    ))
}

fn cfg_curve(setup: &SynonymSetup) -> Check {
    let scales = [0.5, 1.0, 2.0, 3.0, 4.0];
    let q: Vec<f64> = scales
        .iter()
        .map(|&s| row(&setup.records, CombineOrder::CfgOnly, s, 0.0).bleu4)
        .collect();
    let peak = (0..q.len()).max_by(|&a, &b| q[a].total_cmp(&q[b])).unwrap();
    let ok = scales[peak] > 1.0 && q[q.len() - 1] < q[peak] && q[0] < q[1];
    let curve: Vec<String> = scales.iter().zip(&q).map(|(s, v)| format!("s={s}:{v:.2}")).collect();
    Ok(verdict(ok, format!("BLEU-4 {} (peak s*={})", curve.join(" "), scales[peak])))
}

fn stochastic_diversity(setup: &SynonymSetup) -> Check {
    let taus = [0.0, 0.2, 0.5, 1.0];
    let sb: Vec<f64> = taus
        .iter()
        .map(|&t| row(&setup.records, CombineOrder::ClampOnly, 1.0, t).self_bleu.unwrap_or(f64::NAN))
        .collect();
    let ok = sb.windows(2).all(|w| w[1] <= w[0]);
    let curve: Vec<String> = taus.iter().zip(&sb).map(|(t, v)| format!("tau={t}:{v:.2}")).collect();
    Ok(verdict(ok, format!("self-BLEU {}", curve.join(" "))))
}

fn distance_diagnostic(setup: &SynonymSetup) -> Check {
    let (_, test) = tokenize(&setup.task, 12);
    let jobs = jobs_for(&test, 0);
    let sampler = SamplerSpec::fewstep(20);
    let base = sample_batch(&setup.model, &jobs, &sampler, &GuidanceSpec::baseline(), &ClampSpec::hard_final())?;
    let order = CombineOrder::CfgBeforeClamp;
    let guided = sample_batch(
        &setup.model,
        &jobs,
        &sampler,
        &GuidanceSpec::constant(2.5, order)?,
        &clamp_for_order(order, 0.0)?,
    )?;
    let first = base.diagnostics.first().unwrap().mean_nn_distance;
    let last = base.diagnostics.last().unwrap().mean_nn_distance;
    let guided_last = guided.diagnostics.last().unwrap().mean_nn_distance;
    Ok(verdict(
        last < first && guided_last > last,
        format!("baseline {first:.3} -> {last:.3}; cfg_before_clamp s=2.5 final {guided_last:.3}"),
    ))
}

fn self_bleu_oracle() -> Check {
    // Leave-one-out BLEU with exponential smoothing: an order with no match
    // scores 1 / (2^k * total) for the k-th such order. Every set below has
    // equal lengths, so the brevity penalty is 1.
    let g = |p: [f64; 4]| 100.0 * p.iter().product::<f64>().powf(0.25);
    let three = ["a b c d e", "a b c d f", "a b x y z"];
    let near = g([4.0 / 5.0, 3.0 / 4.0, 2.0 / 3.0, 1.0 / 2.0]);
    let far = g([2.0 / 5.0, 1.0 / 4.0, 1.0 / 6.0, 1.0 / 8.0]);
    let want3 = (2.0 * near + far) / 3.0;
    let five = ["a b c d", "a b c d", "a b c e", "a b f g", "h i j k"];
    let want5 = (100.0 + 100.0 + g([3.0 / 4.0, 2.0 / 3.0, 1.0 / 2.0, 1.0 / 2.0]) + g([2.0 / 4.0, 1.0 / 3.0, 1.0 / 4.0, 1.0 / 4.0]))
        / 5.0;
    let got3 = self_bleu(&three)?;
    let got5 = self_bleu(&five)?;
    let same = self_bleu(&["the cat sat on the mat"; 4])?;
    let disjoint = self_bleu(&["a b c d e", "f g h i j", "k l m n o"])?;
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * b.abs().max(1.0);
    Ok(verdict(
        close(got3, want3) && close(got5, want5) && close(same, 100.0) && disjoint < 1.0,
        format!("3-set {got3:.4} (want {want3:.4}), 5-set {got5:.4} (want {want5:.4}), identical {same:.2}, disjoint {disjoint:.4}"),
    ))
}

fn baseline_equivalence(setup: &SynonymSetup) -> Check {
    let (_, test) = tokenize(&setup.task, 12);
    let jobs = jobs_for(&test[..32], 7);
    let sampler = SamplerSpec::fewstep(20);
    let plain = sample_batch(&setup.model, &jobs, &sampler, &GuidanceSpec::baseline(), &ClampSpec::hard_final())?;
    let order = CombineOrder::CfgOnly;
    let guided = sample_batch(
        &setup.model,
        &jobs,
        &sampler,
        &GuidanceSpec::constant(1.0, order)?,
        &clamp_for_order(order, 0.0)?,
    )?;
    let same_tokens = plain.tokens == guided.tokens;
    let same_diag = plain
        .diagnostics
        .iter()
        .zip(&guided.diagnostics)
        .all(|(a, b)| a.t == b.t && a.mean_nn_distance.to_bits() == b.mean_nn_distance.to_bits());
    Ok(verdict(
        same_tokens && same_diag,
        format!("tokens identical {same_tokens}, per-step distances identical {same_diag}"),
    ))
}

fn cost_contract(setup: &SynonymSetup) -> Check {
    let (_, test) = tokenize(&setup.task, 12);
    let jobs = jobs_for(&test[..8], 0);
    let steps = 10;
    let sampler = SamplerSpec::fewstep(steps);
    let denoiser = &setup.model.denoiser;
    let mut counts = Vec::new();
    let mut ok = true;
    for order in [CombineOrder::CfgOnly, CombineOrder::CfgBeforeClamp, CombineOrder::ClampBeforeCfg] {
        for s in [0.0, 0.5, 1.0, 3.0] {
            denoiser.reset_evaluations();
            sample_batch(&setup.model, &jobs, &sampler, &GuidanceSpec::constant(s, order)?, &clamp_for_order(order, 0.0)?)?;
            let n = denoiser.evaluations();
            ok &= n == 2 * steps as u64;
            counts.push(n);
        }
    }
    denoiser.reset_evaluations();
    sample_batch(&setup.model, &jobs, &sampler, &GuidanceSpec::baseline(), &ClampSpec::hard_final())?;
    let plain = denoiser.evaluations();
    ok &= plain == steps as u64;
    let distinct: std::collections::BTreeSet<u64> = counts.iter().copied().collect();
    Ok(verdict(
        ok,
        format!("{steps} steps: guided runs used {distinct:?} evaluations, unguided {plain}"),
    ))
}

fn published_outputs() -> Check {
    let Some(dir) = std::env::var_os(OUTPUTS_ENV).map(PathBuf::from) else {
        return Ok(Outcome::Skip(format!("set {OUTPUTS_ENV} to a directory of per-seed output files")));
    };
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json" || x == "jsonl"))
        .collect();
    files.sort();
    if files.len() < 2 {
        return Ok(Outcome::Skip(format!("fewer than two output files in {}", dir.display())));
    }
    let records = load_generation_outputs(&files)?;
    let seeds: Vec<u64> = (0..files.len() as u64).collect();
    let summary = evaluate_testset(&records, &seeds)?;
    let sb = summary.self_bleu.ok_or("self-BLEU needs two or more seeds")?;
    Ok(verdict(
        (sb - 50.93).abs() <= 1.0,
        format!("self-BLEU {sb:.2} over {} files (target 50.93 +/- 1.0)", files.len()),
    ))
}

/// Writes straight to stdout so the verdicts show up even when the test
/// harness captures `println!` output.
fn say(line: String) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn run(n: usize, name: &str, check: impl FnOnce() -> Check, failures: &mut Vec<usize>) {
    let start = Instant::now();
    let (tag, detail) = match check() {
        Ok(Outcome::Pass(d)) => ("PASS", d),
        Ok(Outcome::Skip(d)) => ("SKIP", d),
        Ok(Outcome::Fail(d)) => {
            failures.push(n);
            ("FAIL", d)
        }
        Err(e) => {
            failures.push(n);
            ("FAIL", format!("error: {e}"))
        }
    };
    say(format!("criterion {n:>2} {tag} {name}: {detail} [{:.1}s]", start.elapsed().as_secs_f64()));
}

#[test]
fn acceptance_criteria() {
    let dir = tempfile::tempdir().unwrap();
    let mut failures = Vec::new();
    run(1, "forward process", forward_process, &mut failures);
    run(2, "anchor gradient", anchor_gradient, &mut failures);
    run(3, "importance sampling", importance_unbiased, &mut failures);
    run(4, "embedding normalization", normalization_invariant, &mut failures);
    run(5, "reverse task accuracy", reverse_quality, &mut failures);

    let setup = synonym_setup(dir.path());
    match &setup {
        Ok(s) => {
            run(6, "clamping direction", || clamping_direction(s), &mut failures);
            run(7, "guidance curve", || cfg_curve(s), &mut failures);
            run(8, "stochastic clamp diversity", || stochastic_diversity(s), &mut failures);
            run(9, "distance diagnostic", || distance_diagnostic(s), &mut failures);
        }
        Err(e) => {
            for (n, name) in [(6, "clamping direction"), (7, "guidance curve"), (8, "stochastic clamp diversity"), (9, "distance diagnostic")] {
                say(format!("criterion {n:>2} FAIL {name}: synonym model setup failed: {e}"));
                failures.push(n);
            }
        }
    }
    run(10, "self-BLEU oracle", self_bleu_oracle, &mut failures);
    match &setup {
        Ok(s) => {
            run(11, "baseline equivalence", || baseline_equivalence(s), &mut failures);
            run(12, "evaluation cost", || cost_contract(s), &mut failures);
        }
        Err(_) => {
            for (n, name) in [(11, "baseline equivalence"), (12, "evaluation cost")] {
                say(format!("criterion {n:>2} FAIL {name}: synonym model setup failed"));
                failures.push(n);
            }
        }
    }
    run(13, "published outputs", published_outputs, &mut failures);
    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
