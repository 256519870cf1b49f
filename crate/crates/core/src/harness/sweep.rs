use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedder::{ClampSpec, Tokenizer, Vocab, WhitespaceTokenizer};
use crate::error::{Error, Result};
use crate::harness::data::{split_hash, DatasetRecord};
use crate::inference::{clamp_for_order, sample_batch, CombineOrder, GuidanceSchedule, GuidanceSpec, SampleJob, SamplerKind, SamplerSpec};
use crate::metrics::{evaluate_testset, HypothesisRecord};
use crate::model::DiffusionModel;

pub const SWEEP_COLUMNS: [&str; 12] = [
    "method", "s", "tau", "schedule", "order", "steps", "seed", "bleu4", "rouge_l", "self_bleu", "mean_len", "wall_time",
];
pub const SWEEP_FILE: &str = "sweep.csv";
pub const COMPLETED_FILE: &str = "completed.jsonl";
pub const META_FILE: &str = "sweep_meta.json";
pub const PARETO_FILE: &str = "pareto.txt";

/// How output lengths are chosen during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthMode {
    /// Length of the reference output.
    Reference,
    /// Length of the condition.
    Source,
}

impl FromStr for LengthMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "reference" | "ref" => Ok(Self::Reference),
            "source" | "src" => Ok(Self::Source),
            _ => Err(Error::invalid(format!("unknown length mode '{s}'"))),
        }
    }
}

impl fmt::Display for LengthMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Reference => "reference",
            Self::Source => "source",
        })
    }
}

/// Short label for an inference method.
pub fn method_label(order: CombineOrder) -> &'static str {
    match order {
        CombineOrder::None => "baseline",
        CombineOrder::CfgOnly => "cfg",
        CombineOrder::ClampOnly => "clamp",
        CombineOrder::CfgBeforeClamp => "cfg+clamp",
        CombineOrder::ClampBeforeCfg => "clamp+cfg",
    }
}

/// One inference configuration in a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub method: String,
    pub scale: f64,
    pub tau: f64,
    pub schedule: GuidanceSchedule,
    pub order: CombineOrder,
    pub steps: usize,
    pub sampler: SamplerKind,
}

impl SweepPoint {
    pub fn new(scale: f64, tau: f64, schedule: GuidanceSchedule, order: CombineOrder, steps: usize) -> Self {
        Self {
            method: method_label(order).to_string(),
            scale,
            tau,
            schedule,
            order,
            steps,
            sampler: SamplerKind::FewStep,
        }
    }

    pub fn guidance(&self) -> Result<GuidanceSpec> {
        GuidanceSpec::new(self.scale, self.schedule, self.order)
    }

    /// In-loop clamping follows the order; the final clamp uses `tau`.
    pub fn clamp(&self) -> Result<ClampSpec> {
        clamp_for_order(self.order, self.tau)
    }

    pub fn sampler_spec(&self) -> SamplerSpec {
        SamplerSpec {
            kind: self.sampler,
            steps: self.steps,
            second_order: false,
        }
    }

    pub fn key(&self) -> String {
        format!(
            "{}|s={}|tau={}|{}|{}|steps={}|{}",
            self.method, self.scale, self.tau, self.schedule, self.order, self.steps, self.sampler
        )
    }
}

/// Cartesian product of the listed values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub scales: Vec<f64>,
    pub taus: Vec<f64>,
    pub schedules: Vec<GuidanceSchedule>,
    pub orders: Vec<CombineOrder>,
    pub steps: Vec<usize>,
}

impl SweepGrid {
    pub fn points(&self) -> Vec<SweepPoint> {
        let mut out = Vec::new();
        for &order in &self.orders {
            for &schedule in &self.schedules {
                for &scale in &self.scales {
                    for &tau in &self.taus {
                        for &steps in &self.steps {
                            out.push(SweepPoint::new(scale, tau, schedule, order, steps));
                        }
                    }
                }
            }
        }
        out
    }
}

/// One sweep table row. Aggregate rows have `seed = None` (written as
/// `all`) and carry self-BLEU; per-seed rows leave it empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub method: String,
    pub s: f64,
    pub tau: f64,
    pub schedule: GuidanceSchedule,
    pub order: CombineOrder,
    pub steps: usize,
    pub seed: Option<u64>,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub self_bleu: Option<f64>,
    pub mean_len: f64,
    pub wall_time: f64,
}

impl SweepRecord {
    pub fn is_aggregate(&self) -> bool {
        self.seed.is_none()
    }

    /// Quality metric by column name (`bleu4` or `rouge_l`).
    pub fn quality(&self, metric: &str) -> Option<f64> {
        match metric {
            "bleu4" => Some(self.bleu4),
            "rouge_l" => Some(self.rouge_l),
            _ => None,
        }
    }

    fn config_label(&self) -> String {
        format!(
            "{} s={} tau={} {} {} steps={}",
            self.method, self.s, self.tau, self.schedule, self.order, self.steps
        )
    }
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub seeds: Vec<u64>,
    pub workers: usize,
    pub length_mode: LengthMode,
    /// Conditions per batched sampler call.
    pub batch_size: usize,
    pub out_dir: PathBuf,
    pub plots: bool,
}

impl SweepOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            seeds: (0..5).collect(),
            workers: 1,
            length_mode: LengthMode::Reference,
            batch_size: 256,
            out_dir: out_dir.into(),
            plots: true,
        }
    }
}

/// A finished `(point, seed)` unit as stored in the completed-row manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CompletedUnit {
    key: String,
    seed: u64,
    wall_time: f64,
    hypotheses: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SweepMeta {
    split_hash: String,
    length_mode: LengthMode,
    seeds: Vec<u64>,
    conditions: usize,
}

/// Generates hypotheses for every condition under one configuration and seed.
pub fn generate(
    model: &DiffusionModel,
    tokenizer: &WhitespaceTokenizer,
    test: &[DatasetRecord],
    point: &SweepPoint,
    seed: u64,
    length_mode: LengthMode,
    batch_size: usize,
) -> Result<Vec<String>> {
    let guidance = point.guidance()?;
    let clamp = point.clamp()?;
    let sampler = point.sampler_spec();
    let max_len = model.config().max_len;
    let jobs: Vec<SampleJob> = test
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let condition = tokenizer.encode(&r.src);
            let length = match length_mode {
                LengthMode::Reference => r.trg.split_whitespace().count(),
                LengthMode::Source => condition.len(),
            }
            .clamp(1, max_len);
            SampleJob {
                condition,
                length,
                seed,
                stream: i as u64,
            }
        })
        .collect();
    let mut out = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(batch_size.max(1)) {
        let res = sample_batch(model, chunk, &sampler, &guidance, &clamp)?;
        out.extend(res.tokens.iter().map(|t| tokenizer.decode(t)));
    }
    Ok(out)
}

fn read_completed(path: &Path) -> Result<Vec<CompletedUnit>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        // a torn final line from an interrupted run is simply redone
        match serde_json::from_str(&line) {
            Ok(u) => out.push(u),
            Err(_) => log::warn!("ignoring unreadable line in {}", path.display()),
        }
    }
    Ok(out)
}

/// Runs every `(point, seed)` unit not already listed in the output
/// directory's completed-row manifest, then rebuilds the full table, Pareto
/// report and plots from the manifest.
pub fn run_sweep(
    model: &DiffusionModel,
    vocab: &Vocab,
    test: &[DatasetRecord],
    points: &[SweepPoint],
    options: &SweepOptions,
) -> Result<Vec<SweepRecord>> {
    if test.is_empty() || points.is_empty() || options.seeds.is_empty() {
        return Err(Error::invalid("sweep needs test records, grid points and seeds"));
    }
    let dir = &options.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = SweepMeta {
        split_hash: split_hash(test),
        length_mode: options.length_mode,
        seeds: options.seeds.clone(),
        conditions: test.len(),
    };
    let meta_path = dir.join(META_FILE);
    if meta_path.exists() {
        let old: SweepMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?)?;
        if old.split_hash != meta.split_hash || old.length_mode != meta.length_mode {
            return Err(Error::invalid(format!(
                "{} belongs to a sweep over a different split or length mode",
                dir.display()
            )));
        }
    }
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;

    let completed_path = dir.join(COMPLETED_FILE);
    let mut done: HashMap<(String, u64), CompletedUnit> = read_completed(&completed_path)?
        .into_iter()
        .map(|u| ((u.key.clone(), u.seed), u))
        .collect();
    let todo: Vec<(usize, u64)> = points
        .iter()
        .enumerate()
        .flat_map(|(i, p)| options.seeds.iter().map(move |&s| (i, s)).filter(move |_| !p.key().is_empty()))
        .filter(|(i, s)| !done.contains_key(&(points[*i].key(), *s)))
        .collect();
    if !todo.is_empty() {
        log::info!("sweep: {} of {} units to run", todo.len(), points.len() * options.seeds.len());
    }

    let tokenizer = WhitespaceTokenizer::new(vocab.clone());
    let mut writer = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&completed_path)
        .map_err(|e| Error::io(&completed_path, e))?;
    let next = AtomicUsize::new(0);
    let workers = options.workers.clamp(1, todo.len().max(1));
    let (tx, rx) = mpsc::channel::<Result<CompletedUnit>>();
    let mut first_error = None;
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, todo, tokenizer) = (&next, &todo, &tokenizer);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(pi, seed)) = todo.get(i) else { break };
                let point = &points[pi];
                let start = Instant::now();
                let res = generate(model, tokenizer, test, point, seed, options.length_mode, options.batch_size).map(|hypotheses| {
                    CompletedUnit {
                        key: point.key(),
                        seed,
                        wall_time: start.elapsed().as_secs_f64(),
                        hypotheses,
                    }
                });
                let failed = res.is_err();
                if tx.send(res).is_err() || failed {
                    // stop handing out work after a failure
                    next.store(todo.len(), Ordering::SeqCst);
                    break;
                }
            });
        }
        drop(tx);
        for res in rx {
            match res {
                Ok(unit) => {
                    let line = serde_json::to_string(&unit).map(|l| l + "\n");
                    let written = line
                        .map_err(Error::from)
                        .and_then(|l| writer.write_all(l.as_bytes()).and_then(|_| writer.flush()).map_err(|e| Error::io(&completed_path, e)));
                    if let Err(e) = written {
                        first_error.get_or_insert(e);
                    }
                    done.insert((unit.key.clone(), unit.seed), unit);
                }
                Err(e) => {
                    first_error.get_or_insert(e);
                }
            }
        }
    });
    if let Some(e) = first_error {
        return Err(e);
    }

    let records = build_table(points, &options.seeds, test, &done)?;
    write_sweep_csv(&dir.join(SWEEP_FILE), &records)?;
    write_pareto_report(&dir.join(PARETO_FILE), &records, &meta.split_hash, options.length_mode)?;
    if options.plots {
        write_plots(&records, dir)?;
    }
    Ok(records)
}

fn build_table(
    points: &[SweepPoint],
    seeds: &[u64],
    test: &[DatasetRecord],
    done: &HashMap<(String, u64), CompletedUnit>,
) -> Result<Vec<SweepRecord>> {
    let mut records = Vec::new();
    for point in points {
        let key = point.key();
        let mut hyps = Vec::new();
        let mut wall = BTreeMap::new();
        for &seed in seeds {
            let unit = done
                .get(&(key.clone(), seed))
                .ok_or_else(|| Error::invalid(format!("no outputs for {key} seed {seed}")))?;
            if unit.hypotheses.len() != test.len() {
                return Err(Error::invalid(format!("{key} seed {seed}: output count does not match the test set")));
            }
            wall.insert(seed, unit.wall_time);
            for (i, (h, r)) in unit.hypotheses.iter().zip(test).enumerate() {
                hyps.push(HypothesisRecord {
                    condition_id: format!("{i:08}"),
                    seed,
                    hypothesis: h.clone(),
                    reference: r.trg.clone(),
                });
            }
        }
        let summary = evaluate_testset(&hyps, seeds)?;
        let row = |seed: Option<u64>, bleu4, rouge_l, self_bleu, mean_len, wall_time| SweepRecord {
            method: point.method.clone(),
            s: point.scale,
            tau: point.tau,
            schedule: point.schedule,
            order: point.order,
            steps: point.steps,
            seed,
            bleu4,
            rouge_l,
            self_bleu,
            mean_len,
            wall_time,
        };
        for s in &summary.per_seed {
            records.push(row(Some(s.seed), s.bleu4, s.rouge_l, None, s.mean_len, wall[&s.seed]));
        }
        records.push(row(
            None,
            summary.bleu4_mean,
            summary.rouge_l_mean,
            summary.self_bleu,
            summary.mean_len,
            wall.values().sum(),
        ));
    }
    Ok(records)
}

fn fmt_f(x: f64) -> String {
    format!("{x:.6}")
}

pub fn write_sweep_csv(path: &Path, records: &[SweepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SWEEP_COLUMNS)?;
    for r in records {
        w.write_record([
            r.method.clone(),
            r.s.to_string(),
            r.tau.to_string(),
            r.schedule.to_string(),
            r.order.to_string(),
            r.steps.to_string(),
            r.seed.map_or_else(|| "all".to_string(), |s| s.to_string()),
            fmt_f(r.bleu4),
            fmt_f(r.rouge_l),
            r.self_bleu.map(fmt_f).unwrap_or_default(),
            format!("{:.4}", r.mean_len),
            format!("{:.3}", r.wall_time),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != SWEEP_COLUMNS {
        return Err(Error::invalid(format!("{} does not have the sweep columns", path.display())));
    }
    let bad = |what: &str| Error::invalid(format!("{}: bad {what}", path.display()));
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let f = |i: usize| row[i].parse::<f64>().map_err(|_| bad(SWEEP_COLUMNS[i]));
        out.push(SweepRecord {
            method: row[0].to_string(),
            s: f(1)?,
            tau: f(2)?,
            schedule: row[3].parse()?,
            order: row[4].parse()?,
            steps: row[5].parse().map_err(|_| bad("steps"))?,
            seed: if &row[6] == "all" { None } else { Some(row[6].parse().map_err(|_| bad("seed"))?) },
            bleu4: f(7)?,
            rouge_l: f(8)?,
            self_bleu: if row[9].is_empty() { None } else { Some(f(9)?) },
            mean_len: f(10)?,
            wall_time: f(11)?,
        });
    }
    Ok(out)
}

/// Aggregate rows not strictly dominated on (higher quality, lower
/// self-BLEU), sorted by self-BLEU.
pub fn pareto_front<'a>(records: &'a [SweepRecord], metric: &str) -> Vec<&'a SweepRecord> {
    let agg: Vec<&SweepRecord> = records
        .iter()
        .filter(|r| r.is_aggregate() && r.self_bleu.is_some() && r.quality(metric).is_some())
        .collect();
    let q = |r: &SweepRecord| r.quality(metric).unwrap_or(f64::NAN);
    let sb = |r: &SweepRecord| r.self_bleu.unwrap_or(f64::NAN);
    let mut front: Vec<&SweepRecord> = agg
        .iter()
        .filter(|a| {
            !agg.iter().any(|b| {
                q(b) >= q(a) && sb(b) <= sb(a) && (q(b) > q(a) || sb(b) < sb(a))
            })
        })
        .copied()
        .collect();
    front.sort_by(|a, b| sb(a).total_cmp(&sb(b)));
    front
}

fn write_pareto_report(path: &Path, records: &[SweepRecord], split: &str, mode: LengthMode) -> Result<()> {
    let mut text = format!("split_hash: {split}\nlength_mode: {mode}\n");
    for metric in ["bleu4", "rouge_l"] {
        text.push_str(&format!("\nnon-dominated configurations ({metric} vs self_bleu):\n"));
        for r in pareto_front(records, metric) {
            text.push_str(&format!(
                "  {:<60} {metric}={:.3} self_bleu={:.3}\n",
                r.config_label(),
                r.quality(metric).unwrap_or(f64::NAN),
                r.self_bleu.unwrap_or(f64::NAN)
            ));
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One quality-vs-self-BLEU scatter per quality metric, from aggregate rows.
pub fn write_plots(records: &[SweepRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let agg: Vec<&SweepRecord> = records.iter().filter(|r| r.is_aggregate() && r.self_bleu.is_some()).collect();
    let mut written = Vec::new();
    if agg.is_empty() {
        return Ok(written);
    }
    let methods: Vec<String> = {
        let mut m: Vec<String> = agg.iter().map(|r| r.method.clone()).collect();
        m.sort();
        m.dedup();
        m
    };
    for metric in ["bleu4", "rouge_l"] {
        let path = dir.join(format!("tradeoff_{metric}.svg"));
        plot_one(&agg, &methods, metric, &path).map_err(|e| Error::Plot(e.to_string()))?;
        written.push(path);
    }
    Ok(written)
}

fn padded_range(values: impl Iterator<Item = f64>) -> std::ops::Range<f64> {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    let pad = ((hi - lo) * 0.1).max(1.0);
    (lo - pad)..(hi + pad)
}

fn plot_one(agg: &[&SweepRecord], methods: &[String], metric: &str, path: &Path) -> std::result::Result<(), Box<dyn std::error::Error>> {
    let root = SVGBackend::new(path, (720, 520)).into_drawing_area();
    root.fill(&WHITE)?;
    let xs = padded_range(agg.iter().filter_map(|r| r.self_bleu));
    let ys = padded_range(agg.iter().filter_map(|r| r.quality(metric)));
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{metric} vs self-BLEU"), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(xs, ys)?;
    chart.configure_mesh().x_desc("self-BLEU").y_desc(metric).draw()?;
    for (i, method) in methods.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let pts: Vec<(f64, f64)> = agg
            .iter()
            .filter(|r| &r.method == method)
            .filter_map(|r| Some((r.self_bleu?, r.quality(metric)?)))
            .collect();
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 4, color.filled())))?
            .label(method.as_str())
            .legend(move |(x, y)| Circle::new((x, y), 4, color.filled()));
    }
    chart.configure_series_labels().border_style(BLACK).background_style(WHITE.mix(0.8)).draw()?;
    root.present()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::ClampMode;

    fn agg(method: &str, q: f64, sb: f64) -> SweepRecord {
        SweepRecord {
            method: method.into(),
            s: 1.0,
            tau: 0.0,
            schedule: GuidanceSchedule::Constant,
            order: CombineOrder::None,
            steps: 20,
            seed: None,
            bleu4: q,
            rouge_l: q,
            self_bleu: Some(sb),
            mean_len: 8.0,
            wall_time: 1.0,
        }
    }

    #[test]
    fn pareto() {
        let rows = vec![agg("a", 30.0, 60.0), agg("b", 25.0, 70.0), agg("c", 20.0, 40.0), agg("d", 30.0, 60.0)];
        let front: Vec<&str> = pareto_front(&rows, "bleu4").iter().map(|r| r.method.as_str()).collect();
        assert_eq!(front, vec!["c", "a", "d"]);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rows = vec![agg("baseline", 12.5, 80.0)];
        rows.push(SweepRecord { seed: Some(3), self_bleu: None, ..rows[0].clone() });
        let path = dir.path().join("s.csv");
        write_sweep_csv(&path, &rows).unwrap();
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("method,s,tau,schedule,order,steps,seed,bleu4,rouge_l,self_bleu,mean_len,wall_time\n"));
        assert_eq!(read_sweep_csv(&path).unwrap(), rows);
        let plots = write_plots(&rows, dir.path()).unwrap();
        assert_eq!(plots.len(), 2);
        assert!(std::fs::read_to_string(&plots[0]).unwrap().contains("<svg"));
    }

    #[test]
    fn grid_product() {
        let grid = SweepGrid {
            scales: vec![1.0, 2.0],
            taus: vec![0.0, 0.5],
            schedules: vec![GuidanceSchedule::Constant],
            orders: vec![CombineOrder::CfgOnly, CombineOrder::ClampOnly],
            steps: vec![20],
        };
        let pts = grid.points();
        assert_eq!(pts.len(), 8);
        assert_eq!(pts[0].clamp().unwrap().mode, ClampMode::FinalOnly);
        assert_eq!(pts[4].clamp().unwrap().mode, ClampMode::EveryStep);
        let keys: std::collections::HashSet<String> = pts.iter().map(SweepPoint::key).collect();
        assert_eq!(keys.len(), 8);
    }
}
