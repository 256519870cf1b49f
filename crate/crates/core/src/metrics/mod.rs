//! Quality and diversity metrics: corpus BLEU-4, ROUGE-L, leave-one-out
//! self-BLEU, and test-set aggregation across seeds.

mod bleu;
mod rouge;

pub use bleu::{bleu4, corpus_bleu, tokenize_13a, BleuScore, MAX_ORDER};
pub use rouge::{rouge_l, rouge_l_scores, RougeScore};

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean over `s` in `S` of corpus BLEU of `s` against every other member
/// as a multi-reference set. An element is never its own reference, though
/// other members equal to it are.
pub fn self_bleu<S: AsRef<str>>(set: &[S]) -> Result<f64> {
    if set.len() < 2 {
        return Err(Error::invalid(format!("self-BLEU needs at least 2 hypotheses, got {}", set.len())));
    }
    let mut total = 0.0;
    for (i, s) in set.iter().enumerate() {
        let others: Vec<&str> = set
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, o)| o.as_ref())
            .collect();
        total += corpus_bleu(&[s.as_ref()], &[others])?.score;
    }
    Ok(total / set.len() as f64)
}

/// One generated output, as read from the evaluation JSONL input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypothesisRecord {
    pub condition_id: String,
    pub seed: u64,
    pub hypothesis: String,
    pub reference: String,
}

/// Per-condition results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub condition_id: String,
    pub reference: String,
    /// Hypotheses ordered by seed.
    pub hypotheses: Vec<String>,
    pub self_bleu: Option<f64>,
    pub rouge_l_mean: f64,
    pub mean_len: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedScores {
    pub seed: u64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub mean_len: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub per_seed: Vec<SeedScores>,
    pub bleu4_mean: f64,
    pub bleu4_std: f64,
    pub rouge_l_mean: f64,
    pub rouge_l_std: f64,
    /// Mean self-BLEU over conditions; `None` with a single seed.
    pub self_bleu: Option<f64>,
    pub mean_len: f64,
    /// Filled in externally; never computed here.
    pub bertscore: Option<f64>,
    pub records: Vec<EvalRecord>,
}

/// Sample mean and standard deviation (`n - 1` denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Scores a test set generated under several seeds. Every condition must
/// have exactly one hypothesis for each seed in `seeds`.
pub fn evaluate_testset(records: &[HypothesisRecord], seeds: &[u64]) -> Result<EvalSummary> {
    if records.is_empty() {
        return Err(Error::invalid("no hypotheses to evaluate"));
    }
    let expected: BTreeSet<u64> = seeds.iter().copied().collect();
    if expected.is_empty() || expected.len() != seeds.len() {
        return Err(Error::invalid("seed list must be non-empty and distinct"));
    }
    let mut by_condition: BTreeMap<&str, BTreeMap<u64, &HypothesisRecord>> = BTreeMap::new();
    for r in records {
        if !expected.contains(&r.seed) {
            return Err(Error::invalid(format!(
                "condition {} has unexpected seed {}",
                r.condition_id, r.seed
            )));
        }
        let slot = by_condition.entry(&r.condition_id).or_default();
        if slot.insert(r.seed, r).is_some() {
            return Err(Error::invalid(format!(
                "condition {} has seed {} twice",
                r.condition_id, r.seed
            )));
        }
    }
    let mut gaps = Vec::new();
    for (cid, got) in &by_condition {
        for s in &expected {
            if !got.contains_key(s) {
                gaps.push(format!("{cid}/seed {s}"));
            }
        }
    }
    if !gaps.is_empty() {
        return Err(Error::invalid(format!("missing hypotheses: {}", gaps.join(", "))));
    }

    let mut per_seed = Vec::with_capacity(expected.len());
    for &seed in &expected {
        let mut hyps = Vec::with_capacity(by_condition.len());
        let mut refs = Vec::with_capacity(by_condition.len());
        let mut rouge_sum = 0.0;
        let mut len_sum = 0usize;
        for got in by_condition.values() {
            let r = got[&seed];
            hyps.push(r.hypothesis.as_str());
            refs.push(r.reference.as_str());
            rouge_sum += rouge_or_zero(&r.hypothesis, &r.reference)?;
            len_sum += word_count(&r.hypothesis);
        }
        let n = by_condition.len() as f64;
        per_seed.push(SeedScores {
            seed,
            bleu4: bleu4(&hyps, &refs)?,
            rouge_l: rouge_sum / n,
            mean_len: len_sum as f64 / n,
        });
    }

    let mut records_out = Vec::with_capacity(by_condition.len());
    for (cid, got) in &by_condition {
        let hyps: Vec<String> = got.values().map(|r| r.hypothesis.clone()).collect();
        let reference = got.values().next().expect("non-empty").reference.clone();
        let rouge: Vec<f64> = hyps
            .iter()
            .map(|h| rouge_or_zero(h, &reference))
            .collect::<Result<_>>()?;
        records_out.push(EvalRecord {
            condition_id: cid.to_string(),
            self_bleu: if hyps.len() >= 2 { Some(self_bleu(&hyps)?) } else { None },
            rouge_l_mean: rouge.iter().sum::<f64>() / rouge.len() as f64,
            mean_len: hyps.iter().map(|h| word_count(h)).sum::<usize>() as f64 / hyps.len() as f64,
            reference,
            hypotheses: hyps,
        });
    }

    let bleus: Vec<f64> = per_seed.iter().map(|s| s.bleu4).collect();
    let rouges: Vec<f64> = per_seed.iter().map(|s| s.rouge_l).collect();
    let lens: Vec<f64> = per_seed.iter().map(|s| s.mean_len).collect();
    let (bleu4_mean, bleu4_std) = mean_std(&bleus);
    let (rouge_l_mean, rouge_l_std) = mean_std(&rouges);
    let self_bleus: Vec<f64> = records_out.iter().filter_map(|r| r.self_bleu).collect();
    Ok(EvalSummary {
        per_seed,
        bleu4_mean,
        bleu4_std,
        rouge_l_mean,
        rouge_l_std,
        self_bleu: (!self_bleus.is_empty()).then(|| mean_std(&self_bleus).0),
        mean_len: mean_std(&lens).0,
        bertscore: None,
        records: records_out,
    })
}

/// Empty generations score 0 rather than aborting the whole evaluation.
fn rouge_or_zero(hyp: &str, reference: &str) -> Result<f64> {
    if hyp.trim().is_empty() {
        return Ok(0.0);
    }
    rouge_l(hyp, reference)
}

/// Reads `{condition_id, seed, hypothesis, reference}` objects, one per line.
/// `condition_id` may be a string or an integer.
pub fn read_hypotheses(path: &Path) -> Result<Vec<HypothesisRecord>> {
    #[derive(Deserialize)]
    struct Raw {
        condition_id: serde_json::Value,
        seed: u64,
        hypothesis: String,
        reference: String,
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: Raw = serde_json::from_str(&line)
            .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
        let condition_id = match raw.condition_id {
            serde_json::Value::String(s) => s,
            other => other.to_string(),
        };
        out.push(HypothesisRecord {
            condition_id,
            seed: raw.seed,
            hypothesis: raw.hypothesis,
            reference: raw.reference,
        });
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Writes the summary (one row per seed plus `mean` and `std` rows) and the
/// per-condition table.
pub fn write_eval_csvs(summary: &EvalSummary, summary_path: &Path, per_condition_path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(summary_path)?;
    w.write_record(["row", "seed", "bleu4", "rouge_l", "self_bleu", "mean_len", "bertscore"])?;
    for s in &summary.per_seed {
        w.write_record([
            "seed".to_string(),
            s.seed.to_string(),
            format!("{:.6}", s.bleu4),
            format!("{:.6}", s.rouge_l),
            String::new(),
            format!("{:.4}", s.mean_len),
            String::new(),
        ])?;
    }
    w.write_record([
        "mean".to_string(),
        String::new(),
        format!("{:.6}", summary.bleu4_mean),
        format!("{:.6}", summary.rouge_l_mean),
        fmt_opt(summary.self_bleu),
        format!("{:.4}", summary.mean_len),
        fmt_opt(summary.bertscore),
    ])?;
    w.write_record([
        "std".to_string(),
        String::new(),
        format!("{:.6}", summary.bleu4_std),
        format!("{:.6}", summary.rouge_l_std),
        String::new(),
        String::new(),
        String::new(),
    ])?;
    w.flush().map_err(|e| Error::io(summary_path, e))?;

    let mut w = csv::Writer::from_path(per_condition_path)?;
    w.write_record(["condition_id", "n_hypotheses", "self_bleu", "rouge_l_mean", "mean_len", "reference"])?;
    for r in &summary.records {
        w.write_record([
            r.condition_id.clone(),
            r.hypotheses.len().to_string(),
            fmt_opt(r.self_bleu),
            format!("{:.6}", r.rouge_l_mean),
            format!("{:.4}", r.mean_len),
            r.reference.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(per_condition_path, e))?;
    Ok(())
}
