use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedder::{Tokenizer, Vocab};
use crate::error::{Error, Result};
use crate::metrics::HypothesisRecord;
use crate::training::TokenPair;

/// Probability that a synonym-task word takes its first (preferred) output.
pub const SYNONYM_PRIMARY_P: f64 = 0.7;

/// Abort threshold for malformed input lines.
pub const MAX_MALFORMED_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub src: String,
    pub trg: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub records: Vec<DatasetRecord>,
    pub malformed: usize,
    pub lines: usize,
}

/// Reads `{"src": .., "trg": ..}` objects, one per line. Malformed lines are
/// skipped and counted; more than 10% malformed aborts.
pub fn load_jsonl(path: &Path) -> Result<LoadReport> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut report = LoadReport::default();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        report.lines += 1;
        match serde_json::from_str::<DatasetRecord>(&line) {
            Ok(r) => report.records.push(r),
            Err(_) => report.malformed += 1,
        }
    }
    if report.lines == 0 {
        log::warn!("{} contains no records", path.display());
    }
    if report.malformed > 0 {
        log::warn!("{}: skipped {} malformed of {} lines", path.display(), report.malformed, report.lines);
    }
    if report.malformed as f64 > MAX_MALFORMED_FRACTION * report.lines as f64 {
        return Err(Error::MalformedData {
            path: path.to_path_buf(),
            bad: report.malformed,
            total: report.lines,
        });
    }
    Ok(report)
}

pub fn write_jsonl(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Special-token markers that appear in published BERT-tokenised generation
/// outputs and are removed before scoring.
const OUTPUT_MARKERS: [&str; 3] = ["[CLS]", "[SEP]", "[PAD]"];

fn strip_markers(text: &str) -> String {
    text.split_whitespace()
        .filter(|w| !OUTPUT_MARKERS.contains(w))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Reads generation outputs stored as one JSONL file per seed with
/// `{"recover", "reference", "source"}` lines (the format of the published
/// DiffuSeq QQP outputs). Line order is the condition id; file order gives
/// seeds `0..files.len()`.
pub fn load_generation_outputs(files: &[std::path::PathBuf]) -> Result<Vec<HypothesisRecord>> {
    #[derive(Deserialize)]
    struct Line {
        recover: String,
        reference: String,
    }
    let mut out = Vec::new();
    for (seed, path) in files.iter().enumerate() {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let l: Line = serde_json::from_str(line)
                .map_err(|e| Error::invalid(format!("{} line {}: {e}", path.display(), i + 1)))?;
            out.push(HypothesisRecord {
                condition_id: i.to_string(),
                seed: seed as u64,
                hypothesis: strip_markers(&l.recover),
                reference: strip_markers(&l.reference),
            });
        }
    }
    Ok(out)
}

/// Tokenises records, dropping those with an empty side or a side longer
/// than `max_len`. Returns the kept pairs and the number dropped.
pub fn encode_records<T: Tokenizer>(records: &[DatasetRecord], tokenizer: &T, max_len: usize) -> (Vec<TokenPair>, usize) {
    let mut kept = Vec::with_capacity(records.len());
    let mut dropped = 0;
    for r in records {
        let src = tokenizer.encode(&r.src);
        let trg = tokenizer.encode(&r.trg);
        if src.is_empty() || trg.is_empty() || src.len() > max_len || trg.len() > max_len {
            dropped += 1;
        } else {
            kept.push(TokenPair { src, trg });
        }
    }
    if dropped > 0 {
        log::info!("dropped {dropped} records that were empty or longer than {max_len} tokens");
    }
    (kept, dropped)
}

/// SHA-256 over the records in order; identifies an evaluation split.
pub fn split_hash(records: &[DatasetRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(r.src.as_bytes());
        h.update([0x1f]);
        h.update(r.trg.as_bytes());
        h.update([0x1e]);
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    SynonymParaphrase,
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "copy" => Ok(Self::Copy),
            "reverse" => Ok(Self::Reverse),
            "synonym_paraphrase" | "synonym" => Ok(Self::SynonymParaphrase),
            _ => Err(Error::invalid(format!("unknown task kind '{s}'"))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Copy => "copy",
            Self::Reverse => "reverse",
            Self::SynonymParaphrase => "synonym_paraphrase",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Number of content words (specials excluded).
    pub vocab_size: usize,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, vocab_size: usize, train_pairs: usize, test_pairs: usize, max_len: usize, seed: u64) -> Self {
        Self {
            kind,
            vocab_size,
            train_pairs,
            test_pairs,
            min_len: 4.min(max_len),
            max_len,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub train: Vec<DatasetRecord>,
    pub test: Vec<DatasetRecord>,
    pub vocab: Vocab,
    /// For the synonym task, the two admissible outputs of every word,
    /// preferred one first.
    pub synonyms: Option<Vec<[usize; 2]>>,
}

pub fn word(i: usize) -> String {
    format!("w{i}")
}

/// Generates a toy seq2seq task over words `w0..w{V-1}`. Source sequences
/// are distinct across the whole task, so train and test never share a
/// condition.
pub fn make_synthetic_task(spec: &TaskSpec) -> Result<SyntheticTask> {
    if spec.vocab_size < 10 {
        return Err(Error::invalid(format!("vocab_size must be >= 10, got {}", spec.vocab_size)));
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::invalid(format!("bad length range [{}, {}]", spec.min_len, spec.max_len)));
    }
    let wanted = spec.train_pairs + spec.test_pairs;
    let space: f64 = (spec.min_len..=spec.max_len)
        .map(|n| (spec.vocab_size as f64).powi(n as i32))
        .sum();
    if (wanted as f64) > 0.5 * space {
        return Err(Error::invalid(format!("{wanted} distinct sources do not fit the task's sequence space")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let v = spec.vocab_size;
    let synonyms = (spec.kind == TaskKind::SynonymParaphrase).then(|| {
        let mut perm: Vec<usize> = (0..v).collect();
        perm.shuffle(&mut rng);
        (0..v).map(|i| [perm[i], perm[(i + 1) % v]]).collect::<Vec<[usize; 2]>>()
    });
    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(wanted);
    while records.len() < wanted {
        let n = rng.gen_range(spec.min_len..=spec.max_len);
        let src: Vec<usize> = (0..n).map(|_| rng.gen_range(0..v)).collect();
        if !seen.insert(src.clone()) {
            continue;
        }
        let trg: Vec<usize> = match spec.kind {
            TaskKind::Copy => src.clone(),
            TaskKind::Reverse => src.iter().rev().copied().collect(),
            TaskKind::SynonymParaphrase => {
                let table = synonyms.as_ref().expect("synonym table");
                src.iter()
                    .map(|&w| table[w][usize::from(!rng.gen_bool(SYNONYM_PRIMARY_P))])
                    .collect()
            }
        };
        let join = |ids: &[usize]| ids.iter().map(|&i| word(i)).collect::<Vec<_>>().join(" ");
        records.push(DatasetRecord {
            src: join(&src),
            trg: join(&trg),
        });
    }
    let test = records.split_off(spec.train_pairs);
    Ok(SyntheticTask {
        train: records,
        test,
        vocab: Vocab::from_tokens((0..v).map(word)),
        synonyms,
    })
}
