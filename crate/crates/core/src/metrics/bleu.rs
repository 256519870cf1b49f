//! Corpus BLEU with signature `case:lc|eff:no|tok:13a|smooth:exp`, following
//! sacrebleu 2.x arithmetic exactly (including its `log(0)` sentinel).

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

struct Rules {
    symbols: Regex,
    period_comma_after: Regex,
    period_comma_before: Regex,
    dash_after_digit: Regex,
}

fn rules() -> &'static Rules {
    static RULES: OnceLock<Rules> = OnceLock::new();
    RULES.get_or_init(|| Rules {
        symbols: Regex::new(r"([\{-~\[-` -&\(-\+:-@/])").expect("valid regex"),
        period_comma_after: Regex::new(r"([^0-9])([\.,])").expect("valid regex"),
        period_comma_before: Regex::new(r"([\.,])([^0-9])").expect("valid regex"),
        dash_after_digit: Regex::new(r"([0-9])(-)").expect("valid regex"),
    })
}

/// The `13a` tokenizer (mteval-v13a): unescapes a few entities, splits off
/// punctuation and symbols, and collapses whitespace.
pub fn tokenize_13a(line: &str) -> String {
    let mut line = line.replace("<skipped>", "").replace("-\n", "").replace('\n', " ");
    if line.contains('&') {
        line = line
            .replace("&quot;", "\"")
            .replace("&amp;", "&")
            .replace("&lt;", "<")
            .replace("&gt;", ">");
    }
    let r = rules();
    let line = format!(" {line} ");
    let line = r.symbols.replace_all(&line, " ${1} ");
    let line = r.period_comma_after.replace_all(&line, "${1} ${2} ");
    let line = r.period_comma_before.replace_all(&line, " ${1} ${2}");
    let line = r.dash_after_digit.replace_all(&line, "${1} ${2} ");
    line.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn preprocess(sentence: &str) -> Vec<String> {
    tokenize_13a(sentence.to_lowercase().trim_end())
        .split(' ')
        .filter(|w| !w.is_empty())
        .map(str::to_owned)
        .collect()
}

fn ngram_counts(words: &[String]) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for n in 1..=MAX_ORDER {
        for gram in words.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Sufficient statistics and the resulting score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub score: f64,
    pub correct: [usize; MAX_ORDER],
    pub total: [usize; MAX_ORDER],
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub sys_len: usize,
    pub ref_len: usize,
}

/// Reference length closest to the hypothesis length; ties go to the shorter.
fn closest_ref_len(hyp_len: usize, ref_lens: &[usize]) -> usize {
    let mut best: Option<(usize, usize)> = None;
    for &r in ref_lens {
        let diff = hyp_len.abs_diff(r);
        best = match best {
            None => Some((diff, r)),
            Some((d, l)) if diff < d || (diff == d && r < l) => Some((diff, r)),
            keep => keep,
        };
    }
    best.map_or(0, |(_, l)| l)
}

fn my_log(x: f64) -> f64 {
    if x == 0.0 {
        -9_999_999_999.0
    } else {
        x.ln()
    }
}

fn compute(correct: [usize; MAX_ORDER], total: [usize; MAX_ORDER], sys_len: usize, ref_len: usize) -> BleuScore {
    let mut precisions = [0.0; MAX_ORDER];
    let bp = if sys_len < ref_len {
        if sys_len > 0 {
            (1.0 - ref_len as f64 / sys_len as f64).exp()
        } else {
            0.0
        }
    } else {
        1.0
    };
    let mut out = BleuScore {
        score: 0.0,
        correct,
        total,
        precisions,
        brevity_penalty: bp,
        sys_len,
        ref_len,
    };
    if correct[0] == 0 {
        return out;
    }
    let mut smooth = 1.0;
    for n in 0..MAX_ORDER {
        if total[n] == 0 {
            break;
        }
        if correct[n] == 0 {
            smooth *= 2.0;
            precisions[n] = 100.0 / (smooth * total[n] as f64);
        } else {
            precisions[n] = 100.0 * correct[n] as f64 / total[n] as f64;
        }
    }
    let log_sum: f64 = precisions.iter().map(|&p| my_log(p)).sum();
    out.score = bp * (log_sum / MAX_ORDER as f64).exp();
    out.precisions = precisions;
    out
}

/// Corpus BLEU; `references[i]` holds every reference for `hypotheses[i]`.
pub fn corpus_bleu<H, R>(hypotheses: &[H], references: &[Vec<R>]) -> Result<BleuScore>
where
    H: AsRef<str>,
    R: AsRef<str>,
{
    if hypotheses.is_empty() {
        return Err(Error::invalid("BLEU needs a non-empty corpus"));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::invalid(format!(
            "{} hypotheses but {} reference sets",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut correct = [0usize; MAX_ORDER];
    let mut total = [0usize; MAX_ORDER];
    let (mut sys_len, mut ref_len) = (0usize, 0usize);
    for (hyp, refs) in hypotheses.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::invalid("every hypothesis needs at least one reference"));
        }
        let hyp_words = preprocess(hyp.as_ref());
        let ref_words: Vec<Vec<String>> = refs.iter().map(|r| preprocess(r.as_ref())).collect();
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for words in &ref_words {
            for (gram, c) in ngram_counts(words) {
                let slot = max_ref.entry(gram).or_insert(0);
                *slot = (*slot).max(c);
            }
        }
        let lens: Vec<usize> = ref_words.iter().map(Vec::len).collect();
        sys_len += hyp_words.len();
        ref_len += closest_ref_len(hyp_words.len(), &lens);
        for (gram, c) in ngram_counts(&hyp_words) {
            let n = gram.len() - 1;
            correct[n] += c.min(max_ref.get(gram).copied().unwrap_or(0));
        }
        for (n, slot) in total.iter_mut().enumerate() {
            *slot += hyp_words.len().saturating_sub(n);
        }
    }
    Ok(compute(correct, total, sys_len, ref_len))
}

/// Single-reference corpus BLEU-4 in `[0, 100]`.
pub fn bleu4<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<f64> {
    let refs: Vec<Vec<&str>> = references.iter().map(|r| vec![r.as_ref()]).collect();
    Ok(corpus_bleu(hypotheses, &refs)?.score)
}
