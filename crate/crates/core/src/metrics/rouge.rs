//! ROUGE-L as computed by the `rouge` Python package (pltrdy, 1.0.x) with
//! its defaults: sentences split on `.`, whitespace words, union-LCS at the
//! summary level over sets of distinct words, and `F = 2PR / (P + R + 1e-8)`.

use std::collections::HashSet;

use crate::error::{Error, Result};

fn sentences(text: &str) -> Vec<String> {
    text.split('.')
        .filter(|s| !s.is_empty())
        .map(|s| s.split_whitespace().collect::<Vec<_>>().join(" "))
        .collect()
}

fn words(sentences: &[String]) -> Vec<&str> {
    sentences.iter().flat_map(|s| s.split(' ')).collect()
}

/// Tokens of one longest common subsequence of `x` (reference) and `y`
/// (hypothesis), reconstructed with the package's tie-breaking.
fn recon_lcs<'a>(x: &[&'a str], y: &[&str]) -> Vec<&'a str> {
    let (n, m) = (x.len(), y.len());
    let mut table = vec![vec![0usize; m + 1]; n + 1];
    for i in 1..=n {
        for j in 1..=m {
            table[i][j] = if x[i - 1] == y[j - 1] {
                table[i - 1][j - 1] + 1
            } else {
                table[i - 1][j].max(table[i][j - 1])
            };
        }
    }
    let mut out = Vec::new();
    let (mut i, mut j) = (n, m);
    while i > 0 && j > 0 {
        if x[i - 1] == y[j - 1] {
            out.push(x[i - 1]);
            i -= 1;
            j -= 1;
        } else if table[i - 1][j] > table[i][j - 1] {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    out.reverse();
    out
}

/// Precision, recall and F of ROUGE-L, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RougeScore {
    pub f: f64,
    pub p: f64,
    pub r: f64,
}

pub fn rouge_l_scores(hypothesis: &str, reference: &str) -> Result<RougeScore> {
    if hypothesis.trim().is_empty() || reference.trim().is_empty() {
        return Err(Error::invalid("ROUGE-L needs non-empty hypothesis and reference"));
    }
    let hyp = sentences(hypothesis);
    let refs = sentences(reference);
    if hyp.is_empty() || refs.is_empty() {
        return Err(Error::invalid("ROUGE-L needs at least one sentence on each side"));
    }
    let m = words(&refs).into_iter().collect::<HashSet<_>>().len() as f64;
    let n = words(&hyp).into_iter().collect::<HashSet<_>>().len() as f64;
    let mut union: HashSet<&str> = HashSet::new();
    for r in &refs {
        let ref_words: Vec<&str> = r.split(' ').collect();
        for h in &hyp {
            let hyp_words: Vec<&str> = h.split(' ').collect();
            union.extend(recon_lcs(&ref_words, &hyp_words));
        }
    }
    let llcs = union.len() as f64;
    let r = llcs / m;
    let p = llcs / n;
    let f = 2.0 * ((p * r) / (p + r + 1e-8));
    Ok(RougeScore { f, p, r })
}

/// ROUGE-L F-score in `[0, 100]`.
pub fn rouge_l(hypothesis: &str, reference: &str) -> Result<f64> {
    Ok(100.0 * rouge_l_scores(hypothesis, reference)?.f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_lcs() {
        let s = rouge_l_scores("a b c d", "a x c y").unwrap();
        assert_eq!((s.p, s.r), (0.5, 0.5));
        assert!((rouge_l("a b c d", "a x c y").unwrap() - 50.0).abs() < 1e-5);
    }

    #[test]
    fn identical_and_disjoint() {
        assert!((rouge_l("the cat sat", "the cat sat").unwrap() - 100.0).abs() < 1e-5);
        assert_eq!(rouge_l("a b", "c d").unwrap(), 0.0);
        assert!(rouge_l("", "a").is_err());
        assert!(rouge_l("a", "  ").is_err());
    }

    #[test]
    fn repeated_words_count_once() {
        // distinct-word sets: hyp {a, b}, ref {a}; LCS words {a}
        let s = rouge_l_scores("a a b", "a a").unwrap();
        assert_eq!((s.p, s.r), (0.5, 1.0));
    }

    #[test]
    fn sentences_split_on_periods() {
        // LCS union over sentence pairs: {a, b} from the first, {c} from the second
        let s = rouge_l_scores("a b. c d", "a b c").unwrap();
        assert_eq!(s.r, 1.0);
        assert_eq!(s.p, 0.75);
        // ties move along the hypothesis first
        assert_eq!(recon_lcs(&["a", "b", "c"], &["b", "a", "c"]), vec!["b", "c"]);
    }
}
