//! Unigram-overlap scoring and token frequency ranking.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Lowercases and splits on runs of non-alphanumeric characters.
pub fn rouge_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPair {
    pub candidate: Vec<String>,
    pub reference: Vec<String>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

/// Clipped unigram overlap between `candidate` and `reference`.
pub fn overlap(candidate: &[String], reference: &[String]) -> usize {
    let r = counts(reference);
    counts(candidate)
        .into_iter()
        .map(|(w, c)| c.min(r.get(w).copied().unwrap_or(0)))
        .sum()
}

pub fn rouge1(candidate: &str, reference: &str) -> ScoredPair {
    let cand = rouge_tokens(candidate);
    let refr = rouge_tokens(reference);
    let (precision, recall, f1) = if cand.is_empty() || refr.is_empty() {
        (0.0, 0.0, 0.0)
    } else {
        let o = overlap(&cand, &refr) as f64;
        let p = o / cand.len() as f64;
        let r = o / refr.len() as f64;
        let f = if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        };
        (p, r, f)
    };
    ScoredPair {
        candidate: cand,
        reference: refr,
        precision,
        recall,
        f1,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusScore {
    pub count: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl CorpusScore {
    pub fn to_tsv(&self) -> String {
        format!(
            "metric\tvalue\ncount\t{}\nrouge1_precision\t{:.6}\nrouge1_recall\t{:.6}\nrouge1_f1\t{:.6}\n",
            self.count, self.precision, self.recall, self.f1
        )
    }
}

/// Means of the per-pair scores.
pub fn corpus_rouge1<C: AsRef<str>, R: AsRef<str>>(pairs: &[(C, R)]) -> Result<CorpusScore> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
    for (c, rf) in pairs {
        let s = rouge1(c.as_ref(), rf.as_ref());
        p += s.precision;
        r += s.recall;
        f += s.f1;
    }
    let n = pairs.len() as f64;
    Ok(CorpusScore {
        count: pairs.len(),
        precision: p / n,
        recall: r / n,
        f1: f / n,
    })
}

/// Whitespace tokens ranked by count, ties broken lexicographically.
pub fn token_frequency_report<S: AsRef<str>>(texts: &[S], top_n: usize) -> Vec<(String, usize)> {
    let mut m: HashMap<String, usize> = HashMap::new();
    for t in texts {
        for tok in t.as_ref().split_whitespace() {
            *m.entry(tok.to_lowercase()).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = m.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(top_n);
    ranked
}

/// Fraction of generated tokens that repeat an earlier token in the same
/// text.
pub fn repeated_unigram_rate(text: &str) -> f64 {
    let toks: Vec<&str> = text.split_whitespace().collect();
    if toks.is_empty() {
        return 0.0;
    }
    let distinct: std::collections::HashSet<&str> = toks.iter().copied().collect();
    (toks.len() - distinct.len()) as f64 / toks.len() as f64
}
