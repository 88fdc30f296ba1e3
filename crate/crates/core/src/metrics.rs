//! Sentence-level BLEU-4 and ROUGE-L.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::data::TaskMode;
use crate::error::{Error, Result};

/// Stand-in for zero n-gram matches.
pub const BLEU_EPSILON: f64 = 1e-9;
pub const ROUGE_BETA: f64 = 1.2;

fn ngram_counts<W: Eq + Hash>(tokens: &[W], n: usize) -> HashMap<&[W], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// `(clipped matches, candidate n-gram total)` for order `n`.
pub fn modified_precision<W: Eq + Hash>(candidate: &[W], reference: &[W], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let total = cand.values().sum();
    let clipped = cand
        .iter()
        .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    (clipped, total)
}

/// `exp(1 − r/c)` when the candidate is shorter than the reference, else 1.
pub fn brevity_penalty(candidate_len: usize, reference_len: usize) -> f64 {
    if candidate_len == 0 {
        0.0
    } else if candidate_len < reference_len {
        (1.0 - reference_len as f64 / candidate_len as f64).exp()
    } else {
        1.0
    }
}

/// Sentence BLEU with uniform weights over orders `1..=min(4, |c|, |r|)`.
///
/// Zero match counts are replaced by [`BLEU_EPSILON`].
pub fn bleu4<W: Eq + Hash>(candidate: &[W], reference: &[W]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::contract("bleu4: empty reference"));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let max_n = 4.min(candidate.len()).min(reference.len());
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (clipped, total) = modified_precision(candidate, reference, n);
        let matched = if clipped == 0 { BLEU_EPSILON } else { clipped as f64 };
        log_sum += (matched / total as f64).ln();
    }
    let score = brevity_penalty(candidate.len(), reference.len()) * (log_sum / max_n as f64).exp();
    Ok(score.clamp(0.0, 1.0))
}

/// Longest common subsequence length by dynamic programming.
pub fn lcs_len<W: Eq>(a: &[W], b: &[W]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure with recall weighted by [`ROUGE_BETA`].
pub fn rouge_l<W: Eq>(candidate: &[W], reference: &[W]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::contract("rouge_l: empty reference"));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return Ok(0.0);
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    Ok((1.0 + b2) * p * r / (r + b2 * p))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Bleu4,
    RougeL,
}

impl Metric {
    /// BLEU-4 for question generation, ROUGE-L for answering.
    pub fn for_mode(mode: TaskMode) -> Self {
        match mode {
            TaskMode::Qg => Metric::Bleu4,
            TaskMode::Qa => Metric::RougeL,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Bleu4 => "bleu4",
            Metric::RougeL => "rouge_l",
        }
    }

    pub fn score<W: Eq + Hash>(self, candidate: &[W], reference: &[W]) -> Result<f64> {
        match self {
            Metric::Bleu4 => bleu4(candidate, reference),
            Metric::RougeL => rouge_l(candidate, reference),
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bleu4" | "bleu" | "bleu-4" => Ok(Metric::Bleu4),
            "rouge_l" | "rouge-l" | "rougel" | "rouge" => Ok(Metric::RougeL),
            other => Err(Error::contract(format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub id: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub mean: f64,
    pub per_example: Vec<ExampleScore>,
}

/// Mean sentence score over `(id, candidate, reference)` triples.
pub fn corpus_metric<W: Eq + Hash, S: AsRef<str>>(
    pairs: &[(S, Vec<W>, Vec<W>)],
    metric: Metric,
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::contract("corpus_metric: no pairs"));
    }
    let per_example = pairs
        .iter()
        .map(|(id, c, r)| {
            Ok(ExampleScore {
                id: id.as_ref().to_string(),
                score: metric.score(c, r)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = per_example.iter().map(|e| e.score).sum::<f64>() / per_example.len() as f64;
    Ok(MetricReport {
        metric: metric.name().to_string(),
        mean,
        per_example,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        for s in ["a", "a b", "the cat sat on the mat"] {
            assert!((bleu4(&w(s), &w(s)).unwrap() - 1.0).abs() < 1e-12);
        }
        assert!(bleu4(&w("x y z w"), &w("a b c d")).unwrap() < 1e-8);
        assert_eq!(bleu4(&w(""), &w("a")).unwrap(), 0.0);
        assert!(bleu4(&w("a"), &w("")).is_err());
    }

    #[test]
    fn clipped_unigram_precision() {
        let (m, t) = modified_precision(&w("the the the the the the the"), &w("the cat is on the mat"), 1);
        assert_eq!((m, t), (2, 7));
    }

    #[test]
    fn bleu_hand_value() {
        // p1 = 3/4, p2 = 1/3, no brevity penalty
        let got = bleu4(&w("a b c a"), &w("a b d c")).unwrap();
        let p1: f64 = 0.75;
        let p2: f64 = 1.0 / 3.0;
        let p3: f64 = BLEU_EPSILON / 2.0;
        let p4: f64 = BLEU_EPSILON / 1.0;
        let want = ((p1.ln() + p2.ln() + p3.ln() + p4.ln()) / 4.0).exp();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn brevity() {
        assert_eq!(brevity_penalty(7, 6), 1.0);
        assert!((brevity_penalty(3, 6) - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn rouge_examples() {
        let got = rouge_l(&w("a b c d"), &w("a c d")).unwrap();
        let want = (1.0 + 1.44) * 0.75 / (1.0 + 1.44 * 0.75);
        assert!((got - want).abs() < 1e-12);
        assert!((got - 1.83 / 2.08).abs() < 1e-12);
        assert_eq!(rouge_l(&w("a b"), &w("a b")).unwrap(), 1.0);
        assert_eq!(rouge_l(&w("x"), &w("a b")).unwrap(), 0.0);
        assert!(rouge_l(&w("x"), &w("")).is_err());
    }

    #[test]
    fn corpus_mean() {
        let pairs = vec![("1", w("a b"), w("a b")), ("2", w("x"), w("a b"))];
        let r = corpus_metric(&pairs, Metric::RougeL).unwrap();
        assert_eq!(r.mean, 0.5);
        assert_eq!(r.metric, "rouge_l");
        let empty: Vec<(&str, Vec<&str>, Vec<&str>)> = vec![];
        assert!(corpus_metric(&empty, Metric::Bleu4).is_err());
    }
}
