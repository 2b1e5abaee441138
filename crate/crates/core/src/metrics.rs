//! BLEU, ROUGE-L and a simplified METEOR over pre-tokenized text.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Clipped n-gram counts for one or more hypothesis/reference pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [u64; MAX_ORDER],
    pub possible: [u64; MAX_ORDER],
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl BleuStats {
    pub fn of<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> Self {
        let mut stats = BleuStats {
            hyp_len: hyp.len() as u64,
            ref_len: reference.len() as u64,
            ..Default::default()
        };
        for n in 1..=MAX_ORDER {
            let ref_counts = ngram_counts(reference, n);
            let hyp_counts = ngram_counts(hyp, n);
            stats.matches[n - 1] = hyp_counts
                .iter()
                .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
                .sum();
            stats.possible[n - 1] = hyp.len().saturating_sub(n - 1) as u64;
        }
        stats
    }

    pub fn merge(&mut self, other: &BleuStats) {
        for n in 0..MAX_ORDER {
            self.matches[n] += other.matches[n];
            self.possible[n] += other.possible[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    /// Smoothed BLEU-4: unigram precision is unsmoothed (no overlap scores 0),
    /// higher orders use add-one smoothing, times the brevity penalty.
    pub fn score(&self) -> f64 {
        if self.matches[0] == 0 || self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = (self.matches[0] as f64 / self.possible[0] as f64).ln();
        for n in 1..MAX_ORDER {
            log_sum += ((self.matches[n] as f64 + 1.0) / (self.possible[n] as f64 + 1.0)).ln();
        }
        let geo = (log_sum / MAX_ORDER as f64).exp();
        let ratio = self.hyp_len as f64 / self.ref_len as f64;
        let bp = if ratio > 1.0 { 1.0 } else { (1.0 - 1.0 / ratio).exp() };
        geo * bp
    }
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

pub fn sentence_bleu<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Empty("BLEU reference"));
    }
    Ok(BleuStats::of(hyp, reference).score())
}

/// Corpus BLEU (pooled n-gram statistics) plus per-sentence scores.
pub fn bleu<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<(f64, Vec<f64>)> {
    if hyps.len() != refs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} hypotheses vs {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let mut total = BleuStats::default();
    let mut per = Vec::with_capacity(hyps.len());
    for (h, r) in hyps.iter().zip(refs) {
        if r.is_empty() {
            return Err(Error::Empty("BLEU reference"));
        }
        let s = BleuStats::of(h, r);
        per.push(s.score());
        total.merge(&s);
    }
    Ok((total.score(), per))
}

fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Balanced-F ROUGE-L.
pub fn rouge_l<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(hyp, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / hyp.len() as f64;
    let r = lcs / reference.len() as f64;
    2.0 * p * r / (p + r)
}

const MIN_STEM: usize = 4;

fn stem_match(a: &str, b: &str) -> bool {
    a.chars().zip(b.chars()).take_while(|(x, y)| x == y).count() >= MIN_STEM
}

/// METEOR restricted to exact and shared-prefix ("stem") matches, no synonyms.
pub fn meteor_simplified<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> f64 {
    let mut ref_used = vec![false; reference.len()];
    let mut hyp_to_ref: Vec<Option<usize>> = vec![None; hyp.len()];
    let stages: [fn(&str, &str) -> bool; 2] = [|a, b| a == b, stem_match];
    for matcher in stages {
        for (i, h) in hyp.iter().enumerate() {
            if hyp_to_ref[i].is_some() {
                continue;
            }
            if let Some(j) = (0..reference.len()).find(|&j| !ref_used[j] && matcher(h.as_ref(), reference[j].as_ref())) {
                ref_used[j] = true;
                hyp_to_ref[i] = Some(j);
            }
        }
    }
    let pairs: Vec<(usize, usize)> = hyp_to_ref
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| (i, j)))
        .collect();
    let m = pairs.len();
    if m == 0 {
        return 0.0;
    }
    let chunks = 1 + pairs
        .windows(2)
        .filter(|w| w[1].0 != w[0].0 + 1 || w[1].1 != w[0].1 + 1)
        .count();
    let p = m as f64 / hyp.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f_mean * (1.0 - penalty)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub bleu: f64,
    pub rouge_l: f64,
    pub meteor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu: f64,
    pub rouge_l: f64,
    /// Simplified METEOR ("METEOR-s").
    pub meteor: f64,
    pub samples: usize,
    pub per_sample: Vec<SampleScores>,
}

impl MetricReport {
    pub fn compute<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<Self> {
        let (corpus_bleu, per_bleu) = bleu(hyps, refs)?;
        let per_sample: Vec<SampleScores> = hyps
            .iter()
            .zip(refs)
            .zip(per_bleu)
            .map(|((h, r), b)| SampleScores {
                bleu: b,
                rouge_l: rouge_l(h, r),
                meteor: meteor_simplified(h, r),
            })
            .collect();
        let n = per_sample.len().max(1) as f64;
        Ok(Self {
            bleu: corpus_bleu,
            rouge_l: per_sample.iter().map(|s| s.rouge_l).sum::<f64>() / n,
            meteor: per_sample.iter().map(|s| s.meteor).sum::<f64>() / n,
            samples: per_sample.len(),
            per_sample,
        })
    }

    /// One-line summary, scores ×100.
    pub fn summary_line(&self) -> String {
        format!(
            "BLEU {:.2}  ROUGE-L {:.2}  METEOR-s {:.2}  (n={})",
            self.bleu * 100.0,
            self.rouge_l * 100.0,
            self.meteor * 100.0,
            self.samples
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identical_bleu_is_one() {
        let r = toks("returns the cosine of the value");
        assert_eq!(sentence_bleu(&r, &r).unwrap(), 1.0);
        let short = toks("a b");
        assert_eq!(sentence_bleu(&short, &short).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_bleu_is_zero() {
        assert_eq!(sentence_bleu(&toks("x y z"), &toks("a b c")).unwrap(), 0.0);
    }

    #[test]
    fn empty_reference_is_error() {
        let empty: Vec<&str> = vec![];
        assert!(sentence_bleu(&toks("a"), &empty).is_err());
    }

    #[test]
    fn retrieval_style_hypothesis_outscores_fluent_one() {
        let reference = toks("start a source file within a compilation unit .");
        let repetitive = toks("start file within a compilation unit unit .");
        let fluent = toks("start the source file within the unit .");
        let a = sentence_bleu(&repetitive, &reference).unwrap();
        let b = sentence_bleu(&fluent, &reference).unwrap();
        assert!(a > b, "{a} <= {b}");
    }

    #[test]
    fn bleu_hand_counts() {
        // hyp "a b c d", ref "a b c e": p1=3/4, p2=(2+1)/(3+1), p3=(1+1)/(2+1), p4=(0+1)/(1+1)
        let s = sentence_bleu(&toks("a b c d"), &toks("a b c e")).unwrap();
        let expected = (0.75f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
        assert!((s - expected).abs() < 1e-12);
        // brevity: hyp "a b" vs ref "a b c d": bp = exp(1 - 2)
        let s = sentence_bleu(&toks("a b"), &toks("a b c d")).unwrap();
        assert!((s - (-1f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l(&toks("a b c"), &toks("a b c")), 1.0);
        assert!((rouge_l(&toks("a b c"), &toks("a c")) - 0.8).abs() < 1e-12);
        assert_eq!(rouge_l(&toks("a b"), &toks("c d")), 0.0);
    }

    #[test]
    fn meteor_examples() {
        let r = toks("returns the sum of two values");
        let m = r.len() as f64;
        assert!((meteor_simplified(&r, &r) - (1.0 - 0.5 / m.powi(3))).abs() < 1e-12);
        assert_eq!(meteor_simplified(&toks("a b"), &toks("c d")), 0.0);
        assert!((meteor_simplified(&toks("the cat"), &toks("the dog")) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn meteor_stem_match() {
        // "computes" ~ "computed" share 7 leading chars; "cat" ~ "car" only 2
        assert!(meteor_simplified(&toks("computes"), &toks("computed")) > 0.0);
        assert_eq!(meteor_simplified(&toks("cat"), &toks("car")), 0.0);
    }

    #[test]
    fn report_is_order_invariant() {
        let hyps = vec![toks("a b c"), toks("x y"), toks("returns the sine")];
        let refs = vec![toks("a c"), toks("x y z"), toks("returns the cosine")];
        let a = MetricReport::compute(&hyps, &refs).unwrap();
        let hr: Vec<_> = hyps.iter().rev().cloned().collect();
        let rr: Vec<_> = refs.iter().rev().cloned().collect();
        let b = MetricReport::compute(&hr, &rr).unwrap();
        assert_eq!(a.bleu, b.bleu);
        assert!((a.rouge_l - b.rouge_l).abs() < 1e-12);
        assert!((a.meteor - b.meteor).abs() < 1e-12);
    }
}
