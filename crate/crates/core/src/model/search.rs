//! Greedy and beam decoding with an optional per-step distribution hook.

use std::cmp::Ordering;

use super::{DecodeStepOutput, EncodedSample, EncoderOutputs, Model};
use crate::corpus::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::tensor::softmax_row;

/// Rewrites the model's next-token distribution before it is scored.
pub trait StepHook {
    fn transform(
        &mut self,
        prefix: &[usize],
        step: &DecodeStepOutput,
        enc: &EncoderOutputs,
        model_probs: Vec<f64>,
    ) -> Result<Vec<f64>>;
}

fn next_distribution(
    model: &Model,
    enc: &EncoderOutputs,
    prefix: &[usize],
    hook: &mut Option<&mut dyn StepHook>,
) -> Result<Vec<f64>> {
    let step = model.decode_step(prefix, enc)?;
    let mut probs = vec![0.0; step.logits.len()];
    softmax_row(&step.logits, &mut probs);
    match hook {
        Some(h) => {
            let out = h.transform(prefix, &step, enc, probs)?;
            if out.len() != step.logits.len() {
                return Err(Error::shape("step hook", format!("{} != {}", out.len(), step.logits.len())));
            }
            Ok(out)
        }
        None => Ok(probs),
    }
}

fn selectable(token: usize) -> bool {
    token != PAD && token != BOS
}

/// Greedy decoding over an arbitrary next-token distribution. `next` gets the
/// prefix (starting with BOS). Ties go to the lowest token id.
pub fn greedy_over(max_len: usize, mut next: impl FnMut(&[usize]) -> Result<Vec<f64>>) -> Result<Vec<usize>> {
    let mut prefix = vec![BOS];
    while prefix.len() - 1 < max_len {
        let probs = next(&prefix)?;
        let mut best: Option<(usize, f64)> = None;
        for (tok, &p) in probs.iter().enumerate() {
            if selectable(tok) && best.is_none_or(|(_, bp)| p > bp) {
                best = Some((tok, p));
            }
        }
        let Some((tok, _)) = best else { break };
        if tok == EOS {
            break;
        }
        prefix.push(tok);
    }
    prefix.remove(0);
    Ok(prefix)
}

#[derive(Clone, Debug)]
struct Hyp {
    tokens: Vec<usize>,
    log_prob: f64,
    finished: bool,
}

impl Hyp {
    /// Generated length, counting EOS when present.
    fn len(&self) -> usize {
        self.tokens.len() - 1
    }

    fn score(&self) -> f64 {
        self.log_prob / self.len().max(1) as f64
    }
}

/// Higher score first, then the lower first-divergent token id.
fn rank(a: &Hyp, b: &Hyp) -> Ordering {
    b.score()
        .partial_cmp(&a.score())
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search over an arbitrary next-token distribution, scoring finished
/// hypotheses by log-probability divided by generated length (EOS included).
/// A hypothesis reaching `max_len` tokens is finished without EOS.
pub fn beam_over(
    beam: usize,
    max_len: usize,
    mut next: impl FnMut(&[usize]) -> Result<Vec<f64>>,
) -> Result<Vec<usize>> {
    if beam == 0 {
        return Err(Error::InvalidArgument("beam must be >= 1".into()));
    }
    let mut live = vec![Hyp {
        tokens: vec![BOS],
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hyp> = Vec::new();
    while !live.is_empty() && finished.len() < beam {
        let mut candidates = Vec::new();
        for hyp in &live {
            if hyp.len() >= max_len {
                finished.push(Hyp {
                    finished: true,
                    ..hyp.clone()
                });
                continue;
            }
            let probs = next(&hyp.tokens)?;
            for (tok, &p) in probs.iter().enumerate() {
                if selectable(tok) && p > 0.0 {
                    let mut tokens = hyp.tokens.clone();
                    tokens.push(tok);
                    candidates.push(Hyp {
                        tokens,
                        log_prob: hyp.log_prob + p.ln(),
                        finished: tok == EOS,
                    });
                }
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(beam);
        live.clear();
        for c in candidates {
            if c.finished {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
    }
    finished.sort_by(rank);
    let best = finished.into_iter().next().map(|h| h.tokens).unwrap_or_else(|| vec![BOS]);
    Ok(best.into_iter().skip(1).filter(|&t| t != EOS).collect())
}

pub fn greedy_decode(model: &Model, sample: &EncodedSample, max_len: usize) -> Result<Vec<usize>> {
    greedy_decode_with(model, sample, max_len, None)
}

pub fn greedy_decode_with(
    model: &Model,
    sample: &EncodedSample,
    max_len: usize,
    mut hook: Option<&mut dyn StepHook>,
) -> Result<Vec<usize>> {
    let enc = model.encode(sample)?;
    let max_len = max_len.min(model.config.max_summary_len);
    greedy_over(max_len, |prefix| next_distribution(model, &enc, prefix, &mut hook))
}

pub fn beam_search(model: &Model, sample: &EncodedSample, beam: usize, max_len: usize) -> Result<Vec<usize>> {
    beam_search_with(model, sample, beam, max_len, None)
}

pub fn beam_search_with(
    model: &Model,
    sample: &EncodedSample,
    beam: usize,
    max_len: usize,
    mut hook: Option<&mut dyn StepHook>,
) -> Result<Vec<usize>> {
    let enc = model.encode(sample)?;
    let max_len = max_len.min(model.config.max_summary_len);
    beam_over(beam, max_len, |prefix| next_distribution(model, &enc, prefix, &mut hook))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Hand-set conditional distributions over V = 6 (ids 4, 5 are words).
    fn toy(prefix: &[usize]) -> Result<Vec<f64>> {
        let words = &prefix[1..];
        let (eos, a, b) = match words {
            [] => (0.1, 0.5, 0.4),
            [4] => (0.3, 0.35, 0.35),
            [5] => (0.05, 0.05, 0.9),
            [4, _] => (0.4, 0.3, 0.3),
            [5, 5] => (0.95, 0.025, 0.025),
            _ => (0.2, 0.4, 0.4),
        };
        Ok(vec![0.0, 0.0, 0.0, eos, a, b])
    }

    fn exhaustive(max_len: usize) -> Vec<usize> {
        // Enumerate every sequence of up to max_len words, with EOS or truncation.
        let mut best: Option<Hyp> = None;
        let mut stack = vec![Hyp {
            tokens: vec![BOS],
            log_prob: 0.0,
            finished: false,
        }];
        while let Some(h) = stack.pop() {
            let cands: Vec<Hyp> = if h.len() >= max_len {
                vec![h]
            } else {
                let probs = toy(&h.tokens).unwrap();
                let mut out = Vec::new();
                for tok in [EOS, 4, 5] {
                    let mut tokens = h.tokens.clone();
                    tokens.push(tok);
                    let nh = Hyp {
                        tokens,
                        log_prob: h.log_prob + probs[tok].ln(),
                        finished: tok == EOS,
                    };
                    if tok == EOS {
                        out.push(nh);
                    } else {
                        stack.push(nh);
                    }
                }
                out
            };
            for c in cands {
                if best.as_ref().is_none_or(|b| rank(&c, b) == Ordering::Less) {
                    best = Some(c);
                }
            }
        }
        best.unwrap().tokens.into_iter().skip(1).filter(|&t| t != EOS).collect()
    }

    #[test]
    fn beam_matches_exhaustive_search() {
        let want = exhaustive(3);
        let got = beam_over(4, 3, toy).unwrap();
        assert_eq!(got, want);
        assert_eq!(got, vec![5, 5]);
    }

    #[test]
    fn beam_one_equals_greedy() {
        for max_len in 0..5 {
            assert_eq!(beam_over(1, max_len, toy).unwrap(), greedy_over(max_len, toy).unwrap());
        }
    }

    #[test]
    fn eos_first_gives_empty() {
        let eos = |_: &[usize]| Ok(vec![0.0, 0.0, 0.0, 0.9, 0.1]);
        assert!(greedy_over(10, eos).unwrap().is_empty());
        assert!(beam_over(3, 10, eos).unwrap().is_empty());
    }

    #[test]
    fn never_exceeds_max_len() {
        let never_eos = |_: &[usize]| Ok(vec![0.0, 0.0, 0.0, 0.0, 0.6, 0.4]);
        assert_eq!(greedy_over(7, never_eos).unwrap().len(), 7);
        assert_eq!(beam_over(3, 7, never_eos).unwrap().len(), 7);
    }

    #[test]
    fn greedy_ties_take_lowest_id() {
        let tie = |p: &[usize]| Ok(if p.len() > 1 { vec![0.0, 0.0, 0.0, 1.0] } else { vec![0.0, 0.0, 0.0, 0.2, 0.4, 0.4] });
        assert_eq!(greedy_over(5, tie).unwrap(), vec![4]);
        assert_eq!(beam_over(2, 5, tie).unwrap(), vec![4]);
    }

    #[test]
    fn zero_beam_rejected() {
        assert!(beam_over(0, 3, toy).is_err());
    }
}
