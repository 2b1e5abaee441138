//! Evaluation harnesses: corpus evaluation, low-frequency token counts,
//! fusion hyperparameter sweeps and datastore-noise experiments.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{summary_subtokens, CodeSample};
use crate::datastore::Datastore;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, SentenceIndex, Tram};
use crate::metrics::MetricReport;
use crate::model::{beam_search, greedy_decode, Model};

pub const FREQ_BINS: [usize; 6] = [1, 2, 5, 10, 50, 100];

/// How summaries are produced for evaluation.
pub enum Decoder<'a> {
    Base { beam: usize, max_len: usize },
    Tram(&'a Tram<'a>),
}

/// Decode every sample and map ids back to summary tokens.
pub fn generate_all(model: &Model, samples: &[CodeSample], decoder: &Decoder) -> Result<Vec<Vec<String>>> {
    samples
        .par_iter()
        .map(|s| {
            let enc = model.encode_sample(s);
            let ids = match decoder {
                Decoder::Base { beam: 1, max_len } => greedy_decode(model, &enc, *max_len)?,
                Decoder::Base { beam, max_len } => beam_search(model, &enc, *beam, *max_len)?,
                Decoder::Tram(tram) => tram.generate(&enc)?.tokens,
            };
            model.summary_vocab.decode(&ids)
        })
        .collect()
}

pub fn references(samples: &[CodeSample]) -> Vec<Vec<String>> {
    samples.iter().map(summary_subtokens).collect()
}

pub fn evaluate(model: &Model, samples: &[CodeSample], decoder: &Decoder) -> Result<MetricReport> {
    let hyps = generate_all(model, samples, decoder)?;
    MetricReport::compute(&hyps, &references(samples))
}

/// Occurrences of each summary token in a training split.
pub fn summary_token_frequencies(train: &[CodeSample]) -> HashMap<String, usize> {
    let mut freq = HashMap::new();
    for s in train {
        for t in summary_subtokens(s) {
            *freq.entry(t).or_insert(0) += 1;
        }
    }
    freq
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreqBinReport {
    pub bins: Vec<usize>,
    /// `(system name, count per bin)`
    pub systems: Vec<(String, Vec<usize>)>,
}

impl FreqBinReport {
    pub fn counts(&self, system: &str) -> Option<&[usize]> {
        self.systems.iter().find(|(n, _)| n == system).map(|(_, c)| c.as_slice())
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("System");
        for b in &self.bins {
            out.push_str(&format!("\t{b}"));
        }
        out.push('\n');
        for (name, counts) in &self.systems {
            out.push_str(name);
            for c in counts {
                out.push_str(&format!("\t{c}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Count correctly generated tokens (multiset intersection with the
/// reference) whose training frequency is exactly one of [`FREQ_BINS`].
pub fn token_freq_analysis(
    systems: &[(String, Vec<Vec<String>>)],
    refs: &[Vec<String>],
    train_freq: &HashMap<String, usize>,
) -> Result<FreqBinReport> {
    let mut out = Vec::with_capacity(systems.len());
    for (name, outputs) in systems {
        if outputs.len() != refs.len() {
            return Err(Error::InvalidArgument(format!(
                "system {name}: {} outputs for {} references",
                outputs.len(),
                refs.len()
            )));
        }
        let mut counts = vec![0; FREQ_BINS.len()];
        for (hyp, reference) in outputs.iter().zip(refs) {
            let mut available: HashMap<&str, usize> = HashMap::new();
            for t in reference {
                *available.entry(t.as_str()).or_insert(0) += 1;
            }
            for t in hyp {
                let Some(left) = available.get_mut(t.as_str()).filter(|n| **n > 0) else {
                    continue;
                };
                *left -= 1;
                let f = train_freq.get(t).copied().unwrap_or(0);
                if let Some(b) = FREQ_BINS.iter().position(|&x| x == f) {
                    counts[b] += 1;
                }
            }
        }
        out.push((name.clone(), counts));
    }
    Ok(FreqBinReport {
        bins: FREQ_BINS.to_vec(),
        systems: out,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub temperature: f64,
    pub bleu: f64,
    pub rouge_l: f64,
    pub meteor: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("lambda,temperature,bleu,rouge_l,meteor\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            r.lambda, r.temperature, r.bleu, r.rouge_l, r.meteor
        ));
    }
    out
}

/// Evaluate every `(λ, T)` grid point with token-level fusion.
pub fn run_sweep(
    model: &Model,
    datastore: &Datastore,
    base: &FusionConfig,
    lambdas: &[f64],
    temperatures: &[f64],
    samples: &[CodeSample],
    sentences: Option<&SentenceIndex>,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(lambdas.len() * temperatures.len());
    for &lambda in lambdas {
        for &temperature in temperatures {
            let cfg = FusionConfig {
                lambda,
                temperature,
                ..base.clone()
            };
            let tram = Tram::new(model, datastore, cfg, sentences)?;
            let report = evaluate(model, samples, &Decoder::Tram(&tram))?;
            rows.push(SweepRow {
                lambda,
                temperature,
                bleu: report.bleu,
                rouge_l: report.rouge_l,
                meteor: report.meteor,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub fraction: f64,
    /// Means over seeds.
    pub bleu: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub per_seed_bleu: Vec<f64>,
}

pub fn noise_csv(rows: &[NoiseRow]) -> String {
    let mut out = String::from("fraction,bleu,rouge_l,meteor,seeds\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{}\n",
            r.fraction,
            r.bleu,
            r.rouge_l,
            r.meteor,
            r.per_seed_bleu.len()
        ));
    }
    out
}

/// For each fraction, perturb the datastore once per seed, evaluate and average.
pub fn run_noise_experiment(
    model: &Model,
    datastore: &Datastore,
    config: &FusionConfig,
    fractions: &[f64],
    seeds: &[u64],
    samples: &[CodeSample],
    sentences: Option<&SentenceIndex>,
) -> Result<Vec<NoiseRow>> {
    if seeds.is_empty() {
        return Err(Error::Empty("noise seeds"));
    }
    let mut rows = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let mut reports = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let noisy = datastore.inject_noise(fraction, seed)?;
            let tram = Tram::new(model, &noisy, config.clone(), sentences)?;
            reports.push(evaluate(model, samples, &Decoder::Tram(&tram))?);
        }
        let n = reports.len() as f64;
        rows.push(NoiseRow {
            fraction,
            bleu: reports.iter().map(|r| r.bleu).sum::<f64>() / n,
            rouge_l: reports.iter().map(|r| r.rouge_l).sum::<f64>() / n,
            meteor: reports.iter().map(|r| r.meteor).sum::<f64>() / n,
            per_seed_bleu: reports.iter().map(|r| r.bleu).collect(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn freq(pairs: &[(&str, usize)]) -> HashMap<String, usize> {
        pairs.iter().map(|(t, f)| (t.to_string(), *f)).collect()
    }

    #[test]
    fn hand_enumerated_fixture() {
        let train = freq(&[("returns", 100), ("the", 50), ("sine", 1), ("cosine", 2), ("of", 10), ("x", 5), ("y", 3)]);
        let refs = vec![
            toks("returns the sine of x"),
            toks("returns the cosine of y"),
            toks("the the sine"),
            toks("returns x"),
            toks("cosine"),
        ];
        let a = vec![
            toks("returns the sine of x"), // 100 50 1 10 5
            toks("returns the sine of y"), // 100 50 (sine wrong) 10 (y freq 3: no bin)
            toks("the the the sine"),      // the x2 (third unmatched) sine
            toks("zzz"),                   // nothing
            toks("cosine cosine"),         // one cosine
        ];
        let report = token_freq_analysis(&[("a".into(), a)], &refs, &train).unwrap();
        // bins 1, 2, 5, 10, 50, 100
        assert_eq!(report.counts("a").unwrap(), &[2, 1, 1, 2, 4, 2]);
    }

    #[test]
    fn identical_outputs_give_reference_histogram() {
        let train = freq(&[("a", 1), ("b", 2), ("c", 7)]);
        let refs = vec![toks("a b b c"), toks("b q")];
        let report = token_freq_analysis(&[("ref".into(), refs.clone())], &refs, &train).unwrap();
        assert_eq!(report.counts("ref").unwrap(), &[1, 3, 0, 0, 0, 0]);
        assert!(report.to_table().starts_with("System\t1\t2\t5\t10\t50\t100\n"));
    }

    #[test]
    fn misaligned_outputs_rejected() {
        let refs = vec![toks("a")];
        assert!(token_freq_analysis(&[("x".into(), vec![])], &refs, &HashMap::new()).is_err());
    }
}
