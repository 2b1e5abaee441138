//! Retrieval distributions, distribution fusion and retrieval-augmented
//! decoding.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::EOS;
use crate::datastore::{step_key, Datastore, KeyMode, RetrievalTriple, Similarity};
use crate::error::{Error, Result};
use crate::model::{beam_search_with, greedy_decode_with, DecodeStepOutput, EncodedSample, EncoderOutputs, Model, StepHook};
use crate::tensor::softmax_row;

/// `P_r(v) ∝ Σ_{i: v_i = v} exp(α_i · T)` over a vocabulary of `vocab_size`.
pub fn retrieval_distribution(triples: &[RetrievalTriple], temperature: f64, vocab_size: usize) -> Result<Vec<f64>> {
    if triples.is_empty() {
        return Err(Error::Empty("retrieved triples"));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature {temperature} must be positive")));
    }
    let max = triples.iter().map(|t| t.similarity * temperature).fold(f64::NEG_INFINITY, f64::max);
    let mut p = vec![0.0; vocab_size];
    let mut total = 0.0;
    for t in triples {
        if t.value >= vocab_size {
            return Err(Error::IdOutOfRange {
                id: t.value,
                size: vocab_size,
            });
        }
        let w = (t.similarity * temperature - max).exp();
        p[t.value] += w;
        total += w;
    }
    for v in &mut p {
        *v /= total;
    }
    Ok(p)
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape("fuse", format!("{} != {}", a.len(), b.len())));
    }
    Ok(())
}

/// `λ·P_r + (1−λ)·P_m`, exact at both endpoints.
pub fn fuse_two(p_m: &[f64], p_r: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_pair(p_m, p_r)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
    }
    if lambda == 0.0 {
        return Ok(p_m.to_vec());
    }
    if lambda == 1.0 {
        return Ok(p_r.to_vec());
    }
    Ok(p_m.iter().zip(p_r).map(|(m, r)| lambda * r + (1.0 - lambda) * m).collect())
}

/// Component weights `(w_m, w_r, w_s)` of the renormalized three-way mixture.
pub fn three_way_weights(sim: f64, lambda1: f64, lambda2: f64) -> Result<(f64, f64, f64)> {
    if lambda1 < 0.0 || lambda2 < 0.0 || lambda1 + lambda2 > 1.0 + 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "need lambda1, lambda2 >= 0 and lambda1 + lambda2 <= 1 (got {lambda1}, {lambda2})"
        )));
    }
    let sim = sim.clamp(0.0, 1.0);
    let w_m = (1.0 - lambda1 - lambda2).max(0.0);
    let w_r = lambda1;
    let w_s = lambda2 * sim;
    let z = w_m + w_r + w_s;
    if z <= 0.0 {
        return Err(Error::InvalidArgument("all fusion weights vanish".into()));
    }
    Ok((w_m / z, w_r / z, w_s / z))
}

/// `λ1·P_r + λ2·Sim·P_s + (1−λ1−λ2)·P_m`, renormalized to sum to one.
pub fn fuse_three(p_m: &[f64], p_r: &[f64], p_s: &[f64], sim: f64, lambda1: f64, lambda2: f64) -> Result<Vec<f64>> {
    check_pair(p_m, p_r)?;
    check_pair(p_m, p_s)?;
    let (w_m, w_r, w_s) = three_way_weights(sim, lambda1, lambda2)?;
    Ok(p_m
        .iter()
        .zip(p_r)
        .zip(p_s)
        .map(|((m, r), s)| w_m * m + w_r * r + w_s * s)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionMode {
    #[serde(rename = "token")]
    Token,
    #[serde(rename = "token+sentence")]
    TokenSentence,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token" => Ok(FusionMode::Token),
            "token+sentence" => Ok(FusionMode::TokenSentence),
            _ => Err(Error::InvalidArgument(format!("unknown fusion mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionMode::Token => "token",
            FusionMode::TokenSentence => "token+sentence",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub lambda: f64,
    pub temperature: f64,
    pub top_k: usize,
    pub mode: FusionMode,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Use the decoder state alone as the retrieval key.
    pub no_hr: bool,
    /// Datastore scoring; cosine unless replicating the squared-L2 comparison.
    pub similarity: Similarity,
    /// 1 = greedy.
    pub beam: usize,
    pub max_len: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            temperature: 10.0,
            top_k: 16,
            mode: FusionMode::Token,
            lambda1: 0.4,
            lambda2: 0.2,
            no_hr: false,
            similarity: Similarity::Cosine,
            beam: 4,
            max_len: 30,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument("temperature must be positive".into()));
        }
        if self.top_k == 0 || self.beam == 0 {
            return Err(Error::InvalidArgument("top_k and beam must be >= 1".into()));
        }
        three_way_weights(1.0, self.lambda1, self.lambda2)?;
        Ok(())
    }

    pub fn key_mode(&self) -> KeyMode {
        if self.no_hr {
            KeyMode::DecoderOnly
        } else {
            KeyMode::Full
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentenceRetrievalResult {
    /// Index into the retrieval corpus.
    pub index: usize,
    /// Cosine similarity clamped to `[0, 1]`.
    pub sim: f64,
    pub raw_sim: f64,
}

/// Pooled code embeddings of a retrieval corpus.
#[derive(Clone, Debug)]
pub struct SentenceIndex {
    samples: Vec<EncodedSample>,
    embeddings: Vec<Vec<f64>>,
}

impl SentenceIndex {
    pub fn build(model: &Model, corpus: &[EncodedSample]) -> Result<Self> {
        use rayon::prelude::*;
        let embeddings = corpus
            .par_iter()
            .map(|s| model.code_embedding(s))
            .collect::<Result<_>>()?;
        Ok(Self {
            samples: corpus.to_vec(),
            embeddings,
        })
    }

    /// Index over precomputed unit embeddings.
    pub fn from_parts(samples: Vec<EncodedSample>, embeddings: Vec<Vec<f64>>) -> Result<Self> {
        if samples.len() != embeddings.len() {
            return Err(Error::shape("sentence index", format!("{} != {}", samples.len(), embeddings.len())));
        }
        Ok(Self { samples, embeddings })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, i: usize) -> &EncodedSample {
        &self.samples[i]
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        &self.embeddings[i]
    }

    /// Most similar entry by cosine, skipping entries whose id equals
    /// `query_id`; ties go to the earlier entry.
    pub fn retrieve(&self, query_id: &str, embedding: &[f64]) -> Result<SentenceRetrievalResult> {
        let mut best: Option<(usize, f64)> = None;
        for (i, (s, e)) in self.samples.iter().zip(&self.embeddings).enumerate() {
            if s.id == query_id {
                continue;
            }
            let sim: f64 = e.iter().zip(embedding).map(|(a, b)| a * b).sum();
            if best.is_none_or(|(_, b)| sim > b) {
                best = Some((i, sim));
            }
        }
        let (index, raw_sim) = best.ok_or(Error::Empty("sentence retrieval corpus (excluding the query)"))?;
        Ok(SentenceRetrievalResult {
            index,
            sim: raw_sim.clamp(0.0, 1.0),
            raw_sim,
        })
    }
}

/// One generation step of the retrieval trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub chosen: String,
    /// Distinct retrieved tokens with their retrieval probability, highest first.
    pub retrieved: Vec<(String, f64)>,
    pub model_mass: f64,
    pub retrieval_mass: f64,
    /// Value of the nearest datastore entry.
    #[serde(skip)]
    pub nearest: usize,
    #[serde(skip)]
    pub chosen_id: usize,
}

impl TraceStep {
    /// `"tok" (0.90), "tok2" (0.04)`
    pub fn display_retrieved(&self) -> String {
        self.retrieved
            .iter()
            .map(|(t, p)| format!("\"{t}\" ({p:.2})"))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub tokens: Vec<usize>,
    pub trace: Vec<TraceStep>,
    pub sentence: Option<SentenceRetrievalResult>,
}

struct StepRecord {
    p_m: Vec<f64>,
    p_r: Vec<f64>,
    nearest: usize,
    weights: (f64, f64),
}

struct TramHook<'a> {
    model: &'a Model,
    datastore: &'a Datastore,
    config: &'a FusionConfig,
    key_mode: KeyMode,
    similar: Option<(EncoderOutputs, f64)>,
    records: HashMap<Vec<usize>, StepRecord>,
}

impl StepHook for TramHook<'_> {
    fn transform(
        &mut self,
        prefix: &[usize],
        step: &DecodeStepOutput,
        enc: &EncoderOutputs,
        p_m: Vec<f64>,
    ) -> Result<Vec<f64>> {
        let key = step_key(self.key_mode, step, enc)?;
        let triples = self.datastore.query_topk_with(&key, self.config.top_k, self.config.similarity)?;
        let p_r = retrieval_distribution(&triples, self.config.temperature, p_m.len())?;
        let (fused, weights) = match (&self.similar, self.config.mode) {
            (Some((sim_enc, sim)), FusionMode::TokenSentence) => {
                let s_step = self.model.decode_step(prefix, sim_enc)?;
                let mut p_s = vec![0.0; s_step.logits.len()];
                softmax_row(&s_step.logits, &mut p_s);
                let (w_m, w_r, _) = three_way_weights(*sim, self.config.lambda1, self.config.lambda2)?;
                (fuse_three(&p_m, &p_r, &p_s, *sim, self.config.lambda1, self.config.lambda2)?, (w_m, w_r))
            }
            _ => {
                let l = self.config.lambda;
                (fuse_two(&p_m, &p_r, l)?, (1.0 - l, l))
            }
        };
        self.records.insert(
            prefix.to_vec(),
            StepRecord {
                p_m,
                p_r,
                nearest: triples[0].value,
                weights,
            },
        );
        Ok(fused)
    }
}

/// Retrieval-augmented generator over a trained model and its datastore.
pub struct Tram<'a> {
    model: &'a Model,
    datastore: &'a Datastore,
    config: FusionConfig,
    sentences: Option<&'a SentenceIndex>,
}

impl<'a> Tram<'a> {
    pub fn new(
        model: &'a Model,
        datastore: &'a Datastore,
        config: FusionConfig,
        sentences: Option<&'a SentenceIndex>,
    ) -> Result<Self> {
        config.validate()?;
        let expected = config.key_mode().key_dim(model.d_model());
        if datastore.dim() != expected {
            return Err(Error::DimensionMismatch {
                datastore: datastore.dim(),
                model: expected,
            });
        }
        if datastore.is_empty() {
            return Err(Error::Empty("datastore"));
        }
        if config.mode == FusionMode::TokenSentence && sentences.is_none_or(SentenceIndex::is_empty) {
            return Err(Error::InvalidArgument("token+sentence mode needs a retrieval corpus".into()));
        }
        Ok(Self {
            model,
            datastore,
            config,
            sentences,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn generate(&self, sample: &EncodedSample) -> Result<Generation> {
        let model = self.model;
        let mut sentence = None;
        let similar = match (self.config.mode, self.sentences) {
            (FusionMode::TokenSentence, Some(index)) => {
                let found = index.retrieve(&sample.id, &model.code_embedding(sample)?)?;
                let enc = model.encode(index.sample(found.index))?;
                let sim = found.sim;
                sentence = Some(found);
                Some((enc, sim))
            }
            _ => None,
        };
        let mut hook = TramHook {
            model,
            datastore: self.datastore,
            config: &self.config,
            key_mode: self.config.key_mode(),
            similar,
            records: HashMap::new(),
        };
        let max_len = self.config.max_len;
        let tokens = if self.config.beam == 1 {
            greedy_decode_with(model, sample, max_len, Some(&mut hook))?
        } else {
            beam_search_with(model, sample, self.config.beam, max_len, Some(&mut hook))?
        };
        let trace = self.trace_for(&tokens, &hook.records)?;
        Ok(Generation { tokens, trace, sentence })
    }

    fn trace_for(&self, tokens: &[usize], records: &HashMap<Vec<usize>, StepRecord>) -> Result<Vec<TraceStep>> {
        let vocab = &self.model.summary_vocab;
        let ended_with_eos = tokens.len() < self.config.max_len.min(self.model.config.max_summary_len);
        let mut chosen: Vec<usize> = tokens.to_vec();
        if ended_with_eos {
            chosen.push(EOS);
        }
        let mut prefix = vec![crate::corpus::BOS];
        let mut trace = Vec::with_capacity(chosen.len());
        for (step, &tok) in chosen.iter().enumerate() {
            let Some(rec) = records.get(&prefix) else {
                break;
            };
            let mut retrieved: Vec<(usize, f64)> =
                rec.p_r.iter().enumerate().filter(|(_, &p)| p > 0.0).map(|(i, &p)| (i, p)).collect();
            retrieved.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
            trace.push(TraceStep {
                step: step + 1,
                chosen: vocab.token(tok)?.to_string(),
                retrieved: retrieved
                    .into_iter()
                    .map(|(i, p)| Ok((vocab.token(i)?.to_string(), p)))
                    .collect::<Result<_>>()?,
                model_mass: rec.weights.0 * rec.p_m[tok],
                retrieval_mass: rec.weights.1 * rec.p_r[tok],
                nearest: rec.nearest,
                chosen_id: tok,
            });
            prefix.push(tok);
        }
        Ok(trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triple(value: usize, similarity: f64) -> RetrievalTriple {
        RetrievalTriple {
            index: 0,
            value,
            similarity,
        }
    }

    #[test]
    fn retrieval_distribution_examples() {
        let p = retrieval_distribution(&[triple(4, 0.9)], 10.0, 6).unwrap();
        assert_eq!(p[4], 1.0);
        let p = retrieval_distribution(&[triple(4, 0.9), triple(5, 0.8), triple(4, 0.7)], 10.0, 6).unwrap();
        let e = |x: f64| x.exp();
        let want = (e(9.0) + e(7.0)) / (e(9.0) + e(8.0) + e(7.0));
        assert!((p[4] - want).abs() < 1e-12);
        assert!((p[4] - 0.7553).abs() < 1e-4);
        assert!((p[5] - 0.2447).abs() < 1e-4);
        let p = retrieval_distribution(&[triple(3, 0.9), triple(3, -0.4)], 10.0, 6).unwrap();
        assert_eq!(p[3], 1.0);
        assert!(retrieval_distribution(&[], 10.0, 6).is_err());
        assert!(retrieval_distribution(&[triple(4, 0.1)], 0.0, 6).is_err());
    }

    #[test]
    fn fuse_two_examples() {
        let pm = [0.8, 0.2];
        let pr = [0.0, 1.0];
        assert_eq!(fuse_two(&pm, &pr, 0.0).unwrap(), pm.to_vec());
        assert_eq!(fuse_two(&pm, &pr, 1.0).unwrap(), pr.to_vec());
        let f = fuse_two(&pm, &pr, 0.5).unwrap();
        assert!((f[0] - 0.4).abs() < 1e-15 && (f[1] - 0.6).abs() < 1e-15);
        assert!(fuse_two(&pm, &pr, 1.5).is_err());
    }

    #[test]
    fn fuse_three_examples() {
        let pm = [1.0, 0.0];
        let pr = [0.0, 1.0];
        let ps = [0.0, 1.0];
        assert_eq!(fuse_three(&pm, &pr, &ps, 0.7, 0.0, 0.0).unwrap(), pm.to_vec());
        assert_eq!(fuse_three(&[0.3, 0.7], &pr, &[0.9, 0.1], 1.0, 0.0, 1.0).unwrap(), vec![0.9, 0.1]);
        let f = fuse_three(&pm, &pr, &ps, 0.5, 0.4, 0.2).unwrap();
        assert!((f[0] - 4.0 / 9.0).abs() < 1e-12 && (f[1] - 5.0 / 9.0).abs() < 1e-12);
        assert!(fuse_three(&pm, &pr, &ps, 0.5, 0.7, 0.4).is_err());
        assert!(fuse_three(&pm, &pr, &ps, 0.5, -0.1, 0.4).is_err());
    }

    #[test]
    fn mode_round_trip() {
        for m in [FusionMode::Token, FusionMode::TokenSentence] {
            assert_eq!(m.to_string().parse::<FusionMode>().unwrap(), m);
        }
        assert!("sentence".parse::<FusionMode>().is_err());
    }
}
