//! Key/value store of fused decoder representations and the summary tokens
//! they predicted, with exact top-K inner-product search.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::PAD;
use crate::error::{Error, Result};
use crate::model::{DecodeStepOutput, EncodedSample, EncoderOutputs, Model};
use crate::tensor::{l2_normalize, Tensor};

const MAGIC: &[u8; 8] = b"TRAMDS01";
const HEADER_LEN: usize = 8 + 4 + 8;
const FOOTER_LEN: usize = 8;

/// How keys are assembled from a decoder step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeyMode {
    /// `normalize(concat(H_t, R_t, d_{t-1}))`
    Full,
    /// `normalize(d_{t-1})` (the ablation without code/AST context)
    DecoderOnly,
}

impl KeyMode {
    pub fn key_dim(self, d_model: usize) -> usize {
        match self {
            KeyMode::Full => 3 * d_model,
            KeyMode::DecoderOnly => d_model,
        }
    }

    /// Infer the mode from a stored key dimension.
    pub fn from_dim(dim: usize, d_model: usize) -> Result<Self> {
        if dim == 3 * d_model {
            Ok(KeyMode::Full)
        } else if dim == d_model {
            Ok(KeyMode::DecoderOnly)
        } else {
            Err(Error::DimensionMismatch {
                datastore: dim,
                model: d_model,
            })
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    /// Inner product of unit vectors.
    #[default]
    Cosine,
    /// Negated squared Euclidean distance.
    #[serde(rename = "l2")]
    NegSquaredL2,
}

impl std::str::FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Similarity::Cosine),
            "l2" => Ok(Similarity::NegSquaredL2),
            _ => Err(Error::InvalidArgument(format!("unknown similarity {s:?}"))),
        }
    }
}

impl std::fmt::Display for Similarity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Similarity::Cosine => "cosine",
            Similarity::NegSquaredL2 => "l2",
        })
    }
}

/// `Σ attn_i · states_i`
pub fn weighted_context(attn: &[f64], states: &Tensor) -> Result<Vec<f64>> {
    if attn.len() != states.rows() {
        return Err(Error::shape(
            "weighted_context",
            format!("{} weights for {} states", attn.len(), states.rows()),
        ));
    }
    let mut out = vec![0.0; states.cols()];
    for (i, &a) in attn.iter().enumerate() {
        for (o, s) in out.iter_mut().zip(states.row(i)) {
            *o += a * s;
        }
    }
    Ok(out)
}

pub fn make_key(h: &[f64], r: &[f64], d_prev: &[f64]) -> Result<Vec<f64>> {
    if h.len() != d_prev.len() || r.len() != d_prev.len() {
        return Err(Error::shape(
            "make_key",
            format!("{} / {} / {}", h.len(), r.len(), d_prev.len()),
        ));
    }
    let cat: Vec<f64> = h.iter().chain(r).chain(d_prev).copied().collect();
    l2_normalize(&cat)
}

/// Query/datastore key for one decoder step.
pub fn step_key(mode: KeyMode, step: &DecodeStepOutput, enc: &EncoderOutputs) -> Result<Vec<f64>> {
    match mode {
        KeyMode::DecoderOnly => l2_normalize(&step.d_prev),
        KeyMode::Full => {
            let h = weighted_context(&step.attend_code, &enc.code_states)?;
            let r = weighted_context(&step.attend_node, &enc.ast_states)?;
            make_key(&h, &r, &step.d_prev)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalTriple {
    /// Position of the entry in the datastore.
    pub index: usize,
    pub value: usize,
    pub similarity: f64,
}

/// Where an entry came from: position in the build corpus and target step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EntrySource {
    pub sample: usize,
    pub step: usize,
}

/// Flat store of `f32` keys and `u32` token values. Entry provenance is kept
/// in memory only; it is not part of the file format.
#[derive(Clone, Debug)]
pub struct Datastore {
    dim: usize,
    keys: Vec<f32>,
    values: Vec<u32>,
    sources: Vec<EntrySource>,
}

impl PartialEq for Datastore {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.values == other.values && self.keys == other.keys
    }
}

impl Datastore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            keys: Vec::new(),
            values: Vec::new(),
            sources: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn key(&self, i: usize) -> &[f32] {
        &self.keys[i * self.dim..(i + 1) * self.dim]
    }

    pub fn value(&self, i: usize) -> usize {
        self.values[i] as usize
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    pub fn source(&self, i: usize) -> Option<EntrySource> {
        self.sources.get(i).copied()
    }

    pub fn push(&mut self, key: &[f64], value: usize, source: Option<EntrySource>) -> Result<()> {
        if key.len() != self.dim {
            return Err(Error::shape("datastore push", format!("key dim {} != {}", key.len(), self.dim)));
        }
        if value == PAD || value > u32::MAX as usize {
            return Err(Error::InvalidArgument(format!("cannot store token id {value}")));
        }
        if let Some(s) = source {
            if self.sources.len() != self.values.len() {
                return Err(Error::InvalidArgument("mixing entries with and without provenance".into()));
            }
            self.sources.push(s);
        }
        self.keys.extend(key.iter().map(|&v| v as f32));
        self.values.push(value as u32);
        Ok(())
    }

    /// Score of entry `i` against `query`, accumulated in f64.
    pub fn score(&self, i: usize, query: &[f64], similarity: Similarity) -> f64 {
        let key = self.key(i);
        match similarity {
            Similarity::Cosine => key.iter().zip(query).map(|(&k, &q)| k as f64 * q).sum(),
            Similarity::NegSquaredL2 => -key
                .iter()
                .zip(query)
                .map(|(&k, &q)| (k as f64 - q) * (k as f64 - q))
                .sum::<f64>(),
        }
    }

    /// Exact top-K by inner product: descending similarity, ties by insertion order.
    pub fn query_topk(&self, query: &[f64], k: usize) -> Result<Vec<RetrievalTriple>> {
        self.query_topk_with(query, k, Similarity::Cosine)
    }

    pub fn query_topk_with(&self, query: &[f64], k: usize, similarity: Similarity) -> Result<Vec<RetrievalTriple>> {
        if k == 0 {
            return Err(Error::InvalidArgument("K must be >= 1".into()));
        }
        if self.is_empty() {
            return Err(Error::Empty("datastore"));
        }
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                datastore: self.dim,
                model: query.len(),
            });
        }
        // `best` stays sorted; a later entry only displaces on a strictly higher score.
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        for i in 0..self.len() {
            let s = self.score(i, query, similarity);
            if best.len() == k && s <= best[k - 1].0 {
                continue;
            }
            let pos = best.partition_point(|&(bs, _)| bs >= s);
            best.insert(pos, (s, i));
            best.truncate(k);
        }
        Ok(best
            .into_iter()
            .map(|(s, i)| RetrievalTriple {
                index: i,
                value: self.value(i),
                similarity: s,
            })
            .collect())
    }

    /// Realign the values of `⌊fraction·N⌋` uniformly chosen entries by a
    /// random non-zero cyclic shift among themselves. Keys are untouched.
    pub fn inject_noise(&self, fraction: f64, seed: u64) -> Result<Datastore> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::InvalidArgument(format!("noise fraction {fraction} outside [0, 1]")));
        }
        let mut out = self.clone();
        let m = (fraction * self.len() as f64).floor() as usize;
        if m < 2 {
            return Ok(out);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chosen = index::sample(&mut rng, self.len(), m).into_vec();
        chosen.sort_unstable();
        let shift = rng.gen_range(1..m);
        for (j, &i) in chosen.iter().enumerate() {
            out.values[i] = self.values[chosen[(j + shift) % m]];
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * (4 * self.dim + 4) + FOOTER_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for i in 0..self.len() {
            for v in self.key(i) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&self.values[i].to_le_bytes());
        }
        let sum = fnv1a(&out[HEADER_LEN..]);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Datastore> {
        if bytes.len() < HEADER_LEN + FOOTER_LEN {
            return Err(Error::Format("datastore file truncated".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Format("not a datastore file or unsupported version".into()));
        }
        let dim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let n = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        if dim == 0 {
            return Err(Error::Format("zero key dimension".into()));
        }
        let entry = 4 * dim + 4;
        let expected = n
            .checked_mul(entry)
            .and_then(|p| p.checked_add(HEADER_LEN + FOOTER_LEN))
            .ok_or_else(|| Error::Format("entry count overflow".into()))?;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "datastore size {} != expected {expected} (truncated?)",
                bytes.len()
            )));
        }
        let payload = &bytes[HEADER_LEN..bytes.len() - FOOTER_LEN];
        let stored = u64::from_le_bytes(bytes[bytes.len() - FOOTER_LEN..].try_into().expect("8 bytes"));
        let computed = fnv1a(payload);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut ds = Datastore::new(dim);
        ds.keys.reserve(n * dim);
        ds.values.reserve(n);
        for chunk in payload.chunks_exact(entry) {
            for f in chunk[..4 * dim].chunks_exact(4) {
                ds.keys.push(f32::from_le_bytes(f.try_into().expect("4 bytes")));
            }
            ds.values
                .push(u32::from_le_bytes(chunk[4 * dim..].try_into().expect("4 bytes")));
        }
        Ok(ds)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn save_datastore(ds: &Datastore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&ds.to_bytes())?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_datastore(path: impl AsRef<Path>) -> Result<Datastore> {
    Datastore::from_bytes(&fs::read(path)?)
}

/// Teacher-forced pass over `corpus`: one entry per target position (EOS
/// included), in corpus order then step order.
pub fn build_datastore(model: &Model, corpus: &[EncodedSample], mode: KeyMode) -> Result<Datastore> {
    if model.trained_steps == 0 {
        return Err(Error::InvalidArgument("refusing to build a datastore from an untrained model".into()));
    }
    let per_sample: Vec<Vec<(Vec<f64>, usize)>> = corpus
        .par_iter()
        .map(|sample| {
            let enc = model.encode(sample)?;
            let steps = model.decode_all(&sample.decoder_input(), &enc)?;
            steps
                .iter()
                .zip(sample.decoder_target())
                .filter(|(_, v)| *v != PAD)
                .map(|(step, v)| Ok((step_key(mode, step, &enc)?, v)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut ds = Datastore::new(mode.key_dim(model.d_model()));
    for (sample, entries) in per_sample.into_iter().enumerate() {
        for (step, (key, value)) in entries.into_iter().enumerate() {
            ds.push(&key, value, Some(EntrySource { sample, step }))?;
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_examples() {
        let k = make_key(&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(k, vec![0.5, 0.0, 0.0, 0.5, 0.5, 0.5]);
        assert!(make_key(&[0.0], &[0.0], &[0.0]).is_err());
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
    }

    #[test]
    fn weighted_context_examples() {
        let states = Tensor::from_rows(&[vec![0.0, 4.0], vec![4.0, 0.0]]).unwrap();
        assert_eq!(weighted_context(&[0.25, 0.75], &states).unwrap(), vec![3.0, 1.0]);
        assert_eq!(weighted_context(&[0.0, 1.0], &states).unwrap(), vec![4.0, 0.0]);
        let same = Tensor::from_rows(&vec![vec![1.5, -2.0]; 3]).unwrap();
        let c = weighted_context(&[0.2, 0.3, 0.5], &same).unwrap();
        assert!((c[0] - 1.5).abs() < 1e-12 && (c[1] + 2.0).abs() < 1e-12);
        assert!(weighted_context(&[1.0], &states).is_err());
    }

    fn orthonormal() -> Datastore {
        let mut ds = Datastore::new(3);
        ds.push(&[1.0, 0.0, 0.0], 4, None).unwrap();
        ds.push(&[0.0, 1.0, 0.0], 5, None).unwrap();
        ds.push(&[0.0, 0.0, 1.0], 6, None).unwrap();
        ds
    }

    #[test]
    fn topk_self_match_and_ties() {
        let ds = orthonormal();
        let one = ds.query_topk(&[1.0, 0.0, 0.0], 1).unwrap();
        assert_eq!((one[0].value, one[0].similarity), (4, 1.0));
        let all = ds.query_topk(&[1.0, 0.0, 0.0], 3).unwrap();
        let vals: Vec<(usize, f64)> = all.iter().map(|t| (t.value, t.similarity)).collect();
        assert_eq!(vals, vec![(4, 1.0), (5, 0.0), (6, 0.0)]);
        assert_eq!(ds.query_topk(&[1.0, 0.0, 0.0], 16).unwrap().len(), 3);
        assert!(ds.query_topk(&[1.0, 0.0, 0.0], 0).is_err());
        assert!(ds.query_topk(&[1.0, 0.0], 1).is_err());
        assert!(Datastore::new(3).query_topk(&[1.0, 0.0, 0.0], 1).is_err());
    }

    #[test]
    fn l2_mode_orders_like_cosine_on_unit_keys() {
        let ds = orthonormal();
        let q = l2_normalize(&[0.2, 0.9, 0.1]).unwrap();
        let a: Vec<usize> = ds.query_topk(&q, 3).unwrap().iter().map(|t| t.index).collect();
        let b: Vec<usize> = ds
            .query_topk_with(&q, 3, Similarity::NegSquaredL2)
            .unwrap()
            .iter()
            .map(|t| t.index)
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn pad_is_not_storable() {
        let mut ds = Datastore::new(1);
        assert!(ds.push(&[1.0], PAD, None).is_err());
        assert!(ds.push(&[1.0, 2.0], 4, None).is_err());
    }

    #[test]
    fn byte_layout() {
        let ds = orthonormal();
        let bytes = ds.to_bytes();
        assert_eq!(bytes.len(), HEADER_LEN + 3 * (4 * 3 + 4) + FOOTER_LEN);
        assert_eq!(Datastore::from_bytes(&bytes).unwrap(), ds);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Datastore::from_bytes(&bad), Err(Error::Format(_))));
        let mut flipped = bytes.clone();
        flipped[HEADER_LEN + 2] ^= 1;
        assert!(matches!(Datastore::from_bytes(&flipped), Err(Error::Checksum { .. })));
        assert!(Datastore::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
