use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::sample::CodeSample;
use super::tokenize::split_identifier;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Token ↔ id map with the four reserved ids at 0..3.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    itos: Vec<String>,
    stoi: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(itos: Vec<String>) -> Self {
        let stoi = itos.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { itos, stoi }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.itos
    }
}

impl Vocabulary {
    /// Vocabulary from token counts: tokens below `min_freq` are dropped, the
    /// rest ordered by descending count then lexicographically, truncated to
    /// `max_size` non-reserved entries.
    pub fn from_counts(counts: &HashMap<String, usize>, min_freq: usize, max_size: usize) -> Self {
        let mut entries: Vec<(&String, usize)> = counts
            .iter()
            .filter(|(t, &c)| c >= min_freq.max(1) && !RESERVED.contains(&t.as_str()))
            .map(|(t, &c)| (t, c))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        entries.truncate(max_size);
        let itos: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(entries.into_iter().map(|(t, _)| t.clone()))
            .collect();
        itos.into()
    }

    pub fn len(&self) -> usize {
        self.itos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.itos.len() <= RESERVED.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.stoi.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.stoi.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.itos
            .get(id)
            .map(String::as_str)
            .ok_or(Error::IdOutOfRange { id, size: self.itos.len() })
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter().map(|&i| self.token(i).map(str::to_owned)).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.itos
    }
}

/// Code-side token stream: every code token run through [`split_identifier`].
pub fn code_subtokens(sample: &CodeSample) -> Vec<String> {
    sample
        .code_tokens
        .iter()
        .flat_map(|t| split_identifier(t))
        .collect()
}

/// Summary-side token stream: lowercased tokens.
pub fn summary_subtokens(sample: &CodeSample) -> Vec<String> {
    sample.summary_tokens.iter().map(|t| t.to_lowercase()).collect()
}

/// Separate code and summary vocabularies from a training split. AST node
/// labels share the code vocabulary.
pub fn build_vocab(train: &[CodeSample], min_freq: usize, max_size: usize) -> Result<(Vocabulary, Vocabulary)> {
    if train.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    let mut code = HashMap::new();
    let mut summary = HashMap::new();
    for s in train {
        for t in code_subtokens(s).into_iter().chain(s.ast.node_labels.iter().cloned()) {
            *code.entry(t).or_insert(0) += 1;
        }
        for t in summary_subtokens(s) {
            *summary.entry(t).or_insert(0) += 1;
        }
    }
    Ok((
        Vocabulary::from_counts(&code, min_freq, max_size),
        Vocabulary::from_counts(&summary, min_freq, max_size),
    ))
}
