//! Datasets, tokenization, vocabularies and the bundled toy corpus.

mod generate;
mod sample;
mod tokenize;
mod toy;
mod vocab;

pub use generate::{gen_toy_corpus, toy_corpus};
pub use sample::{load_dataset, save_dataset, to_json_line, AstGraph, CodeSample};
pub use tokenize::{split_identifier, summary_tokens};
pub use toy::parse_toy;
pub use vocab::{build_vocab, code_subtokens, summary_subtokens, Vocabulary, BOS, EOS, PAD, RESERVED, UNK};
