//! Tokenization, passages, vocabularies, embeddings and dataset readers.

mod cloze;
mod embeddings;
mod passage;
mod squad;
mod synthetic;
mod tokenize;
mod vocab;

pub use cloze::{cloze_record, load_cloze_dataset, parse_cloze_dataset};
pub use embeddings::{load_embeddings, parse_embeddings, EmbeddingMatrix, OovPolicy};
pub use passage::{locate, ClozeExample, Passage, QaExample, Question, SpanExample, PLACEHOLDER};
pub use squad::{load_span_dataset, parse_span_dataset, span_dataset_to_json};
pub use synthetic::{gen_synthetic_cloze, gen_synthetic_span, ClozeSynthConfig, SpanSynthConfig};
pub use tokenize::{split_sentences, tokenize, SentenceSplitter, Token, DEFAULT_ABBREVIATIONS};
pub use vocab::{Vocabulary, PAD_ID, PLACEHOLDER_ID, UNK_ID};

/// Outcome of reading a dataset: how many records were kept and why the
/// others were dropped.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    pub accepted: usize,
    pub rejected: Vec<(String, String)>,
}

impl LoadReport {
    pub fn total(&self) -> usize {
        self.accepted + self.rejected.len()
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        self.accepted as f64 / self.total() as f64
    }

    fn reject(&mut self, record: &str, reason: impl ToString) {
        self.rejected.push((record.to_string(), reason.to_string()));
    }
}
