use std::ops::Range;

use super::tokenize::{tokenize, SentenceSplitter, Token};
use crate::error::{Error, Result};

/// A passage as a sequence of nonempty sentences, with a flat word view.
#[derive(Clone, Debug, PartialEq)]
pub struct Passage {
    sentences: Vec<Vec<String>>,
    flat: Vec<String>,
    sent_of_word: Vec<(usize, usize)>,
    sentence_starts: Vec<usize>,
}

impl Passage {
    pub fn new(sentences: Vec<Vec<String>>) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::Contract("passage has no sentences".into()));
        }
        if let Some(i) = sentences.iter().position(Vec::is_empty) {
            return Err(Error::Contract(format!("sentence {i} is empty")));
        }
        let mut flat = Vec::new();
        let mut sent_of_word = Vec::new();
        let mut sentence_starts = Vec::with_capacity(sentences.len());
        for (i, s) in sentences.iter().enumerate() {
            sentence_starts.push(flat.len());
            for (j, w) in s.iter().enumerate() {
                flat.push(w.clone());
                sent_of_word.push((i, j));
            }
        }
        Ok(Passage {
            sentences,
            flat,
            sent_of_word,
            sentence_starts,
        })
    }

    /// Splits a flat token list into sentences at the given ranges.
    pub fn from_ranges(tokens: &[String], ranges: &[Range<usize>]) -> Result<Self> {
        Passage::new(ranges.iter().map(|r| tokens[r.clone()].to_vec()).collect())
    }

    /// Tokenizes and sentence-splits raw text.
    pub fn from_text(text: &str, splitter: &SentenceSplitter) -> Result<(Self, Vec<Token>)> {
        let tokens = tokenize(text);
        let words: Vec<String> = tokens.iter().map(|t| t.text.clone()).collect();
        let ranges = splitter.split(&tokens);
        Ok((Passage::from_ranges(&words, &ranges)?, tokens))
    }

    /// Number of sentences, `L`.
    pub fn num_sentences(&self) -> usize {
        self.sentences.len()
    }

    /// Number of words, `M`.
    pub fn num_words(&self) -> usize {
        self.flat.len()
    }

    pub fn sentences(&self) -> &[Vec<String>] {
        &self.sentences
    }

    pub fn sentence_len(&self, i: usize) -> usize {
        self.sentences[i].len()
    }

    pub fn flat_tokens(&self) -> &[String] {
        &self.flat
    }

    /// `(sentence, offset)` of flat index `t`.
    pub fn sent_of_word(&self, t: usize) -> (usize, usize) {
        self.sent_of_word[t]
    }

    /// Sentence index of every flat word.
    pub fn sentence_index_per_word(&self) -> Vec<usize> {
        self.sent_of_word.iter().map(|&(i, _)| i).collect()
    }

    /// Flat index of word `j` in sentence `i`.
    pub fn flat_index(&self, i: usize, j: usize) -> usize {
        self.sentence_starts[i] + j
    }

    /// Flat index range covered by sentence `i`.
    pub fn sentence_range(&self, i: usize) -> Range<usize> {
        let start = self.sentence_starts[i];
        start..start + self.sentences[i].len()
    }

    pub fn average_sentence_length(&self) -> f64 {
        self.num_words() as f64 / self.num_sentences() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Question {
    tokens: Vec<String>,
}

impl Question {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Contract("question has no tokens".into()));
        }
        Ok(Question { tokens })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Answer is the inclusive token interval `answer_start..=answer_end`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanExample {
    pub id: String,
    pub passage: Passage,
    pub question: Question,
    pub answer_start: usize,
    pub answer_end: usize,
    pub answer_text: String,
    /// Every acceptable answer string; the first is `answer_text`.
    pub gold_answers: Vec<String>,
}

impl SpanExample {
    pub fn validate(&self) -> Result<()> {
        if self.answer_start > self.answer_end || self.answer_end >= self.passage.num_words() {
            return Err(Error::Contract(format!(
                "answer span {}..={} invalid for {} words",
                self.answer_start,
                self.answer_end,
                self.passage.num_words()
            )));
        }
        Ok(())
    }

    pub fn answer_tokens(&self) -> &[String] {
        &self.passage.flat_tokens()[self.answer_start..=self.answer_end]
    }
}

pub const PLACEHOLDER: &str = "@placeholder";

#[derive(Clone, Debug, PartialEq)]
pub struct ClozeExample {
    pub id: String,
    pub passage: Passage,
    /// Contains exactly one [`PLACEHOLDER`] token.
    pub question: Question,
    pub candidates: Vec<String>,
    pub answer_index: usize,
    /// Flat passage positions covered by each candidate's occurrences.
    pub candidate_positions: Vec<Vec<usize>>,
}

impl ClozeExample {
    /// Builds the example, locating each candidate in the passage.
    pub fn new(
        id: String,
        passage: Passage,
        question: Question,
        candidates: Vec<String>,
        answer_index: usize,
    ) -> Result<Self> {
        let placeholders = question.tokens().iter().filter(|t| *t == PLACEHOLDER).count();
        if placeholders != 1 {
            return Err(Error::Contract(format!(
                "question must contain exactly one {PLACEHOLDER}, found {placeholders}"
            )));
        }
        if answer_index >= candidates.len() {
            return Err(Error::Contract(format!(
                "answer index {answer_index} out of {} candidates",
                candidates.len()
            )));
        }
        let candidate_positions = candidates
            .iter()
            .map(|c| {
                let positions = locate(passage.flat_tokens(), c);
                if positions.is_empty() {
                    Err(Error::Contract(format!("candidate {c:?} not found in passage")))
                } else {
                    Ok(positions)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ClozeExample {
            id,
            passage,
            question,
            candidates,
            answer_index,
            candidate_positions,
        })
    }
}

/// Sorted, deduplicated positions covered by every occurrence of the
/// (possibly multi-token) `phrase` in `tokens`.
pub fn locate(tokens: &[String], phrase: &str) -> Vec<usize> {
    let needle: Vec<String> = tokenize(phrase).into_iter().map(|t| t.text).collect();
    if needle.is_empty() || needle.len() > tokens.len() {
        return Vec::new();
    }
    let mut positions = Vec::new();
    for start in 0..=tokens.len() - needle.len() {
        if tokens[start..start + needle.len()] == needle[..] {
            positions.extend(start..start + needle.len());
        }
    }
    positions.sort_unstable();
    positions.dedup();
    positions
}

/// Either kind of supervised example.
#[derive(Clone, Debug, PartialEq)]
pub enum QaExample {
    Span(SpanExample),
    Cloze(ClozeExample),
}

impl QaExample {
    pub fn passage(&self) -> &Passage {
        match self {
            QaExample::Span(e) => &e.passage,
            QaExample::Cloze(e) => &e.passage,
        }
    }

    pub fn question(&self) -> &Question {
        match self {
            QaExample::Span(e) => &e.question,
            QaExample::Cloze(e) => &e.question,
        }
    }

    pub fn id(&self) -> &str {
        match self {
            QaExample::Span(e) => &e.id,
            QaExample::Cloze(e) => &e.id,
        }
    }
}
