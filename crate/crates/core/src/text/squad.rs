//! Span datasets in the SQuAD v1.1 JSON layout.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::passage::{Passage, Question, SpanExample};
use super::tokenize::{tokenize, SentenceSplitter};
use super::LoadReport;
use crate::error::{Error, Result};
use crate::metrics::normalize_answer;

#[derive(Serialize, Deserialize)]
struct SquadFile {
    #[serde(default = "default_version")]
    version: String,
    data: Vec<Article>,
}

fn default_version() -> String {
    "1.1".into()
}

#[derive(Serialize, Deserialize)]
struct Article {
    #[serde(default)]
    title: String,
    paragraphs: Vec<Paragraph>,
}

#[derive(Serialize, Deserialize)]
struct Paragraph {
    context: String,
    qas: Vec<Qa>,
}

#[derive(Serialize, Deserialize)]
struct Qa {
    id: String,
    question: String,
    answers: Vec<Answer>,
}

#[derive(Serialize, Deserialize)]
struct Answer {
    text: String,
    answer_start: usize,
}

pub fn load_span_dataset(path: &Path) -> Result<(Vec<SpanExample>, LoadReport)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_span_dataset(&text)
}

pub fn parse_span_dataset(text: &str) -> Result<(Vec<SpanExample>, LoadReport)> {
    let file: SquadFile = serde_json::from_str(text).map_err(|e| {
        use serde_json::error::Category;
        match e.classify() {
            Category::Data => Error::Schema(e.to_string()),
            _ => Error::Parse {
                location: format!("line {} column {}", e.line(), e.column()),
                message: e.to_string(),
            },
        }
    })?;

    let splitter = SentenceSplitter::default();
    let mut examples = Vec::new();
    let mut report = LoadReport::default();
    for article in &file.data {
        for para in &article.paragraphs {
            let (passage, tokens) = match Passage::from_text(&para.context, &splitter) {
                Ok(p) => p,
                Err(e) => {
                    for qa in &para.qas {
                        report.reject(&qa.id, format!("context: {e}"));
                    }
                    continue;
                }
            };
            for qa in &para.qas {
                match align(qa, &passage, &tokens) {
                    Ok(ex) => {
                        report.accepted += 1;
                        examples.push(ex);
                    }
                    Err(reason) => report.reject(&qa.id, reason),
                }
            }
        }
    }
    Ok((examples, report))
}

fn align(
    qa: &Qa,
    passage: &Passage,
    tokens: &[super::tokenize::Token],
) -> std::result::Result<SpanExample, String> {
    let answer = qa.answers.first().ok_or("no answers")?;
    let question = Question::new(tokenize(&qa.question).into_iter().map(|t| t.text).collect())
        .map_err(|e| e.to_string())?;
    let begin = answer.answer_start;
    let end = begin + answer.text.chars().count();
    let covered: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| t.start < end && t.end > begin)
        .map(|(i, _)| i)
        .collect();
    let (&first, &last) = covered
        .first()
        .zip(covered.last())
        .ok_or("answer offset outside every token")?;
    let span_text = tokens[first..=last]
        .iter()
        .map(|t| t.text.as_str())
        .collect::<Vec<_>>()
        .join(" ");
    if normalize_answer(&span_text) != normalize_answer(&answer.text) {
        return Err(format!(
            "answer {:?} does not align with tokens {span_text:?}",
            answer.text
        ));
    }
    Ok(SpanExample {
        id: qa.id.clone(),
        passage: passage.clone(),
        question,
        answer_start: first,
        answer_end: last,
        answer_text: answer.text.clone(),
        gold_answers: qa.answers.iter().map(|a| a.text.clone()).collect(),
    })
}

/// Serialises span examples as a SQuAD-layout JSON document, one paragraph
/// per example. Tokens are joined by single spaces.
pub fn span_dataset_to_json(examples: &[SpanExample]) -> Result<String> {
    let paragraphs = examples
        .iter()
        .map(|ex| {
            let mut context = String::new();
            let mut starts = Vec::with_capacity(ex.passage.num_words());
            for (t, tok) in ex.passage.flat_tokens().iter().enumerate() {
                if t > 0 {
                    context.push(' ');
                }
                starts.push(context.chars().count());
                context.push_str(tok);
            }
            let answer_text = ex.answer_tokens().join(" ");
            Paragraph {
                context,
                qas: vec![Qa {
                    id: ex.id.clone(),
                    question: ex.question.tokens().join(" "),
                    answers: vec![Answer {
                        text: answer_text,
                        answer_start: starts[ex.answer_start],
                    }],
                }],
            }
        })
        .collect();
    let file = SquadFile {
        version: default_version(),
        data: vec![Article {
            title: "synthetic".into(),
            paragraphs,
        }],
    };
    serde_json::to_string_pretty(&file).map_err(|e| Error::Schema(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE: &str = r#"{"version": "1.1", "data": [{"title": "t", "paragraphs": [
        {"context": "The big cat sat. It was happy.",
         "qas": [{"id": "q1", "question": "Who sat?", "answers": [{"text": "cat", "answer_start": 8}]},
                 {"id": "q2", "question": "Who?", "answers": [{"text": "ig ca", "answer_start": 5}]}]}]}]}"#;

    #[test]
    fn crafted_paragraph() {
        let (examples, report) = parse_span_dataset(ONE).unwrap();
        assert_eq!(report.total(), 2);
        assert_eq!(report.accepted, 1);
        assert_eq!(report.rejected.len(), 1);
        let ex = &examples[0];
        assert_eq!((ex.answer_start, ex.answer_end), (2, 2));
        assert_eq!(ex.passage.num_sentences(), 2);
        assert_eq!(ex.question.tokens(), ["Who", "sat", "?"]);
    }

    #[test]
    fn malformed_json_is_parse_error() {
        assert!(matches!(
            parse_span_dataset("{\"data\": [").unwrap_err(),
            Error::Parse { .. }
        ));
    }

    #[test]
    fn missing_field_is_schema_error() {
        let doc = r#"{"data": [{"paragraphs": [{"qas": []}]}]}"#;
        assert!(matches!(parse_span_dataset(doc).unwrap_err(), Error::Schema(_)));
    }
}
