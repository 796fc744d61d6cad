//! Line-delimited cloze records:
//! `passage \t question-with-@placeholder \t cand1|cand2|... \t answer`.

use std::fs;
use std::path::Path;

use super::passage::{ClozeExample, Passage, Question};
use super::tokenize::{tokenize, SentenceSplitter};
use super::LoadReport;
use crate::error::{Error, Result};

pub fn load_cloze_dataset(path: &Path) -> Result<(Vec<ClozeExample>, LoadReport)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_cloze_dataset(&text))
}

/// Parses every nonblank line; bad records are skipped and reported.
pub fn parse_cloze_dataset(text: &str) -> (Vec<ClozeExample>, LoadReport) {
    let splitter = SentenceSplitter::default();
    let mut examples = Vec::new();
    let mut report = LoadReport::default();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let id = format!("line-{}", n + 1);
        match parse_record(&id, line, &splitter) {
            Ok(ex) => {
                report.accepted += 1;
                examples.push(ex);
            }
            Err(reason) => report.reject(&id, reason),
        }
    }
    (examples, report)
}

fn parse_record(id: &str, line: &str, splitter: &SentenceSplitter) -> Result<ClozeExample> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 4 {
        return Err(Error::Schema(format!("expected 4 tab-separated fields, found {}", fields.len())));
    }
    let (passage, _) = Passage::from_text(fields[0], splitter)?;
    let question = Question::new(tokenize(fields[1]).into_iter().map(|t| t.text).collect())?;
    let candidates: Vec<String> = fields[2]
        .split('|')
        .map(|c| c.trim().to_string())
        .filter(|c| !c.is_empty())
        .collect();
    let answer = fields[3].trim();
    let answer_index = candidates
        .iter()
        .position(|c| c == answer)
        .ok_or_else(|| Error::Schema(format!("answer {answer:?} is not among the candidates")))?;
    ClozeExample::new(id.to_string(), passage, question, candidates, answer_index)
}

pub fn cloze_record(ex: &ClozeExample) -> String {
    format!(
        "{}\t{}\t{}\t{}",
        ex.passage.flat_tokens().join(" "),
        ex.question.tokens().join(" "),
        ex.candidates.join("|"),
        ex.candidates[ex.answer_index]
    )
}
