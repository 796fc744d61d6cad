use std::ops::Range;

/// Characters split off the edges of a whitespace-delimited chunk.
const EDGE_PUNCTUATION: &[char] = &['.', ',', '!', '?', ';', ':', '\'', '"', '(', ')'];

const TERMINATORS: &[&str] = &[".", "!", "?"];

/// Quotes are ambiguous; they close a sentence only when they touch the
/// preceding token.
const QUOTES: &[&str] = &["\"", "'"];

pub const DEFAULT_ABBREVIATIONS: &[&str] = &["Mr", "Mrs", "Dr", "St", "vs", "etc", "e.g", "i.e"];

/// A token with its character (code point) offsets into the source text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Whitespace tokenizer that detaches leading and trailing punctuation.
///
/// Internal hyphens and apostrophes stay inside their token.
pub fn tokenize(text: &str) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && !chars[i].is_whitespace() {
            i += 1;
        }
        split_chunk(&chars, start, i, &mut tokens);
    }
    tokens
}

fn split_chunk(chars: &[char], start: usize, end: usize, out: &mut Vec<Token>) {
    let single = |p: usize| Token {
        text: chars[p].to_string(),
        start: p,
        end: p + 1,
    };
    let mut lo = start;
    while lo < end && EDGE_PUNCTUATION.contains(&chars[lo]) {
        out.push(single(lo));
        lo += 1;
    }
    let mut hi = end;
    while hi > lo && EDGE_PUNCTUATION.contains(&chars[hi - 1]) {
        hi -= 1;
    }
    if lo < hi {
        out.push(Token {
            text: chars[lo..hi].iter().collect(),
            start: lo,
            end: hi,
        });
    }
    out.extend((hi..end).map(single));
}

/// Rule-based sentence boundaries over a token sequence.
#[derive(Clone, Debug)]
pub struct SentenceSplitter {
    pub abbreviations: Vec<String>,
}

impl Default for SentenceSplitter {
    fn default() -> Self {
        SentenceSplitter {
            abbreviations: DEFAULT_ABBREVIATIONS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl SentenceSplitter {
    fn is_abbreviation(&self, token: &str) -> bool {
        self.abbreviations
            .iter()
            .any(|a| a.eq_ignore_ascii_case(token))
    }

    /// Token ranges of each sentence. A sentence ends after `.`, `!` or
    /// `?` unless the preceding token is an abbreviation; further
    /// terminators, closing brackets and quotes attached to the previous
    /// token stay with the sentence they close. A trailing fragment without terminator is its own sentence.
    pub fn split(&self, tokens: &[Token]) -> Vec<Range<usize>> {
        let closes = |k: usize| {
            let t = tokens[k].text.as_str();
            TERMINATORS.contains(&t)
                || t == ")"
                || (QUOTES.contains(&t) && tokens[k].start == tokens[k - 1].end)
        };
        let mut sentences = Vec::new();
        let mut start = 0;
        let mut i = 0;
        while i < tokens.len() {
            let tok = tokens[i].text.as_str();
            let guarded = i > 0 && self.is_abbreviation(&tokens[i - 1].text);
            if TERMINATORS.contains(&tok) && !guarded && i > start {
                let mut end = i + 1;
                while end < tokens.len() && closes(end) {
                    end += 1;
                }
                sentences.push(start..end);
                start = end;
                i = end;
                continue;
            }
            i += 1;
        }
        if start < tokens.len() {
            sentences.push(start..tokens.len());
        }
        sentences
    }
}

/// Sentence boundaries with the default abbreviation list.
pub fn split_sentences(tokens: &[Token]) -> Vec<Range<usize>> {
    SentenceSplitter::default().split(tokens)
}
