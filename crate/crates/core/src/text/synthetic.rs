//! Seeded generators for desk-scale span and cloze datasets.
//!
//! Span task: every passage hides one marker bigram (two tokens from a
//! marker pool that appear nowhere else in the passage). The question
//! repeats the bigram; the answer is the 1-3 entity tokens right after
//! it, followed by a filler token or the end of the sentence.
//!
//! Cloze task: each candidate entity appears once, directly before a
//! relation token that is unique to it. The question pairs the
//! placeholder with one of those relation tokens.

use serde::{Deserialize, Serialize};

use super::passage::{ClozeExample, Passage, Question, SpanExample, PLACEHOLDER};
use crate::autodiff::RngState;
use crate::error::{Error, Result};

const MAX_SPAN: usize = 3;
const ENTITY_NOISE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpanSynthConfig {
    pub n_examples: usize,
    pub vocab_size: usize,
    pub n_sentences: usize,
    /// Inclusive range of content tokens per sentence (the final `.` is
    /// extra).
    pub sent_len_range: (usize, usize),
    pub seed: u64,
}

impl Default for SpanSynthConfig {
    fn default() -> Self {
        SpanSynthConfig {
            n_examples: 200,
            vocab_size: 100,
            n_sentences: 4,
            sent_len_range: (6, 9),
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClozeSynthConfig {
    pub n_examples: usize,
    pub vocab_size: usize,
    pub n_candidates: usize,
    pub n_sentences: usize,
    pub sent_len_range: (usize, usize),
    pub seed: u64,
}

impl Default for ClozeSynthConfig {
    fn default() -> Self {
        ClozeSynthConfig {
            n_examples: 300,
            vocab_size: 100,
            n_candidates: 4,
            n_sentences: 5,
            sent_len_range: (4, 7),
            seed: 7,
        }
    }
}

/// Disjoint token pools carved out of a vocabulary of `size` words.
struct Pools {
    markers: Vec<String>,
    entities: Vec<String>,
    relations: Vec<String>,
    fillers: Vec<String>,
}

impl Pools {
    fn new(size: usize) -> Self {
        let n_markers = (size / 10).max(4);
        let n_relations = (size / 10).max(4);
        let n_entities = size * 3 / 10;
        let n_fillers = size - n_markers - n_relations - n_entities;
        let named = |prefix: &str, n: usize| (0..n).map(|i| format!("{prefix}{i}")).collect();
        Pools {
            markers: named("m", n_markers),
            entities: named("e", n_entities),
            relations: named("r", n_relations),
            fillers: named("w", n_fillers),
        }
    }
}

fn pick<'a>(pool: &'a [String], rng: &mut RngState) -> &'a String {
    &pool[rng.below(pool.len())]
}

/// `k` distinct members of `pool`.
fn pick_distinct(pool: &[String], k: usize, rng: &mut RngState) -> Vec<String> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    rng.shuffle(&mut idx);
    idx[..k].iter().map(|&i| pool[i].clone()).collect()
}

fn check_range(range: (usize, usize), min: usize, what: &str) -> Result<()> {
    if range.0 > range.1 {
        return Err(Error::Parameter(format!("{what}: empty sentence length range {range:?}")));
    }
    if range.0 < min {
        return Err(Error::Parameter(format!(
            "{what}: sentences of {} tokens cannot hold the planted pattern (need {min})",
            range.0
        )));
    }
    Ok(())
}

pub fn gen_synthetic_span(config: &SpanSynthConfig) -> Result<Vec<SpanExample>> {
    if config.vocab_size < 20 {
        return Err(Error::Parameter(format!(
            "vocab_size {} below minimum 20",
            config.vocab_size
        )));
    }
    if config.n_sentences == 0 {
        return Err(Error::Parameter("n_sentences must be positive".into()));
    }
    check_range(config.sent_len_range, 2 + MAX_SPAN, "span")?;
    let pools = Pools::new(config.vocab_size);
    let mut rng = RngState::new(config.seed);
    let mut examples = Vec::with_capacity(config.n_examples);

    for n in 0..config.n_examples {
        let mut sentences: Vec<Vec<String>> = (0..config.n_sentences)
            .map(|_| {
                let len = rng.between(config.sent_len_range.0, config.sent_len_range.1);
                (0..len)
                    .map(|_| {
                        if rng.uniform() < ENTITY_NOISE {
                            pick(&pools.entities, &mut rng).clone()
                        } else {
                            pick(&pools.fillers, &mut rng).clone()
                        }
                    })
                    .collect()
            })
            .collect();

        let target = rng.below(config.n_sentences);
        let span_len = rng.between(1, MAX_SPAN);
        let sent = &mut sentences[target];
        let pos = rng.between(0, sent.len() - 2 - span_len);
        let markers = pick_distinct(&pools.markers, 2, &mut rng);
        sent[pos] = markers[0].clone();
        sent[pos + 1] = markers[1].clone();
        for k in 0..span_len {
            sent[pos + 2 + k] = pick(&pools.entities, &mut rng).clone();
        }
        if pos + 2 + span_len < sent.len() {
            sent[pos + 2 + span_len] = pick(&pools.fillers, &mut rng).clone();
        }

        let offset: usize = sentences[..target].iter().map(|s| s.len() + 1).sum();
        let answer_start = offset + pos + 2;
        let answer_end = answer_start + span_len - 1;
        let answer_text = sentences[target][pos + 2..pos + 2 + span_len].join(" ");
        for s in &mut sentences {
            s.push(".".into());
        }
        let question = vec![
            pick(&pools.fillers, &mut rng).clone(),
            pick(&pools.fillers, &mut rng).clone(),
            markers[0].clone(),
            markers[1].clone(),
            "?".into(),
        ];
        examples.push(SpanExample {
            id: format!("span-{}-{n}", config.seed),
            passage: Passage::new(sentences)?,
            question: Question::new(question)?,
            answer_start,
            answer_end,
            gold_answers: vec![answer_text.clone()],
            answer_text,
        });
    }
    Ok(examples)
}

pub fn gen_synthetic_cloze(config: &ClozeSynthConfig) -> Result<Vec<ClozeExample>> {
    if config.vocab_size < 20 {
        return Err(Error::Parameter(format!(
            "vocab_size {} below minimum 20",
            config.vocab_size
        )));
    }
    let pools = Pools::new(config.vocab_size);
    if config.n_candidates < 1
        || config.n_candidates > pools.relations.len()
        || config.n_candidates > pools.entities.len()
    {
        return Err(Error::Parameter(format!(
            "n_candidates {} must be in 1..={}",
            config.n_candidates,
            pools.relations.len().min(pools.entities.len())
        )));
    }
    if config.n_sentences < config.n_candidates {
        return Err(Error::Parameter(format!(
            "{} sentences cannot host {} candidates",
            config.n_sentences, config.n_candidates
        )));
    }
    check_range(config.sent_len_range, 2, "cloze")?;
    let mut rng = RngState::new(config.seed);
    let mut examples = Vec::with_capacity(config.n_examples);

    for n in 0..config.n_examples {
        let k = config.n_candidates;
        let entities = pick_distinct(&pools.entities, k, &mut rng);
        let relations = pick_distinct(&pools.relations, k, &mut rng);
        let mut hosts: Vec<usize> = (0..config.n_sentences).collect();
        rng.shuffle(&mut hosts);

        let mut sentences: Vec<Vec<String>> = (0..config.n_sentences)
            .map(|_| {
                let len = rng.between(config.sent_len_range.0, config.sent_len_range.1);
                (0..len).map(|_| pick(&pools.fillers, &mut rng).clone()).collect()
            })
            .collect();
        for c in 0..k {
            let sent = &mut sentences[hosts[c]];
            let pos = rng.between(0, sent.len() - 2);
            sent[pos] = entities[c].clone();
            sent[pos + 1] = relations[c].clone();
        }
        for s in &mut sentences {
            s.push(".".into());
        }

        let gold = rng.below(k);
        let question = vec![
            pick(&pools.fillers, &mut rng).clone(),
            PLACEHOLDER.to_string(),
            relations[gold].clone(),
            pick(&pools.fillers, &mut rng).clone(),
        ];
        let mut order: Vec<usize> = (0..k).collect();
        rng.shuffle(&mut order);
        let candidates: Vec<String> = order.iter().map(|&c| entities[c].clone()).collect();
        let answer_index = order.iter().position(|&c| c == gold).unwrap_or_default();
        examples.push(ClozeExample::new(
            format!("cloze-{}-{n}", config.seed),
            Passage::new(sentences)?,
            Question::new(question)?,
            candidates,
            answer_index,
        )?);
    }
    Ok(examples)
}
