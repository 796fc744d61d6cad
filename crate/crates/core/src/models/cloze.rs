//! Multi-hop gated-attention reader with an attention-sum answer layer.

use crate::autodiff::{Tape, Tensor, Var};
use crate::encoders::{bigru_forward, encode_question, encode_sentences, BiGruLayer};
use crate::error::{Error, Result};
use crate::gate::{apply_sentence_gate, sentence_inputs};
use crate::params::ParamId;
use crate::text::{ClozeExample, Vocabulary};

use super::{embed, CharComposer, Forward, GateStack, GateTrace, Prediction, RunMode};

/// `x_i = d_i ⊙ Σ_t softmax_t(d_i · q_t) q_t` for passage rows `d`
/// (`[M, 2d]`) and question rows `q` (`[N, 2d]`).
pub fn ga_hop(tape: &mut Tape<'_>, d: Var, q: Var) -> Result<Var> {
    let (ds, qs) = (tape.shape(d).to_vec(), tape.shape(q).to_vec());
    if ds.len() != 2 || qs.len() != 2 || ds[1] != qs[1] {
        return Err(Error::dim("ga_hop", &ds, &qs));
    }
    let scores = tape.matmul_t(d, q)?;
    let alpha = tape.softmax(scores, 1)?;
    let q_tilde = tape.matmul(alpha, q)?;
    tape.mul(d, q_tilde)
}

/// Candidate distribution from pointer attention over `[M, 2d]` words.
#[derive(Clone, Copy, Debug)]
pub struct AttentionSum {
    /// `[C]` probabilities.
    pub probs: Var,
    /// `[C]` log-probabilities.
    pub log_probs: Var,
}

/// Softmax over all positions of `words · q`, summed over each
/// candidate's positions and renormalised over the candidates.
pub fn attention_sum(
    tape: &mut Tape<'_>,
    words: Var,
    q: Var,
    positions: &[Vec<usize>],
) -> Result<AttentionSum> {
    let m = tape.shape(words)[0];
    if positions.is_empty() {
        return Err(Error::Contract("attention sum needs at least one candidate".into()));
    }
    let mut select = vec![0.0; positions.len() * m];
    for (c, pos) in positions.iter().enumerate() {
        if pos.is_empty() {
            return Err(Error::Contract(format!("candidate {c} has no passage positions")));
        }
        for &p in pos {
            if p >= m {
                return Err(Error::Index {
                    op: "attention_sum",
                    index: p,
                    extent: m,
                });
            }
            select[c * m + p] = 1.0;
        }
    }
    let scores = tape.matmul_t(words, q)?;
    let s = tape.softmax(scores, 0)?;
    let select = tape.constant(Tensor::new(vec![positions.len(), m], select)?);
    let mass = tape.matmul(select, s)?;
    let mass = tape.reshape(mass, &[positions.len()])?;
    let log_mass = tape.ln(mass)?;
    Ok(AttentionSum {
        probs: tape.softmax(log_mass, 0)?,
        log_probs: tape.log_softmax(log_mass, 0)?,
    })
}

/// Parameters of one hop. Hop 1 reads embeddings; later hops read the
/// previous hop's `2d` outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct HopParams {
    pub passage_sentence: BiGruLayer,
    pub passage_word: BiGruLayer,
    pub question: BiGruLayer,
    pub gate: GateStack,
}

impl HopParams {
    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.passage_sentence.params();
        p.extend(self.passage_word.params());
        p.extend(self.question.params());
        p.extend(self.gate.params());
        p
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClozeNet {
    pub embedding: ParamId,
    pub chars: Option<CharComposer>,
    pub hops: Vec<HopParams>,
}

impl ClozeNet {
    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.embedding];
        if let Some(c) = &self.chars {
            p.extend(c.params());
        }
        for h in &self.hops {
            p.extend(h.params());
        }
        p
    }
}

pub fn cloze_forward(
    tape: &mut Tape<'_>,
    net: &ClozeNet,
    vocab: &Vocabulary,
    ex: &ClozeExample,
    mode: &mut RunMode,
) -> Result<Forward> {
    if net.hops.is_empty() {
        return Err(Error::Config("cloze model needs at least one hop".into()));
    }
    let passage = &ex.passage;
    let e_p = embed(tape, net.embedding, net.chars.as_ref(), vocab, passage.flat_tokens())?;
    let e_q = embed(tape, net.embedding, net.chars.as_ref(), vocab, ex.question.tokens())?;

    let mut x = e_p;
    let mut trace = Vec::new();
    let mut last_q = None;
    for hop in &net.hops {
        let x_s = mode.dropout(tape, x)?;
        let x_w = mode.dropout(tape, x)?;
        let q_in = mode.dropout(tape, e_q)?;
        let h_p = bigru_forward(tape, &hop.passage_sentence, x_s)?;
        let (h_q, q_pooled) = encode_question(tape, &hop.question, q_in)?;
        let v = bigru_forward(tape, &hop.passage_word, x_w)?;
        let h_p = mode.dropout(tape, h_p)?;
        let v = mode.dropout(tape, v)?;

        let sentences = encode_sentences(tape, h_p, passage, &hop.gate.encoder)?;
        let h_tilde = sentence_inputs(tape, &hop.gate.matching, sentences, q_pooled)?;
        let (u, f) = apply_sentence_gate(tape, passage, v, h_tilde, &hop.gate.combiner)?;
        if let (true, Some(f)) = (mode.trace, f) {
            trace.push(tape.value(f).clone());
        }
        let u = mode.dropout(tape, u)?;
        x = ga_hop(tape, u, h_q)?;
        last_q = Some(h_q);
    }
    let h_q = last_q.expect("at least one hop");
    let width = tape.shape(h_q)[1];
    let q_summary = tape.mean(h_q, 0)?;
    let q_summary = tape.reshape(q_summary, &[1, width])?;
    let answer = attention_sum(tape, x, q_summary, &ex.candidate_positions)?;

    let gold = tape.gather(answer.log_probs, &[ex.answer_index])?;
    let nll = tape.affine(gold, -1.0, 0.0)?;
    let loss = tape.sum(nll, 0)?;

    let probs = tape.value(answer.probs).data().to_vec();
    let mut index = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[index] {
            index = i;
        }
    }
    Ok(Forward {
        loss,
        prediction: Prediction::Cloze { index, probs },
        trace: (mode.trace && !trace.is_empty()).then_some(GateTrace { hops: trace }),
    })
}
