//! Span extractor: gated passage words, a bidirectional match-attention
//! layer and a boundary answer pointer.

use crate::autodiff::{RngState, Tape, Tensor, Var};
use crate::encoders::{bigru_forward, encode_question, encode_sentences, gru_step, BiGruLayer, GruCell};
use crate::error::{Error, Result};
use crate::gate::{apply_sentence_gate, sentence_inputs};
use crate::params::{ParamId, ParamStore};
use crate::text::SpanExample;

use super::{embed, Forward, GateStack, GateTrace, Prediction, RunMode};

/// One reading direction of the match-attention layer. Attention
/// projections are `a × 2d`; the cell reads `[u_t ∥ attended]` (4d) into
/// a 2d state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatchDirection {
    pub w_q: ParamId,
    pub w_p: ParamId,
    pub w_r: ParamId,
    pub b_p: ParamId,
    pub w: ParamId,
    pub cell: GruCell,
}

impl MatchDirection {
    fn new(store: &mut ParamStore, prefix: &str, width: usize, rng: &mut RngState) -> Self {
        let bound = 1.0 / ((width / 2).max(1) as f64).sqrt();
        let mut m = |n: &str, rows| store.add_uniform(format!("{prefix}.{n}"), &[rows, width], bound, rng);
        let (w_q, w_p, w_r) = (m("W_q", width), m("W_p", width), m("W_r", width));
        let w = m("w", 1);
        let b_p = store.add_zeros(format!("{prefix}.b_p"), &[width]);
        let cell = GruCell::new(store, &format!("{prefix}.cell"), 2 * width, width, rng);
        MatchDirection {
            w_q,
            w_p,
            w_r,
            b_p,
            w,
            cell,
        }
    }

    fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.w_q, self.w_p, self.w_r, self.b_p, self.w];
        p.extend(self.cell.params());
        p
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatchAttention {
    pub forward: MatchDirection,
    pub backward: MatchDirection,
    /// `2d × 4d` projection of the two directions back to 2d.
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

impl MatchAttention {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize, rng: &mut RngState) -> Self {
        let forward = MatchDirection::new(store, &format!("{prefix}.fwd"), width, rng);
        let backward = MatchDirection::new(store, &format!("{prefix}.bwd"), width, rng);
        let bound = 1.0 / ((width / 2).max(1) as f64).sqrt();
        let proj_w = store.add_uniform(format!("{prefix}.W_o"), &[width, 2 * width], bound, rng);
        let proj_b = store.add_zeros(format!("{prefix}.b_o"), &[width]);
        MatchAttention {
            forward,
            backward,
            proj_w,
            proj_b,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.forward.params();
        p.extend(self.backward.params());
        p.extend([self.proj_w, self.proj_b]);
        p
    }
}

/// Matched states plus the `[1, N]` attention row used at every passage
/// position, per direction, in passage order.
#[derive(Clone, Debug)]
pub struct MatchOutput {
    pub matched: Var,
    pub forward_attention: Vec<Var>,
    pub backward_attention: Vec<Var>,
}

fn match_direction(
    tape: &mut Tape<'_>,
    dir: &MatchDirection,
    u: Var,
    q: Var,
    reverse: bool,
) -> Result<(Var, Vec<Var>)> {
    let m = tape.shape(u)[0];
    let n = tape.shape(q)[0];
    let width = dir.cell.hidden;
    let (w_q, w_p, w_r) = (tape.param(dir.w_q)?, tape.param(dir.w_p)?, tape.param(dir.w_r)?);
    let (b_p, w) = (tape.param(dir.b_p)?, tape.param(dir.w)?);
    let qw = tape.matmul_t(q, w_q)?;
    let up = tape.linear(u, w_p, Some(b_p))?;

    let mut h = tape.constant(Tensor::zeros(&[1, width]));
    let mut states = vec![h; m];
    let mut attention = vec![h; m];
    for k in 0..m {
        let t = if reverse { m - 1 - k } else { k };
        let hr = tape.matmul_t(h, w_r)?;
        let ut = tape.row(up, t)?;
        let s = tape.add(ut, hr)?;
        let s = tape.gather(s, &vec![0; n])?;
        let g = tape.add(qw, s)?;
        let g = tape.tanh(g)?;
        let scores = tape.matmul_t(g, w)?;
        let alpha = tape.softmax(scores, 0)?;
        let alpha = tape.transpose(alpha)?;
        let attended = tape.matmul(alpha, q)?;
        let word = tape.row(u, t)?;
        let x = tape.concat(&[word, attended], 1)?;
        h = gru_step(tape, &dir.cell, h, x)?;
        states[t] = h;
        attention[t] = alpha;
    }
    Ok((tape.concat(&states, 0)?, attention))
}

/// Attends over the question words (`[N, 2d]`) from every passage word
/// (`[M, 2d]`) in both directions and projects the result back to 2d.
pub fn match_attention_layer(
    tape: &mut Tape<'_>,
    layer: &MatchAttention,
    u: Var,
    q: Var,
) -> Result<MatchOutput> {
    let (us, qs) = (tape.shape(u).to_vec(), tape.shape(q).to_vec());
    let width = layer.forward.cell.hidden;
    if us.len() != 2 || qs.len() != 2 || us[1] != width || qs[1] != width {
        return Err(Error::dim("match_attention", &us, &qs));
    }
    let (f, forward_attention) = match_direction(tape, &layer.forward, u, q, false)?;
    let (b, backward_attention) = match_direction(tape, &layer.backward, u, q, true)?;
    let both = tape.concat(&[f, b], 1)?;
    let (w, bias) = (tape.param(layer.proj_w)?, tape.param(layer.proj_b)?);
    let matched = tape.linear(both, w, Some(bias))?;
    Ok(MatchOutput {
        matched,
        forward_attention,
        backward_attention,
    })
}

/// Boundary pointer: two attention passes over the matched states, the
/// second conditioned on the first through a GRU state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnswerPointer {
    pub v: ParamId,
    pub w_a: ParamId,
    pub b_a: ParamId,
    pub w: ParamId,
    pub cell: GruCell,
}

impl AnswerPointer {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize, rng: &mut RngState) -> Self {
        let bound = 1.0 / ((width / 2).max(1) as f64).sqrt();
        let mut m = |n: &str, rows| store.add_uniform(format!("{prefix}.{n}"), &[rows, width], bound, rng);
        let (v, w_a, w) = (m("V", width), m("W_a", width), m("w", 1));
        let b_a = store.add_zeros(format!("{prefix}.b_a"), &[width]);
        let cell = GruCell::new(store, &format!("{prefix}.cell"), width, width, rng);
        AnswerPointer {
            v,
            w_a,
            b_a,
            w,
            cell,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.v, self.w_a, self.b_a, self.w];
        p.extend(self.cell.params());
        p
    }
}

/// Start and end distributions over `M` positions, as `[M]` vectors,
/// with their logarithms for the loss.
#[derive(Clone, Copy, Debug)]
pub struct PointerOutput {
    pub start: Var,
    pub end: Var,
    pub start_log: Var,
    pub end_log: Var,
}

pub fn answer_pointer(tape: &mut Tape<'_>, ptr: &AnswerPointer, matched: Var) -> Result<PointerOutput> {
    let s = tape.shape(matched).to_vec();
    let width = ptr.cell.hidden;
    if s.len() != 2 || s[1] != width {
        return Err(Error::dim("answer_pointer", &[0, width], &s));
    }
    let m = s[0];
    let (v, w_a, b_a, w) = (
        tape.param(ptr.v)?,
        tape.param(ptr.w_a)?,
        tape.param(ptr.b_a)?,
        tape.param(ptr.w)?,
    );
    let hv = tape.matmul_t(matched, v)?;
    let mut h = tape.constant(Tensor::zeros(&[1, width]));
    let mut out = Vec::with_capacity(2);
    for k in 0..2 {
        let sh = tape.linear(h, w_a, Some(b_a))?;
        let sh = tape.gather(sh, &vec![0; m])?;
        let f = tape.add(hv, sh)?;
        let f = tape.tanh(f)?;
        let scores = tape.matmul_t(f, w)?;
        let scores = tape.reshape(scores, &[m])?;
        let p = tape.softmax(scores, 0)?;
        let logp = tape.log_softmax(scores, 0)?;
        if k == 0 {
            let col = tape.reshape(p, &[1, m])?;
            let ctx = tape.matmul(col, matched)?;
            h = gru_step(tape, &ptr.cell, h, ctx)?;
        }
        out.push((p, logp));
    }
    Ok(PointerOutput {
        start: out[0].0,
        start_log: out[0].1,
        end: out[1].0,
        end_log: out[1].1,
    })
}

/// `-log p_start[start] - log p_end[end]` from `[M]` log-distributions.
pub fn span_loss(tape: &mut Tape<'_>, start_log: Var, end_log: Var, start: usize, end: usize) -> Result<Var> {
    let ls = tape.gather(start_log, &[start])?;
    let le = tape.gather(end_log, &[end])?;
    let both = tape.add(ls, le)?;
    let nll = tape.affine(both, -1.0, 0.0)?;
    tape.sum(nll, 0)
}

/// Best `(start, end)` under `p_start[s] · p_end[e]` with
/// `s ≤ e ≤ s + max_len`. Ties go to the smaller start, then the smaller
/// end.
pub fn decode_span(p_start: &[f64], p_end: &[f64], max_len: usize) -> (usize, usize) {
    let m = p_start.len().min(p_end.len());
    let mut best = (0, 0);
    let mut best_score = f64::NEG_INFINITY;
    for s in 0..m {
        for e in s..m.min(s + max_len + 1) {
            let score = p_start[s] * p_end[e];
            if score > best_score {
                best_score = score;
                best = (s, e);
            }
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpanNet {
    pub embedding: ParamId,
    pub chars: Option<super::CharComposer>,
    pub passage_sentence: BiGruLayer,
    pub passage_word: BiGruLayer,
    pub question: BiGruLayer,
    pub gate: GateStack,
    pub matcher: MatchAttention,
    pub pointer: AnswerPointer,
    pub max_span_len: usize,
}

impl SpanNet {
    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.embedding];
        if let Some(c) = &self.chars {
            p.extend(c.params());
        }
        p.extend(self.passage_sentence.params());
        p.extend(self.passage_word.params());
        p.extend(self.question.params());
        p.extend(self.gate.params());
        p.extend(self.matcher.params());
        p.extend(self.pointer.params());
        p
    }
}

pub fn span_forward(
    tape: &mut Tape<'_>,
    net: &SpanNet,
    vocab: &crate::text::Vocabulary,
    ex: &SpanExample,
    mode: &mut RunMode,
) -> Result<Forward> {
    let passage = &ex.passage;
    let e_p = embed(tape, net.embedding, net.chars.as_ref(), vocab, passage.flat_tokens())?;
    let e_q = embed(tape, net.embedding, net.chars.as_ref(), vocab, ex.question.tokens())?;
    let e_ps = mode.dropout(tape, e_p)?;
    let e_pw = mode.dropout(tape, e_p)?;
    let e_q = mode.dropout(tape, e_q)?;

    let h_p = bigru_forward(tape, &net.passage_sentence, e_ps)?;
    let (h_q, q_pooled) = encode_question(tape, &net.question, e_q)?;
    let v = bigru_forward(tape, &net.passage_word, e_pw)?;
    let h_p = mode.dropout(tape, h_p)?;
    let v = mode.dropout(tape, v)?;

    let sentences = encode_sentences(tape, h_p, passage, &net.gate.encoder)?;
    let h_tilde = sentence_inputs(tape, &net.gate.matching, sentences, q_pooled)?;
    let (u, f) = apply_sentence_gate(tape, passage, v, h_tilde, &net.gate.combiner)?;
    let u = mode.dropout(tape, u)?;

    let matched = match_attention_layer(tape, &net.matcher, u, h_q)?.matched;
    let ptr = answer_pointer(tape, &net.pointer, matched)?;

    let m = passage.num_words();
    if ex.answer_start > ex.answer_end || ex.answer_end >= m {
        return Err(Error::Index {
            op: "span_forward",
            index: ex.answer_end,
            extent: m,
        });
    }
    let loss = span_loss(tape, ptr.start_log, ptr.end_log, ex.answer_start, ex.answer_end)?;

    let (start, end) = decode_span(
        tape.value(ptr.start).data(),
        tape.value(ptr.end).data(),
        net.max_span_len,
    );
    let trace = match (mode.trace, f) {
        (true, Some(f)) => Some(GateTrace {
            hops: vec![tape.value(f).clone()],
        }),
        _ => None,
    };
    Ok(Forward {
        loss,
        prediction: Prediction::Span { start, end },
        trace,
    })
}
