//! Question-aware sentence matching and word-level sentence gating.
//!
//! Everything works on row-stacked matrices: a passage of `M` words has
//! `[M, 2d]` word states, `[L, 2d]` sentence vectors and, after matching,
//! `[L, 8d]` question-aware sentence vectors.

use serde::{Deserialize, Serialize};

use crate::autodiff::{RngState, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::text::Passage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchingConfig {
    pub use_matching: bool,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        MatchingConfig { use_matching: true }
    }
}

impl MatchingConfig {
    /// Width `k` of the sentence input seen by the gate.
    pub fn gate_input_dim(&self, width: usize) -> usize {
        if self.use_matching {
            4 * width
        } else {
            width
        }
    }
}

/// `[p ∥ q ∥ p⊙q ∥ |p−q|]` for every row of `p` (`[L, 2d]`) against the
/// single question row `q` (`[1, 2d]`).
pub fn match_sentence(tape: &mut Tape<'_>, p: Var, q: Var) -> Result<Var> {
    let (ps, qs) = (tape.shape(p).to_vec(), tape.shape(q).to_vec());
    if ps.len() != 2 || qs.len() != 2 || qs[0] != 1 || ps[1] != qs[1] {
        return Err(Error::dim("match_sentence", &ps, &qs));
    }
    let q = if ps[0] == 1 { q } else { tape.gather(q, &vec![0; ps[0]])? };
    let prod = tape.mul(p, q)?;
    let diff = tape.sub(p, q)?;
    let diff = tape.abs(diff)?;
    tape.concat(&[p, q, prod, diff], 1)
}

/// Sentence inputs for the gate: matched against the question, or the
/// raw sentence vectors when matching is disabled.
pub fn sentence_inputs(
    tape: &mut Tape<'_>,
    cfg: &MatchingConfig,
    sentences: Var,
    question: Var,
) -> Result<Var> {
    if cfg.use_matching {
        match_sentence(tape, sentences, question)
    } else {
        Ok(sentences)
    }
}

/// Vector gate weights. `W_z1`, `W_f1` are `2d × k`; `W_z2`, `W_f2` are
/// `2d × 2d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateParams {
    pub k: usize,
    pub width: usize,
    pub w_z1: ParamId,
    pub w_z2: ParamId,
    pub b_z: ParamId,
    pub w_f1: ParamId,
    pub w_f2: ParamId,
    pub b_f: ParamId,
}

fn init_bound(width: usize) -> f64 {
    1.0 / ((width / 2).max(1) as f64).sqrt()
}

impl GateParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        k: usize,
        width: usize,
        rng: &mut RngState,
    ) -> Self {
        let bound = init_bound(width);
        let mut w = |n: &str, cols| store.add_uniform(format!("{prefix}.{n}"), &[width, cols], bound, rng);
        let (w_z1, w_z2) = (w("W_z1", k), w("W_z2", width));
        let (w_f1, w_f2) = (w("W_f1", k), w("W_f2", width));
        let b_z = store.add_zeros(format!("{prefix}.b_z"), &[width]);
        let b_f = store.add_zeros(format!("{prefix}.b_f"), &[width]);
        GateParams {
            k,
            width,
            w_z1,
            w_z2,
            b_z,
            w_f1,
            w_f2,
            b_f,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w_z1, self.w_z2, self.b_z, self.w_f1, self.w_f2, self.b_f]
    }
}

/// Same `z` branch as [`GateParams`], but the gate is one scalar per word:
/// `w_f1` is `1 × k`, `w_f2` is `1 × 2d`, `b_f` has one entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScalarGateParams {
    pub k: usize,
    pub width: usize,
    pub w_z1: ParamId,
    pub w_z2: ParamId,
    pub b_z: ParamId,
    pub w_f1: ParamId,
    pub w_f2: ParamId,
    pub b_f: ParamId,
}

impl ScalarGateParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        k: usize,
        width: usize,
        rng: &mut RngState,
    ) -> Self {
        let bound = init_bound(width);
        let mut w = |n: &str, rows, cols| {
            store.add_uniform(format!("{prefix}.{n}"), &[rows, cols], bound, rng)
        };
        let (w_z1, w_z2) = (w("W_z1", width, k), w("W_z2", width, width));
        let (w_f1, w_f2) = (w("w_f1", 1, k), w("w_f2", 1, width));
        let b_z = store.add_zeros(format!("{prefix}.b_z"), &[width]);
        let b_f = store.add_zeros(format!("{prefix}.b_f"), &[1]);
        ScalarGateParams {
            k,
            width,
            w_z1,
            w_z2,
            b_z,
            w_f1,
            w_f2,
            b_f,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w_z1, self.w_z2, self.b_z, self.w_f1, self.w_f2, self.b_f]
    }
}

/// Linear map from `[v ∥ h]` (`2d + k`) back to `2d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConcatProjection {
    pub k: usize,
    pub width: usize,
    pub w: ParamId,
    pub b: ParamId,
}

impl ConcatProjection {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        k: usize,
        width: usize,
        rng: &mut RngState,
    ) -> Self {
        let w = store.add_uniform(format!("{prefix}.W_c"), &[width, width + k], init_bound(width), rng);
        let b = store.add_zeros(format!("{prefix}.b_c"), &[width]);
        ConcatProjection { k, width, w, b }
    }

    pub fn input_dim(&self) -> usize {
        self.width + self.k
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

/// Configuration-level name of a combiner.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combiner {
    Concatenation,
    ScalarGate,
    #[default]
    VectorGate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CombinerKind {
    Concatenation(ConcatProjection),
    ScalarGate(ScalarGateParams),
    VectorGate(GateParams),
}

impl CombinerKind {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        combiner: Combiner,
        k: usize,
        width: usize,
        rng: &mut RngState,
    ) -> Self {
        match combiner {
            Combiner::Concatenation => {
                CombinerKind::Concatenation(ConcatProjection::new(store, prefix, k, width, rng))
            }
            Combiner::ScalarGate => {
                CombinerKind::ScalarGate(ScalarGateParams::new(store, prefix, k, width, rng))
            }
            Combiner::VectorGate => {
                CombinerKind::VectorGate(GateParams::new(store, prefix, k, width, rng))
            }
        }
    }

    pub fn combiner(&self) -> Combiner {
        match self {
            CombinerKind::Concatenation(_) => Combiner::Concatenation,
            CombinerKind::ScalarGate(_) => Combiner::ScalarGate,
            CombinerKind::VectorGate(_) => Combiner::VectorGate,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match self {
            CombinerKind::Concatenation(p) => p.params(),
            CombinerKind::ScalarGate(p) => p.params(),
            CombinerKind::VectorGate(p) => p.params(),
        }
    }

    fn dims(&self) -> (usize, usize) {
        match self {
            CombinerKind::Concatenation(p) => (p.k, p.width),
            CombinerKind::ScalarGate(p) => (p.k, p.width),
            CombinerKind::VectorGate(p) => (p.k, p.width),
        }
    }
}

/// Output of gating a block of words; every matrix is `[M, 2d]`.
#[derive(Clone, Copy, Debug)]
pub struct Gated {
    pub u: Var,
    pub f: Var,
    pub z: Var,
}

fn check_rows(tape: &Tape<'_>, h: Var, v: Var, k: usize, width: usize, op: &'static str) -> Result<()> {
    let (hs, vs) = (tape.shape(h), tape.shape(v));
    if hs.len() != 2 || vs.len() != 2 || hs[1] != k || vs[1] != width || hs[0] != vs[0] {
        return Err(Error::dim(op, hs, vs));
    }
    Ok(())
}

fn two_linear(
    tape: &mut Tape<'_>,
    h: Var,
    v: Var,
    w1: ParamId,
    w2: ParamId,
    b: ParamId,
) -> Result<Var> {
    let (w1, w2, b) = (tape.param(w1)?, tape.param(w2)?, tape.param(b)?);
    let a = tape.matmul_t(h, w1)?;
    let c = tape.matmul_t(v, w2)?;
    let s = tape.add(a, c)?;
    tape.add_row(s, b)
}

fn mix(tape: &mut Tape<'_>, f: Var, v: Var, z: Var) -> Result<Var> {
    let keep = tape.affine(f, -1.0, 1.0)?;
    let a = tape.mul(keep, v)?;
    let b = tape.mul(f, z)?;
    tape.add(a, b)
}

/// `z = tanh(W_z1 h̃ + W_z2 v + b_z)`, `f = σ(W_f1 h̃ + W_f2 v + b_f)`,
/// `u = (1−f)⊙v + f⊙z`, row by row.
pub fn gate_rows(tape: &mut Tape<'_>, params: &GateParams, h: Var, v: Var) -> Result<Gated> {
    check_rows(tape, h, v, params.k, params.width, "gate_word")?;
    let z = two_linear(tape, h, v, params.w_z1, params.w_z2, params.b_z)?;
    let z = tape.tanh(z)?;
    let f = two_linear(tape, h, v, params.w_f1, params.w_f2, params.b_f)?;
    let f = tape.sigmoid(f)?;
    let u = mix(tape, f, v, z)?;
    Ok(Gated { u, f, z })
}

/// Single-word form of [`gate_rows`]: `h̃` is `[1, k]`, `v` is `[1, 2d]`.
pub fn gate_word(tape: &mut Tape<'_>, params: &GateParams, h: Var, v: Var) -> Result<Gated> {
    gate_rows(tape, params, h, v)
}

fn scalar_gate_rows(
    tape: &mut Tape<'_>,
    params: &ScalarGateParams,
    h: Var,
    v: Var,
) -> Result<Gated> {
    check_rows(tape, h, v, params.k, params.width, "scalar_gate")?;
    let z = two_linear(tape, h, v, params.w_z1, params.w_z2, params.b_z)?;
    let z = tape.tanh(z)?;
    let f = two_linear(tape, h, v, params.w_f1, params.w_f2, params.b_f)?;
    let f = tape.sigmoid(f)?;
    let ones = tape.constant(Tensor::full(&[1, params.width], 1.0));
    let f = tape.matmul(f, ones)?;
    let u = mix(tape, f, v, z)?;
    Ok(Gated { u, f, z })
}

/// `[v ∥ h]` before the concatenation projection.
pub fn concat_features(tape: &mut Tape<'_>, h: Var, v: Var) -> Result<Var> {
    tape.concat(&[v, h], 1)
}

/// Combines word rows `v` (`[M, 2d]`) with their sentence inputs `h`
/// (`[M, k]`). Returns the combined rows and, for the gated variants,
/// the `[M, 2d]` gate values.
pub fn combine(tape: &mut Tape<'_>, kind: &CombinerKind, h: Var, v: Var) -> Result<(Var, Option<Var>)> {
    match kind {
        CombinerKind::Concatenation(p) => {
            check_rows(tape, h, v, p.k, p.width, "combine")?;
            let x = concat_features(tape, h, v)?;
            let (w, b) = (tape.param(p.w)?, tape.param(p.b)?);
            Ok((tape.linear(x, w, Some(b))?, None))
        }
        CombinerKind::ScalarGate(p) => {
            let g = scalar_gate_rows(tape, p, h, v)?;
            Ok((g.u, Some(g.f)))
        }
        CombinerKind::VectorGate(p) => {
            let g = gate_rows(tape, p, h, v)?;
            Ok((g.u, Some(g.f)))
        }
    }
}

/// Gates every passage word against its own sentence's input row.
/// `sentences` is `[L, k]`, `words` is `[M, 2d]`.
pub fn apply_sentence_gate(
    tape: &mut Tape<'_>,
    passage: &Passage,
    words: Var,
    sentences: Var,
    kind: &CombinerKind,
) -> Result<(Var, Option<Var>)> {
    let (ws, ss) = (tape.shape(words).to_vec(), tape.shape(sentences).to_vec());
    if ws.len() != 2 || ws[0] != passage.num_words() || ss.len() != 2 || ss[0] != passage.num_sentences() {
        return Err(Error::Contract(format!(
            "gate inputs {ws:?} / {ss:?} do not align with a passage of {} words in {} sentences",
            passage.num_words(),
            passage.num_sentences()
        )));
    }
    let (k, width) = kind.dims();
    if ss[1] != k || ws[1] != width {
        return Err(Error::dim("apply_sentence_gate", &ss, &ws));
    }
    let per_word = tape.gather(sentences, &passage.sentence_index_per_word())?;
    combine(tape, kind, per_word, words)
}

#[cfg(test)]
mod tests;
