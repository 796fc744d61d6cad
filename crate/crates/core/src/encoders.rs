//! GRU sequence encoders and sentence pooling strategies.
//!
//! Vectors on the tape are `[1, C]` rows and sequences are `[T, C]`
//! matrices, so every projection is a single `matmul_t`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{RngState, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::text::Passage;

/// Standard update/reset GRU. `W_*` are `d × D_in`, `U_*` are `d × d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GruCell {
    pub input_dim: usize,
    pub hidden: usize,
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
}

impl GruCell {
    /// Registers the cell's parameters as `{prefix}.W_z` and so on.
    /// Weights are uniform(-1/√d, 1/√d), biases zero.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut RngState,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut w = |n: &str, cols: usize| {
            store.add_uniform(format!("{prefix}.{n}"), &[hidden, cols], bound, rng)
        };
        let (w_z, u_z) = (w("W_z", input_dim), w("U_z", hidden));
        let (w_r, u_r) = (w("W_r", input_dim), w("U_r", hidden));
        let (w_h, u_h) = (w("W_h", input_dim), w("U_h", hidden));
        let b_z = store.add_zeros(format!("{prefix}.b_z"), &[hidden]);
        let b_r = store.add_zeros(format!("{prefix}.b_r"), &[hidden]);
        let b_h = store.add_zeros(format!("{prefix}.b_h"), &[hidden]);
        GruCell {
            input_dim,
            hidden,
            w_z,
            u_z,
            b_z,
            w_r,
            u_r,
            b_r,
            w_h,
            u_h,
            b_h,
        }
    }

    pub fn params(&self) -> [ParamId; 9] {
        [
            self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r, self.w_h, self.u_h,
            self.b_h,
        ]
    }
}

fn expect_row(tape: &Tape<'_>, v: Var, cols: usize, op: &'static str) -> Result<()> {
    let s = tape.shape(v);
    if s != [1, cols] {
        return Err(Error::dim(op, &[1, cols], s));
    }
    Ok(())
}

/// One recurrence step given the input projections already computed
/// (`W_* x + b_*` as `[1, d]` rows).
fn step_projected(
    tape: &mut Tape<'_>,
    cell: &GruCell,
    h: Var,
    xz: Var,
    xr: Var,
    xh: Var,
) -> Result<Var> {
    let u_z = tape.param(cell.u_z)?;
    let u_r = tape.param(cell.u_r)?;
    let u_h = tape.param(cell.u_h)?;
    let hz = tape.matmul_t(h, u_z)?;
    let z = tape.add(xz, hz)?;
    let z = tape.sigmoid(z)?;
    let hr = tape.matmul_t(h, u_r)?;
    let r = tape.add(xr, hr)?;
    let r = tape.sigmoid(r)?;
    let rh = tape.mul(r, h)?;
    let cand = tape.matmul_t(rh, u_h)?;
    let cand = tape.add(xh, cand)?;
    let cand = tape.tanh(cand)?;
    let keep = tape.affine(z, -1.0, 1.0)?;
    let carried = tape.mul(keep, h)?;
    let fresh = tape.mul(z, cand)?;
    tape.add(carried, fresh)
}

/// `h' = (1-z)⊙h + z⊙h̃` for a single `[1, d]` state and `[1, D_in]` input.
pub fn gru_step(tape: &mut Tape<'_>, cell: &GruCell, h_prev: Var, x: Var) -> Result<Var> {
    expect_row(tape, h_prev, cell.hidden, "gru_step")?;
    expect_row(tape, x, cell.input_dim, "gru_step")?;
    let proj = |tape: &mut Tape<'_>, w: ParamId, b: ParamId| -> Result<Var> {
        let (w, b) = (tape.param(w)?, tape.param(b)?);
        tape.linear(x, w, Some(b))
    };
    let xz = proj(tape, cell.w_z, cell.b_z)?;
    let xr = proj(tape, cell.w_r, cell.b_r)?;
    let xh = proj(tape, cell.w_h, cell.b_h)?;
    step_projected(tape, cell, h_prev, xz, xr, xh)
}

/// Runs a cell over the rows of `xs` (`[T, D_in]`) from a zero state.
/// Returns the `[T, d]` states in input order; with `reverse` the cell
/// reads the sequence back to front, so row `t` holds the state after
/// consuming rows `t..T`.
pub fn gru_run(tape: &mut Tape<'_>, cell: &GruCell, xs: Var, reverse: bool) -> Result<Var> {
    let s = tape.shape(xs).to_vec();
    if s.len() != 2 || s[1] != cell.input_dim {
        return Err(Error::dim("gru_run", &[0, cell.input_dim], &s));
    }
    let steps = s[0];
    let proj = |tape: &mut Tape<'_>, w: ParamId, b: ParamId| -> Result<Var> {
        let (w, b) = (tape.param(w)?, tape.param(b)?);
        tape.linear(xs, w, Some(b))
    };
    let xz = proj(tape, cell.w_z, cell.b_z)?;
    let xr = proj(tape, cell.w_r, cell.b_r)?;
    let xh = proj(tape, cell.w_h, cell.b_h)?;

    let mut h = tape.constant(Tensor::zeros(&[1, cell.hidden]));
    let mut states = vec![h; steps];
    for k in 0..steps {
        let t = if reverse { steps - 1 - k } else { k };
        let (z, r, c) = (tape.row(xz, t)?, tape.row(xr, t)?, tape.row(xh, t)?);
        h = step_projected(tape, cell, h, z, r, c)?;
        states[t] = h;
    }
    tape.concat(&states, 0)
}

/// Two independent GRU cells read in opposite directions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BiGruLayer {
    pub forward: GruCell,
    pub backward: GruCell,
}

impl BiGruLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut RngState,
    ) -> Self {
        let forward = GruCell::new(store, &format!("{prefix}.fwd"), input_dim, hidden, rng);
        let backward = GruCell::new(store, &format!("{prefix}.bwd"), input_dim, hidden, rng);
        BiGruLayer { forward, backward }
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden
    }

    pub fn output_dim(&self) -> usize {
        2 * self.forward.hidden
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.forward.params().to_vec();
        p.extend(self.backward.params());
        p
    }
}

/// `[T, D_in]` → `[T, 2d]`: row `t` is `[forward state ∥ backward state]`.
pub fn bigru_forward(tape: &mut Tape<'_>, layer: &BiGruLayer, xs: Var) -> Result<Var> {
    if tape.shape(xs).first() == Some(&0) || tape.shape(xs).len() != 2 {
        return Err(Error::Contract("BiGRU input must be a nonempty sequence".into()));
    }
    let f = gru_run(tape, &layer.forward, xs, false)?;
    let b = gru_run(tape, &layer.backward, xs, true)?;
    tape.concat(&[f, b], 1)
}

/// Pooled question: `(per-word outputs [N, 2d], mean over words [1, 2d])`.
pub fn encode_question(tape: &mut Tape<'_>, layer: &BiGruLayer, xs: Var) -> Result<(Var, Var)> {
    let seq = bigru_forward(tape, layer, xs)?;
    let pooled = tape.mean(seq, 0)?;
    let pooled = tape.reshape(pooled, &[1, layer.output_dim()])?;
    Ok((seq, pooled))
}

/// `α = softmax(w_aᵀ tanh(W_a H))` parameters: `W_a` is `d_a × 2d`,
/// `w_a` is stored as a `1 × d_a` row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InnerAttention {
    pub w_a: ParamId,
    pub v_a: ParamId,
}

impl InnerAttention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        attn_dim: usize,
        rng: &mut RngState,
    ) -> Self {
        let bound = 1.0 / (attn_dim as f64).sqrt();
        let w_a = store.add_uniform(format!("{prefix}.W_a"), &[attn_dim, input_dim], bound, rng);
        let v_a = store.add_uniform(format!("{prefix}.w_a"), &[1, attn_dim], bound, rng);
        InnerAttention { w_a, v_a }
    }
}

/// Configuration-level name of a sentence encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SentenceEncoding {
    #[default]
    AveragePooling,
    BigruLast,
    MaxPooling,
    InnerAttention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SentenceEncoderKind {
    AveragePooling,
    BiGruLast,
    MaxPooling,
    InnerAttention(Option<InnerAttention>),
}

impl SentenceEncoderKind {
    pub fn encoding(&self) -> SentenceEncoding {
        match self {
            SentenceEncoderKind::AveragePooling => SentenceEncoding::AveragePooling,
            SentenceEncoderKind::BiGruLast => SentenceEncoding::BigruLast,
            SentenceEncoderKind::MaxPooling => SentenceEncoding::MaxPooling,
            SentenceEncoderKind::InnerAttention(_) => SentenceEncoding::InnerAttention,
        }
    }
}

/// Pools the `[M, 2d]` word states of each sentence into an `[L, 2d]`
/// matrix of sentence vectors.
pub fn encode_sentences(
    tape: &mut Tape<'_>,
    hiddens: Var,
    passage: &Passage,
    kind: &SentenceEncoderKind,
) -> Result<Var> {
    let s = tape.shape(hiddens).to_vec();
    if s.len() != 2 || s[0] != passage.num_words() {
        return Err(Error::Contract(format!(
            "passage hiddens {:?} do not align with {} words",
            s,
            passage.num_words()
        )));
    }
    let width = s[1];
    let l = passage.num_sentences();
    match kind {
        SentenceEncoderKind::AveragePooling => {
            let mut avg = vec![0.0; l * passage.num_words()];
            for i in 0..l {
                let range = passage.sentence_range(i);
                let w = 1.0 / range.len() as f64;
                for t in range {
                    avg[i * passage.num_words() + t] = w;
                }
            }
            let avg = tape.constant(Tensor::new(vec![l, passage.num_words()], avg)?);
            tape.matmul(avg, hiddens)
        }
        SentenceEncoderKind::MaxPooling => {
            let mut rows = Vec::with_capacity(l);
            for i in 0..l {
                let range = passage.sentence_range(i);
                let block = tape.slice(hiddens, 0, range.start, range.end)?;
                let m = tape.max(block, 0)?;
                rows.push(tape.reshape(m, &[1, width])?);
            }
            tape.concat(&rows, 0)
        }
        SentenceEncoderKind::BiGruLast => {
            if width % 2 != 0 {
                return Err(Error::Contract(format!("BiGRU width {width} is odd")));
            }
            let half = width / 2;
            let lasts: Vec<usize> = (0..l).map(|i| passage.sentence_range(i).end - 1).collect();
            let firsts: Vec<usize> = (0..l).map(|i| passage.sentence_range(i).start).collect();
            let f = tape.gather(hiddens, &lasts)?;
            let f = tape.slice(f, 1, 0, half)?;
            let b = tape.gather(hiddens, &firsts)?;
            let b = tape.slice(b, 1, half, width)?;
            tape.concat(&[f, b], 1)
        }
        SentenceEncoderKind::InnerAttention(params) => {
            let p = params.ok_or_else(|| {
                Error::Config("inner attention encoder has no attention parameters".into())
            })?;
            let w_a = tape.param(p.w_a)?;
            let v_a = tape.param(p.v_a)?;
            let proj = tape.matmul_t(hiddens, w_a)?;
            let proj = tape.tanh(proj)?;
            let scores = tape.matmul_t(proj, v_a)?;
            let mut rows = Vec::with_capacity(l);
            for i in 0..l {
                let range = passage.sentence_range(i);
                let sc = tape.slice(scores, 0, range.start, range.end)?;
                let alpha = tape.softmax(sc, 0)?;
                let alpha = tape.transpose(alpha)?;
                let block = tape.slice(hiddens, 0, range.start, range.end)?;
                rows.push(tape.matmul(alpha, block)?);
            }
            tape.concat(&rows, 0)
        }
    }
}

#[cfg(test)]
mod tests;
