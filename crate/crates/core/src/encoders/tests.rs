use super::*;
use crate::autodiff::grad_check;
use crate::error::Error;

fn rand_tensor(shape: &[usize], rng: &mut RngState, bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(-bound, bound)).collect())
        .unwrap()
}

fn setup(d_in: usize, d: usize, seed: u64) -> (ParamStore, BiGruLayer) {
    let mut rng = RngState::new(seed);
    let mut store = ParamStore::new();
    let layer = BiGruLayer::new(&mut store, "enc", d_in, d, &mut rng);
    // nonzero biases so the bias paths are exercised
    for id in layer.params() {
        if store.get(id).value.rank() == 1 {
            let n = store.value(id).len();
            *store.value_mut(id) = rand_tensor(&[n], &mut rng, 0.5);
        }
    }
    (store, layer)
}

fn matvec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|r| m.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Hand evaluation of one step, returning `(h', h̃)`.
fn plain_step(store: &ParamStore, c: &GruCell, h: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let v = |id| store.value(id);
    let lin = |w, u, b, hv: &[f64]| -> Vec<f64> {
        let a = matvec(v(w), x);
        let bb = matvec(v(u), hv);
        a.iter()
            .zip(&bb)
            .zip(v(b).data())
            .map(|((p, q), r)| p + q + r)
            .collect()
    };
    let z: Vec<f64> = lin(c.w_z, c.u_z, c.b_z, h).into_iter().map(sig).collect();
    let r: Vec<f64> = lin(c.w_r, c.u_r, c.b_r, h).into_iter().map(sig).collect();
    let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    let cand: Vec<f64> = lin(c.w_h, c.u_h, c.b_h, &rh).into_iter().map(f64::tanh).collect();
    let next = (0..h.len())
        .map(|i| (1.0 - z[i]) * h[i] + z[i] * cand[i])
        .collect();
    (next, cand)
}

fn row(values: &[f64]) -> Tensor {
    Tensor::matrix(1, values.len(), values.to_vec()).unwrap()
}

fn passage(lens: &[usize]) -> Passage {
    let sents = lens
        .iter()
        .enumerate()
        .map(|(i, &n)| (0..n).map(|j| format!("w{i}_{j}")).collect())
        .collect();
    Passage::new(sents).unwrap()
}

#[test]
fn zero_cell_stays_at_zero() {
    let (mut store, layer) = setup(2, 3, 1);
    for id in layer.params() {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::zeros(&shape);
    }
    let mut t = Tape::with_params(&store);
    let h = t.constant(Tensor::zeros(&[1, 3]));
    let x = t.constant(Tensor::zeros(&[1, 2]));
    let h2 = gru_step(&mut t, &layer.forward, h, x).unwrap();
    assert_eq!(t.value(h2).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn closed_update_gate_carries_state() {
    let (mut store, layer) = setup(2, 3, 2);
    *store.value_mut(layer.forward.b_z) = Tensor::full(&[3], -100.0);
    let mut t = Tape::with_params(&store);
    let h = t.constant(row(&[0.3, -0.7, 1.1]));
    let x = t.constant(row(&[2.0, -1.0]));
    let h2 = gru_step(&mut t, &layer.forward, h, x).unwrap();
    for (a, b) in t.value(h2).data().iter().zip([0.3, -0.7, 1.1]) {
        assert!((a - b).abs() < 1e-15, "{a} {b}");
    }
}

#[test]
fn step_matches_hand_formula() {
    let (store, layer) = setup(4, 3, 3);
    let mut rng = RngState::new(33);
    for _ in 0..20 {
        let h = rand_tensor(&[3], &mut rng, 1.0);
        let x = rand_tensor(&[4], &mut rng, 1.0);
        let (want, _) = plain_step(&store, &layer.forward, h.data(), x.data());
        let mut t = Tape::with_params(&store);
        let hv = t.constant(row(h.data()));
        let xv = t.constant(row(x.data()));
        let got = gru_step(&mut t, &layer.forward, hv, xv).unwrap();
        for (a, b) in t.value(got).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn step_is_convex_between_state_and_candidate() {
    let (store, layer) = setup(3, 4, 4);
    let mut rng = RngState::new(44);
    for _ in 0..500 {
        let h = rand_tensor(&[4], &mut rng, 2.0);
        let x = rand_tensor(&[3], &mut rng, 2.0);
        let (_, cand) = plain_step(&store, &layer.forward, h.data(), x.data());
        let mut t = Tape::with_params(&store);
        let hv = t.constant(row(h.data()));
        let xv = t.constant(row(x.data()));
        let got = gru_step(&mut t, &layer.forward, hv, xv).unwrap();
        for ((&n, &o), &c) in t.value(got).data().iter().zip(h.data()).zip(&cand) {
            assert!(n >= o.min(c) && n <= o.max(c), "{n} not between {o} and {c}");
        }
    }
}

#[test]
fn step_rejects_wrong_dims() {
    let (store, layer) = setup(2, 3, 5);
    let mut t = Tape::with_params(&store);
    let h = t.constant(Tensor::zeros(&[1, 2]));
    let x = t.constant(Tensor::zeros(&[1, 2]));
    assert!(matches!(
        gru_step(&mut t, &layer.forward, h, x),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn single_element_sequence() {
    let (store, layer) = setup(2, 3, 6);
    let mut t = Tape::with_params(&store);
    let x = t.constant(row(&[0.4, -1.2]));
    let out = bigru_forward(&mut t, &layer, x).unwrap();
    let zero = t.constant(Tensor::zeros(&[1, 3]));
    let f = gru_step(&mut t, &layer.forward, zero, x).unwrap();
    let b = gru_step(&mut t, &layer.backward, zero, x).unwrap();
    let mut want = t.value(f).data().to_vec();
    want.extend_from_slice(t.value(b).data());
    assert_eq!(t.value(out).shape(), &[1, 6]);
    for (a, b) in t.value(out).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn palindrome_with_shared_cells_mirrors() {
    let (store, layer) = setup(3, 2, 7);
    let shared = BiGruLayer {
        forward: layer.forward,
        backward: layer.forward,
    };
    let mut rng = RngState::new(70);
    let half: Vec<Tensor> = (0..3).map(|_| rand_tensor(&[3], &mut rng, 1.0)).collect();
    let seq: Vec<Vec<f64>> = half
        .iter()
        .chain(half.iter().rev())
        .map(|t| t.data().to_vec())
        .collect();
    let mut t = Tape::with_params(&store);
    let x = t.constant(Tensor::from_rows(&seq).unwrap());
    let out = bigru_forward(&mut t, &shared, x).unwrap();
    let o = t.value(out);
    let n = seq.len();
    for i in 0..n {
        let a = o.row(i);
        let b = o.row(n - 1 - i);
        assert_eq!(&a[..2], &b[2..]);
        assert_eq!(&a[2..], &b[..2]);
    }
}

#[test]
fn vectorized_run_matches_stepwise_loop() {
    let (store, layer) = setup(4, 3, 8);
    let mut rng = RngState::new(80);
    let xs = rand_tensor(&[7, 4], &mut rng, 1.0);
    let mut t = Tape::with_params(&store);
    let x = t.constant(xs.clone());
    let out = bigru_forward(&mut t, &layer, x).unwrap();
    let got = t.value(out).clone();

    let mut fwd = vec![vec![0.0; 3]; 7];
    let mut h = vec![0.0; 3];
    for s in 0..7 {
        h = plain_step(&store, &layer.forward, &h, xs.row(s)).0;
        fwd[s] = h.clone();
    }
    let mut bwd = vec![vec![0.0; 3]; 7];
    let mut h = vec![0.0; 3];
    for s in (0..7).rev() {
        h = plain_step(&store, &layer.backward, &h, xs.row(s)).0;
        bwd[s] = h.clone();
    }
    for s in 0..7 {
        let want: Vec<f64> = fwd[s].iter().chain(&bwd[s]).copied().collect();
        for (a, b) in got.row(s).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn empty_sequence_is_rejected() {
    assert!(Tensor::new(vec![0, 3], vec![]).is_err());
}

fn encode_plain(rows: &[Vec<f64>], lens: &[usize], kind: &SentenceEncoderKind, store: &ParamStore) -> Tensor {
    let p = passage(lens);
    let mut t = Tape::with_params(store);
    let h = t.constant(Tensor::from_rows(rows).unwrap());
    let s = encode_sentences(&mut t, h, &p, kind).unwrap();
    t.value(s).clone()
}

#[test]
fn pooling_identical_vectors() {
    let store = ParamStore::new();
    let rows = vec![vec![0.25, -3.0, 7.5, 1.0]; 3];
    for kind in [SentenceEncoderKind::AveragePooling, SentenceEncoderKind::MaxPooling] {
        let s = encode_plain(&rows, &[3], &kind, &store);
        assert_eq!(s.data(), &rows[0][..]);
    }
}

#[test]
fn average_of_two_words() {
    let store = ParamStore::new();
    let s = encode_plain(
        &[vec![1.0, 0.0], vec![0.0, 1.0]],
        &[2],
        &SentenceEncoderKind::AveragePooling,
        &store,
    );
    assert_eq!(s.data(), &[0.5, 0.5]);
}

#[test]
fn max_pooling_per_dimension() {
    let store = ParamStore::new();
    let rows = vec![
        vec![1.0, -2.0],
        vec![0.5, 3.0],
        vec![-1.0, -1.0],
        vec![4.0, 0.0],
        vec![-9.0, -0.5],
    ];
    let s = encode_plain(&rows, &[2, 3], &SentenceEncoderKind::MaxPooling, &store);
    assert_eq!(s.data(), &[1.0, 3.0, 4.0, 0.0]);
}

#[test]
fn bigru_last_is_sentence_local() {
    let store = ParamStore::new();
    let rows: Vec<Vec<f64>> = (0..5)
        .map(|t| vec![t as f64, 10.0 + t as f64, 20.0 + t as f64, 30.0 + t as f64])
        .collect();
    let s = encode_plain(&rows, &[2, 3], &SentenceEncoderKind::BiGruLast, &store);
    // sentence 0: rows 0..2, sentence 1: rows 2..5
    assert_eq!(s.row(0), &[1.0, 11.0, 20.0, 30.0]);
    assert_eq!(s.row(1), &[4.0, 14.0, 22.0, 32.0]);
}

#[test]
fn flat_attention_equals_average() {
    let mut rng = RngState::new(9);
    let mut store = ParamStore::new();
    let attn = InnerAttention::new(&mut store, "att", 4, 2, &mut rng);
    *store.value_mut(attn.v_a) = Tensor::zeros(&[1, 2]);
    let rows: Vec<Vec<f64>> = (0..6).map(|_| rand_tensor(&[4], &mut rng, 1.0).data().to_vec()).collect();
    let a = encode_plain(&rows, &[1, 3, 2], &SentenceEncoderKind::InnerAttention(Some(attn)), &store);
    let b = encode_plain(&rows, &[1, 3, 2], &SentenceEncoderKind::AveragePooling, &store);
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn attention_without_parameters_is_a_config_error() {
    let store = ParamStore::new();
    let p = passage(&[2]);
    let mut t = Tape::with_params(&store);
    let h = t.constant(Tensor::zeros(&[2, 4]));
    let r = encode_sentences(&mut t, h, &p, &SentenceEncoderKind::InnerAttention(None));
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn misaligned_hiddens_are_rejected() {
    let store = ParamStore::new();
    let p = passage(&[2, 2]);
    let mut t = Tape::with_params(&store);
    let h = t.constant(Tensor::zeros(&[3, 4]));
    let r = encode_sentences(&mut t, h, &p, &SentenceEncoderKind::AveragePooling);
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn pooling_ignores_word_order_within_a_sentence() {
    let store = ParamStore::new();
    let mut rng = RngState::new(10);
    for _ in 0..50 {
        let rows: Vec<Vec<f64>> = (0..7).map(|_| rand_tensor(&[4], &mut rng, 3.0).data().to_vec()).collect();
        let mut shuffled = rows.clone();
        rng.shuffle(&mut shuffled[0..3]);
        rng.shuffle(&mut shuffled[3..7]);
        let lens = [3, 4];
        let a = encode_plain(&rows, &lens, &SentenceEncoderKind::MaxPooling, &store);
        let b = encode_plain(&shuffled, &lens, &SentenceEncoderKind::MaxPooling, &store);
        assert_eq!(a, b);
        let a = encode_plain(&rows, &lens, &SentenceEncoderKind::AveragePooling, &store);
        let b = encode_plain(&shuffled, &lens, &SentenceEncoderKind::AveragePooling, &store);
        assert!(a.max_abs_diff(&b) < 1e-14);
    }
}

#[test]
fn question_pooling() {
    let (store, layer) = setup(3, 2, 11);
    let mut rng = RngState::new(110);
    let mut t = Tape::with_params(&store);
    let one = t.constant(rand_tensor(&[1, 3], &mut rng, 1.0));
    let (seq, pooled) = encode_question(&mut t, &layer, one).unwrap();
    assert_eq!(t.value(seq).data(), t.value(pooled).data());

    let many = t.constant(rand_tensor(&[5, 3], &mut rng, 1.0));
    let (seq, pooled) = encode_question(&mut t, &layer, many).unwrap();
    let s = t.value(seq);
    for c in 0..4 {
        let mean = (0..5).map(|r| s.at(r, c)).sum::<f64>() / 5.0;
        assert!((mean - t.value(pooled).data()[c]).abs() < 1e-12);
    }
}

#[test]
fn constant_question_states_evolve() {
    let (mut store, layer) = setup(3, 2, 12);
    let x = Tensor::from_rows(&vec![vec![0.5, -0.5, 1.0]; 3]).unwrap();
    {
        let mut t = Tape::with_params(&store);
        let xv = t.constant(x.clone());
        let (seq, _) = encode_question(&mut t, &layer, xv).unwrap();
        let s = t.value(seq);
        assert!(s.row(0) != s.row(1) && s.row(1) != s.row(2) && s.row(0) != s.row(2));
    }
    for id in layer.params() {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::zeros(&shape);
    }
    let mut t = Tape::with_params(&store);
    let xv = t.constant(x);
    let (seq, _) = encode_question(&mut t, &layer, xv).unwrap();
    let s = t.value(seq);
    assert!(s.row(0) == s.row(1) && s.row(1) == s.row(2));
}

fn weighted_sum(t: &mut Tape<'_>, x: Var, seed: u64) -> crate::Result<Var> {
    let shape = t.shape(x).to_vec();
    let mut rng = RngState::new(seed);
    let w = t.constant(rand_tensor(&shape, &mut rng, 1.0));
    let y = t.mul(x, w)?;
    t.sum_all(y)
}

#[test]
fn encoder_gradients_check() {
    let mut rng = RngState::new(13);
    let (mut store, layer) = setup(3, 2, 13);
    let attn = InnerAttention::new(&mut store, "att", 4, 2, &mut rng);
    let xs = store.add("xs", rand_tensor(&[5, 3], &mut rng, 1.0));
    let p = passage(&[2, 3]);
    let kinds = [
        SentenceEncoderKind::AveragePooling,
        SentenceEncoderKind::MaxPooling,
        SentenceEncoderKind::BiGruLast,
        SentenceEncoderKind::InnerAttention(Some(attn)),
    ];
    let mut params = layer.params();
    params.push(xs);
    params.extend([attn.w_a, attn.v_a]);
    for kind in kinds {
        let report = grad_check(&mut store, &params, 1e-6, |t| {
            let x = t.param(xs)?;
            let h = bigru_forward(t, &layer, x)?;
            let s = encode_sentences(t, h, &p, &kind)?;
            let (_, q) = encode_question(t, &layer, x)?;
            let a = weighted_sum(t, s, 1)?;
            let b = weighted_sum(t, q, 2)?;
            t.add(a, b)
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-5, "{kind:?}: {report:?}");
    }
}
