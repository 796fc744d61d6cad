use super::*;
use crate::autodiff::grad_check;

fn rand_tensor(shape: &[usize], rng: &mut RngState, bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(-bound, bound)).collect())
        .unwrap()
}

fn row(values: &[f64]) -> Tensor {
    Tensor::matrix(1, values.len(), values.to_vec()).unwrap()
}

fn randomize(store: &mut ParamStore, ids: &[ParamId], rng: &mut RngState) {
    for &id in ids {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = rand_tensor(&shape, rng, 0.8);
    }
}

fn zero(store: &mut ParamStore, ids: &[ParamId]) {
    for &id in ids {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::zeros(&shape);
    }
}

#[test]
fn matching_blocks_for_unit_vectors() {
    let mut t = Tape::new();
    let p = t.constant(row(&[1.0, 0.0]));
    let q = t.constant(row(&[0.0, 1.0]));
    let m = match_sentence(&mut t, p, q).unwrap();
    assert_eq!(t.value(m).data(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
}

#[test]
fn matching_equal_inputs() {
    let v = [0.5, -2.0, 3.0];
    let mut t = Tape::new();
    let p = t.constant(row(&v));
    let q = t.constant(row(&v));
    let m = match_sentence(&mut t, p, q).unwrap();
    let want: Vec<f64> = v
        .iter()
        .chain(&v)
        .copied()
        .chain(v.iter().map(|x| x * x))
        .chain([0.0; 3])
        .collect();
    assert_eq!(t.value(m).data(), &want[..]);
}

#[test]
fn matching_block_identities_and_swap_symmetry() {
    let mut rng = RngState::new(1);
    for _ in 0..200 {
        let a = rand_tensor(&[6], &mut rng, 3.0);
        let b = rand_tensor(&[6], &mut rng, 3.0);
        let mut t = Tape::new();
        let (pa, pb) = (t.constant(row(a.data())), t.constant(row(b.data())));
        let ab = match_sentence(&mut t, pa, pb).unwrap();
        let ba = match_sentence(&mut t, pb, pa).unwrap();
        let (ab, ba) = (t.value(ab).data(), t.value(ba).data());
        for c in 0..6 {
            assert_eq!(ab[c], a.data()[c]);
            assert_eq!(ab[6 + c], b.data()[c]);
            assert!((ab[12 + c] - a.data()[c] * b.data()[c]).abs() <= 1e-15);
            assert!((ab[18 + c] - (a.data()[c] - b.data()[c]).abs()).abs() <= 1e-15);
            assert_eq!(ab[12 + c], ab[c] * ab[6 + c]);
            assert_eq!(ab[18 + c], (ab[c] - ab[6 + c]).abs());
        }
        assert_eq!(&ab[12..], &ba[12..]);
    }
}

#[test]
fn matching_rejects_mismatched_widths() {
    let mut t = Tape::new();
    let p = t.constant(row(&[1.0, 0.0]));
    let q = t.constant(row(&[0.0, 1.0, 2.0]));
    assert!(matches!(match_sentence(&mut t, p, q), Err(Error::Dimension { .. })));
}

#[test]
fn matching_many_sentences_against_one_question() {
    let mut t = Tape::new();
    let p = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let q = t.constant(row(&[1.0, 1.0]));
    let m = match_sentence(&mut t, p, q).unwrap();
    assert_eq!(t.value(m).shape(), &[2, 8]);
    assert_eq!(t.value(m).row(1), &[3.0, 4.0, 1.0, 1.0, 3.0, 4.0, 2.0, 3.0]);
}

fn vector_gate(k: usize, width: usize, seed: u64) -> (ParamStore, GateParams) {
    let mut rng = RngState::new(seed);
    let mut store = ParamStore::new();
    let g = GateParams::new(&mut store, "gate", k, width, &mut rng);
    randomize(&mut store, &g.params(), &mut rng);
    (store, g)
}

#[test]
fn zero_gate_halves_the_word() {
    let (mut store, g) = vector_gate(8, 2, 2);
    zero(&mut store, &g.params());
    let mut t = Tape::with_params(&store);
    let h = t.constant(row(&[1.0; 8]));
    let v = t.constant(row(&[0.6, -1.4]));
    let out = gate_word(&mut t, &g, h, v).unwrap();
    assert_eq!(t.value(out.f).data(), &[0.5, 0.5]);
    assert_eq!(t.value(out.z).data(), &[0.0, 0.0]);
    assert_eq!(t.value(out.u).data(), &[0.3, -0.7]);
}

#[test]
fn closed_gate_preserves_the_word() {
    let (mut store, g) = vector_gate(8, 2, 3);
    *store.value_mut(g.b_f) = Tensor::full(&[2], -100.0);
    let mut t = Tape::with_params(&store);
    let h = t.constant(row(&[0.2; 8]));
    let v = t.constant(row(&[0.6, -1.4]));
    let out = gate_word(&mut t, &g, h, v).unwrap();
    for (a, b) in t.value(out.u).data().iter().zip([0.6, -1.4]) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn gated_word_lies_between_word_and_candidate() {
    let (store, g) = vector_gate(12, 4, 4);
    let mut rng = RngState::new(40);
    let mut t = Tape::with_params(&store);
    // 10^4 random words in blocks of 100 rows
    for _ in 0..100 {
        let h = t.constant(rand_tensor(&[100, 12], &mut rng, 3.0));
        let v = t.constant(rand_tensor(&[100, 4], &mut rng, 3.0));
        let out = gate_rows(&mut t, &g, h, v).unwrap();
        let (u, z, v) = (t.value(out.u).data(), t.value(out.z).data(), t.value(v).data());
        for c in 0..u.len() {
            assert!(u[c] >= v[c].min(z[c]) && u[c] <= v[c].max(z[c]));
        }
        assert!(t.value(out.f).data().iter().all(|&f| f > 0.0 && f < 1.0));
    }
}

#[test]
fn saturated_gates_select_an_endpoint() {
    let mut t = Tape::new();
    let v = t.constant(row(&[0.3, -0.9, 2.0]));
    let z = t.constant(row(&[-0.1, 0.7, 0.25]));
    let f0 = t.constant(Tensor::zeros(&[1, 3]));
    let f1 = t.constant(Tensor::full(&[1, 3], 1.0));
    let a = mix(&mut t, f0, v, z).unwrap();
    let b = mix(&mut t, f1, v, z).unwrap();
    assert_eq!(t.value(a).data(), t.value(v).data());
    assert_eq!(t.value(b).data(), t.value(z).data());
}

#[test]
fn scalar_gate_saturation() {
    let mut rng = RngState::new(5);
    let mut store = ParamStore::new();
    let s = ScalarGateParams::new(&mut store, "sg", 8, 2, &mut rng);
    randomize(&mut store, &s.params(), &mut rng);
    *store.value_mut(s.b_f) = Tensor::vector(vec![-100.0]).unwrap();
    let kind = CombinerKind::ScalarGate(s);
    let mut t = Tape::with_params(&store);
    let h = t.constant(row(&[0.1; 8]));
    let v = t.constant(row(&[0.6, -1.4]));
    let (u, _) = combine(&mut t, &kind, h, v).unwrap();
    for (a, b) in t.value(u).data().iter().zip([0.6, -1.4]) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn vector_gate_with_copied_rows_equals_scalar_gate() {
    let (k, width) = (8, 4);
    let mut rng = RngState::new(6);
    let mut store = ParamStore::new();
    let s = ScalarGateParams::new(&mut store, "sg", k, width, &mut rng);
    randomize(&mut store, &s.params(), &mut rng);
    let g = GateParams::new(&mut store, "vg", k, width, &mut rng);
    let copy_rows = |src: &Tensor| {
        Tensor::from_rows(&vec![src.data().to_vec(); width]).unwrap()
    };
    for (dst, src) in [(g.w_z1, s.w_z1), (g.w_z2, s.w_z2), (g.b_z, s.b_z)] {
        *store.value_mut(dst) = store.value(src).clone();
    }
    *store.value_mut(g.w_f1) = copy_rows(store.value(s.w_f1));
    *store.value_mut(g.w_f2) = copy_rows(store.value(s.w_f2));
    *store.value_mut(g.b_f) = Tensor::full(&[width], store.value(s.b_f).data()[0]);

    let mut t = Tape::with_params(&store);
    let h = t.constant(rand_tensor(&[5, k], &mut rng, 1.0));
    let v = t.constant(rand_tensor(&[5, width], &mut rng, 1.0));
    let (us, fs) = combine(&mut t, &CombinerKind::ScalarGate(s), h, v).unwrap();
    let (uv, fv) = combine(&mut t, &CombinerKind::VectorGate(g), h, v).unwrap();
    assert!(t.value(us).max_abs_diff(t.value(uv)) < 1e-12);
    let fv = t.value(fv.unwrap());
    for r in 0..5 {
        assert!(fv.row(r).iter().all(|&x| x == fv.row(r)[0]));
    }
    assert!(t.value(fs.unwrap()).max_abs_diff(fv) < 1e-12);
}

#[test]
fn concatenation_shapes() {
    let mut rng = RngState::new(7);
    let mut store = ParamStore::new();
    let c = ConcatProjection::new(&mut store, "cat", 16, 4, &mut rng);
    assert_eq!(c.input_dim(), 20);
    let mut t = Tape::with_params(&store);
    let h = t.constant(rand_tensor(&[3, 16], &mut rng, 1.0));
    let v = t.constant(rand_tensor(&[3, 4], &mut rng, 1.0));
    let x = concat_features(&mut t, h, v).unwrap();
    assert_eq!(t.shape(x), &[3, 20]);
    let (u, f) = combine(&mut t, &CombinerKind::Concatenation(c), h, v).unwrap();
    assert_eq!(t.shape(u), &[3, 4]);
    assert!(f.is_none());
}

fn passage(lens: &[usize]) -> Passage {
    let sents = lens
        .iter()
        .map(|&n| (0..n).map(|j| format!("w{j}")).collect())
        .collect();
    Passage::new(sents).unwrap()
}

#[test]
fn one_sentence_uses_one_vector() {
    let (store, g) = vector_gate(4, 4, 8);
    let mut rng = RngState::new(80);
    let p = passage(&[4]);
    let mut t = Tape::with_params(&store);
    let words = rand_tensor(&[4, 4], &mut rng, 1.0);
    let s = rand_tensor(&[1, 4], &mut rng, 1.0);
    let wv = t.constant(words.clone());
    let sv = t.constant(s.clone());
    let (u, f) = apply_sentence_gate(&mut t, &p, wv, sv, &CombinerKind::VectorGate(g)).unwrap();
    let (u, f) = (t.value(u).clone(), t.value(f.unwrap()).clone());
    for r in 0..4 {
        let h = t.constant(s.clone());
        let v = t.constant(row(words.row(r)));
        let one = gate_word(&mut t, &g, h, v).unwrap();
        assert_eq!(t.value(one.u).data(), u.row(r));
        assert_eq!(t.value(one.f).data(), f.row(r));
    }
}

#[test]
fn sentences_gate_their_own_words() {
    let (store, g) = vector_gate(8, 2, 9);
    let mut rng = RngState::new(90);
    let p = passage(&[2, 3]);
    let mut t = Tape::with_params(&store);
    let word = rand_tensor(&[1, 2], &mut rng, 1.0);
    let words = t.constant(Tensor::from_rows(&vec![word.data().to_vec(); 5]).unwrap());
    let sents = t.constant(rand_tensor(&[2, 8], &mut rng, 1.0));
    let (_, f) = apply_sentence_gate(&mut t, &p, words, sents, &CombinerKind::VectorGate(g)).unwrap();
    let f = t.value(f.unwrap());
    assert_eq!(f.row(0), f.row(1));
    assert_eq!(f.row(2), f.row(4));
    assert_ne!(f.row(1), f.row(2));
    assert!(f.data().iter().all(|&x| x > 0.0 && x < 1.0));
}

#[test]
fn misaligned_sentences_are_rejected() {
    let (store, g) = vector_gate(8, 2, 10);
    let p = passage(&[2, 3]);
    let mut t = Tape::with_params(&store);
    let words = t.constant(Tensor::zeros(&[5, 2]));
    let sents = t.constant(Tensor::zeros(&[3, 8]));
    let r = apply_sentence_gate(&mut t, &p, words, sents, &CombinerKind::VectorGate(g));
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn sentence_gate_gradients_check() {
    for combiner in [Combiner::VectorGate, Combiner::ScalarGate, Combiner::Concatenation] {
        let mut rng = RngState::new(11);
        let mut store = ParamStore::new();
        let kind = CombinerKind::new(&mut store, "g", combiner, 8, 2, &mut rng);
        randomize(&mut store, &kind.params(), &mut rng);
        let words = store.add("words", rand_tensor(&[5, 2], &mut rng, 1.0));
        let sents = store.add("sents", rand_tensor(&[2, 2], &mut rng, 1.0));
        let question = store.add("q", rand_tensor(&[1, 2], &mut rng, 1.0));
        let weights = rand_tensor(&[5, 2], &mut rng, 1.0);
        let p = passage(&[2, 3]);
        let mut params = kind.params();
        params.extend([words, sents, question]);
        let cfg = MatchingConfig { use_matching: true };
        let report = grad_check(&mut store, &params, 1e-6, |t| {
            let (w, s, q) = (t.param(words)?, t.param(sents)?, t.param(question)?);
            let h = sentence_inputs(t, &cfg, s, q)?;
            let (u, _) = apply_sentence_gate(t, &p, w, h, &kind)?;
            let c = t.constant(weights.clone());
            let y = t.mul(u, c)?;
            t.sum_all(y)
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-5, "{combiner:?}: {report:?}");
    }
}
