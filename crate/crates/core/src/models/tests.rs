use super::*;
use crate::autodiff::grad_check;
use crate::text::{ClozeExample, Passage, Question, SpanExample, PLACEHOLDER};

fn rand_tensor(shape: &[usize], rng: &mut RngState, bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(-bound, bound)).collect())
        .unwrap()
}

fn words(s: &str) -> Vec<String> {
    s.split(' ').map(String::from).collect()
}

fn toy_span() -> SpanExample {
    let passage = Passage::new(vec![words("w1 w2 m1 m2 e1 e2 w3 ."), words("e3 w4 w5 .")]).unwrap();
    SpanExample {
        id: "toy".into(),
        passage,
        question: Question::new(words("w6 m1 m2 ?")).unwrap(),
        answer_start: 4,
        answer_end: 5,
        answer_text: "e1 e2".into(),
        gold_answers: vec!["e1 e2".into()],
    }
}

fn toy_cloze() -> ClozeExample {
    let passage = Passage::new(vec![
        words("w1 e1 r1 w2 ."),
        words("e2 r2 w3 ."),
        words("w4 w5 e3 r3 ."),
    ])
    .unwrap();
    let question = Question::new(vec!["w6".into(), PLACEHOLDER.into(), "r2".into()]).unwrap();
    ClozeExample::new(
        "toy".into(),
        passage,
        question,
        vec!["e1".into(), "e2".into(), "e3".into()],
        1,
    )
    .unwrap()
}

fn vocab_for(tokens: &[&[String]]) -> Vocabulary {
    Vocabulary::from_tokens(tokens.iter().flat_map(|t| t.iter().map(String::as_str)))
}

fn span_model(cfg: ModelConfig, seed: u64) -> (QaModel, QaExample) {
    let ex = toy_span();
    let vocab = vocab_for(&[ex.passage.flat_tokens(), ex.question.tokens()]);
    let mut rng = RngState::new(seed + 1000);
    let emb = rand_tensor(&[vocab.len(), cfg.embed_dim], &mut rng, 0.5);
    let model = QaModel::new(cfg, vocab, emb, seed).unwrap();
    (model, QaExample::Span(ex))
}

fn cloze_model(cfg: ModelConfig, seed: u64) -> (QaModel, QaExample) {
    let ex = toy_cloze();
    let vocab = vocab_for(&[ex.passage.flat_tokens(), ex.question.tokens()]);
    let mut rng = RngState::new(seed + 1000);
    let emb = rand_tensor(&[vocab.len(), cfg.embed_dim], &mut rng, 0.5);
    let model = QaModel::new(cfg, vocab, emb, seed).unwrap();
    (model, QaExample::Cloze(ex))
}

fn small(task: TaskKind) -> ModelConfig {
    ModelConfig {
        task,
        hidden: 4,
        embed_dim: 5,
        hops: 2,
        ..ModelConfig::default()
    }
}

fn match_layer(width: usize, seed: u64) -> (ParamStore, MatchAttention) {
    let mut rng = RngState::new(seed);
    let mut store = ParamStore::new();
    let layer = MatchAttention::new(&mut store, "m", width, &mut rng);
    (store, layer)
}

#[test]
fn single_question_word_gets_all_attention() {
    let (store, layer) = match_layer(4, 1);
    let mut rng = RngState::new(10);
    let mut t = Tape::with_params(&store);
    let u = t.constant(rand_tensor(&[5, 4], &mut rng, 1.0));
    let q = t.constant(rand_tensor(&[1, 4], &mut rng, 1.0));
    let out = match_attention_layer(&mut t, &layer, u, q).unwrap();
    for a in out.forward_attention.iter().chain(&out.backward_attention) {
        assert_eq!(t.value(*a).data(), &[1.0]);
    }
    assert_eq!(t.shape(out.matched), &[5, 4]);
}

#[test]
fn zero_attention_parameters_attend_uniformly() {
    let (mut store, layer) = match_layer(4, 2);
    for dir in [layer.forward, layer.backward] {
        for id in [dir.w_q, dir.w_p, dir.w_r, dir.b_p, dir.w] {
            let s = store.value(id).shape().to_vec();
            *store.value_mut(id) = Tensor::zeros(&s);
        }
    }
    let mut rng = RngState::new(20);
    let mut t = Tape::with_params(&store);
    let u = t.constant(rand_tensor(&[4, 4], &mut rng, 1.0));
    let qv = rand_tensor(&[4, 4], &mut rng, 1.0);
    let q = t.constant(qv.clone());
    let out = match_attention_layer(&mut t, &layer, u, q).unwrap();
    let mean: Vec<f64> = (0..4).map(|c| (0..4).map(|r| qv.at(r, c)).sum::<f64>() / 4.0).collect();
    for a in out.forward_attention.iter().chain(&out.backward_attention) {
        assert_eq!(t.value(*a).data(), &[0.25; 4]);
        let attended = t.matmul(*a, q).unwrap();
        for (x, y) in t.value(attended).data().iter().zip(&mean) {
            assert!((x - y).abs() < 1e-15);
        }
    }
}

#[test]
fn attention_rows_are_distributions() {
    let (store, layer) = match_layer(6, 3);
    let mut rng = RngState::new(30);
    let mut t = Tape::with_params(&store);
    let u = t.constant(rand_tensor(&[9, 6], &mut rng, 2.0));
    let q = t.constant(rand_tensor(&[5, 6], &mut rng, 2.0));
    let out = match_attention_layer(&mut t, &layer, u, q).unwrap();
    for a in out.forward_attention.iter().chain(&out.backward_attention) {
        let row = t.value(*a).data();
        assert!(row.iter().all(|&x| x > 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn match_attention_rejects_wrong_width() {
    let (store, layer) = match_layer(4, 4);
    let mut t = Tape::with_params(&store);
    let u = t.constant(Tensor::zeros(&[3, 4]));
    let q = t.constant(Tensor::zeros(&[2, 6]));
    assert!(matches!(
        match_attention_layer(&mut t, &layer, u, q),
        Err(Error::Dimension { .. })
    ));
}

fn pointer(width: usize, seed: u64) -> (ParamStore, AnswerPointer) {
    let mut rng = RngState::new(seed);
    let mut store = ParamStore::new();
    let p = AnswerPointer::new(&mut store, "p", width, &mut rng);
    (store, p)
}

#[test]
fn pointer_over_one_position() {
    let (store, p) = pointer(4, 5);
    let mut t = Tape::with_params(&store);
    let h = t.constant(Tensor::full(&[1, 4], 0.3));
    let out = answer_pointer(&mut t, &p, h).unwrap();
    assert_eq!(t.value(out.start).data(), &[1.0]);
    assert_eq!(t.value(out.end).data(), &[1.0]);
}

#[test]
fn pointer_distributions_sum_to_one() {
    let (store, p) = pointer(6, 6);
    let mut rng = RngState::new(60);
    let mut t = Tape::with_params(&store);
    let h = t.constant(rand_tensor(&[17, 6], &mut rng, 2.0));
    let out = answer_pointer(&mut t, &p, h).unwrap();
    for v in [out.start, out.end] {
        assert!((t.value(v).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert_ne!(t.value(out.start).data(), t.value(out.end).data());
}

fn brute_force_span(ps: &[f64], pe: &[f64], max_len: usize) -> (usize, usize) {
    let mut pairs = Vec::new();
    for s in 0..ps.len() {
        for e in 0..pe.len() {
            if s <= e && e <= s + max_len {
                pairs.push((ps[s] * pe[e], s, e));
            }
        }
    }
    // highest score; ties to smaller start then smaller end
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    (pairs[0].1, pairs[0].2)
}

#[test]
fn constrained_decode_matches_exhaustive_search() {
    let mut rng = RngState::new(7);
    for trial in 0..400 {
        let m = 1 + rng.below(50);
        let mut ps: Vec<f64> = (0..m).map(|_| rng.uniform()).collect();
        let mut pe: Vec<f64> = (0..m).map(|_| rng.uniform()).collect();
        if trial % 4 == 0 {
            // coarse values force ties
            ps.iter_mut().for_each(|x| *x = (*x * 3.0).floor());
            pe.iter_mut().for_each(|x| *x = (*x * 3.0).floor());
        }
        let max_len = if trial % 2 == 0 { 15 } else { rng.below(6) };
        let got = decode_span(&ps, &pe, max_len);
        assert_eq!(got, brute_force_span(&ps, &pe, max_len));
        assert!(got.0 <= got.1 && got.1 <= got.0 + max_len);
    }
}

#[test]
fn span_loss_closed_forms() {
    let mut t = Tape::new();
    let m = 7;
    let uniform = t.constant(Tensor::full(&[m], 1.0 / m as f64));
    let log_uniform = t.ln(uniform).unwrap();
    let loss = span_loss(&mut t, log_uniform, log_uniform, 2, 4).unwrap();
    assert!((t.value(loss).item().unwrap() - 2.0 * (m as f64).ln()).abs() < 1e-12);

    let mut peaked = vec![-50.0; m];
    peaked[2] = 50.0;
    let s = t.constant(Tensor::vector(peaked.clone()).unwrap());
    let s = t.log_softmax(s, 0).unwrap();
    peaked.swap(2, 4);
    let e = t.constant(Tensor::vector(peaked).unwrap());
    let e = t.log_softmax(e, 0).unwrap();
    let loss = span_loss(&mut t, s, e, 2, 4).unwrap();
    assert!(t.value(loss).item().unwrap() < 1e-40);
}

#[test]
fn ga_hop_with_one_question_word() {
    let mut rng = RngState::new(8);
    let dv = rand_tensor(&[4, 3], &mut rng, 1.0);
    let qv = rand_tensor(&[1, 3], &mut rng, 1.0);
    let mut t = Tape::new();
    let (d, q) = (t.constant(dv.clone()), t.constant(qv.clone()));
    let x = ga_hop(&mut t, d, q).unwrap();
    for r in 0..4 {
        let want: Vec<f64> = dv.row(r).iter().zip(qv.data()).map(|(a, b)| a * b).collect();
        assert_eq!(t.value(x).row(r), &want[..]);
    }
}

#[test]
fn ga_hop_with_identical_question_words() {
    let mut rng = RngState::new(9);
    let dv = rand_tensor(&[5, 3], &mut rng, 1.0);
    let q1 = rand_tensor(&[3], &mut rng, 1.0);
    let qv = Tensor::from_rows(&vec![q1.data().to_vec(); 4]).unwrap();
    let mut t = Tape::new();
    let (d, q) = (t.constant(dv.clone()), t.constant(qv));
    let x = ga_hop(&mut t, d, q).unwrap();
    for r in 0..5 {
        for c in 0..3 {
            assert!((t.value(x).at(r, c) - dv.at(r, c) * q1.data()[c]).abs() < 1e-15);
        }
    }
}

#[test]
fn ga_hop_matches_direct_recomputation() {
    let mut rng = RngState::new(10);
    let dv = rand_tensor(&[4, 5], &mut rng, 1.5);
    let qv = rand_tensor(&[3, 5], &mut rng, 1.5);
    let mut t = Tape::new();
    let (d, q) = (t.constant(dv.clone()), t.constant(qv.clone()));
    let x = ga_hop(&mut t, d, q).unwrap();
    for i in 0..4 {
        let logits: Vec<f64> = (0..3)
            .map(|s| dv.row(i).iter().zip(qv.row(s)).map(|(a, b)| a * b).sum())
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for c in 0..5 {
            let qt: f64 = (0..3).map(|s| logits[s].exp() / z * qv.at(s, c)).sum();
            assert!((t.value(x).at(i, c) - dv.at(i, c) * qt).abs() < 1e-12);
        }
    }
    let bad = t.constant(Tensor::zeros(&[3, 4]));
    assert!(matches!(ga_hop(&mut t, d, bad), Err(Error::Dimension { .. })));
}

#[test]
fn attention_sum_single_candidate() {
    let mut rng = RngState::new(11);
    let mut t = Tape::new();
    let w = t.constant(rand_tensor(&[6, 4], &mut rng, 1.0));
    let q = t.constant(rand_tensor(&[1, 4], &mut rng, 1.0));
    let out = attention_sum(&mut t, w, q, &[vec![1, 4]]).unwrap();
    assert_eq!(t.value(out.probs).data(), &[1.0]);
}

#[test]
fn attention_sum_symmetric_candidates() {
    let mut t = Tape::new();
    let row = [0.3, -0.2, 0.9];
    let other = [1.0, 1.0, -1.0];
    let w = t.constant(Tensor::from_rows(&[row.to_vec(), other.to_vec(), row.to_vec(), other.to_vec()]).unwrap());
    let q = t.constant(Tensor::matrix(1, 3, vec![0.5, 0.1, 0.4]).unwrap());
    let out = attention_sum(&mut t, w, q, &[vec![0], vec![2]]).unwrap();
    assert_eq!(t.value(out.probs).data(), &[0.5, 0.5]);
}

#[test]
fn attention_sum_matches_position_sums() {
    let mut rng = RngState::new(12);
    for _ in 0..100 {
        let m = 3 + rng.below(20);
        let wv = rand_tensor(&[m, 4], &mut rng, 2.0);
        let qv = rand_tensor(&[1, 4], &mut rng, 2.0);
        let mut order: Vec<usize> = (0..m).collect();
        rng.shuffle(&mut order);
        let c = 1 + rng.below(m.min(5));
        let positions: Vec<Vec<usize>> = (0..c)
            .map(|i| {
                let mut p: Vec<usize> = order.iter().copied().skip(i).step_by(c).take(1 + rng.below(3)).collect();
                p.sort();
                p
            })
            .collect();
        let mut t = Tape::new();
        let (w, q) = (t.constant(wv.clone()), t.constant(qv.clone()));
        let out = attention_sum(&mut t, w, q, &positions).unwrap();
        let probs = t.value(out.probs).data().to_vec();

        let logits: Vec<f64> = (0..m)
            .map(|i| wv.row(i).iter().zip(qv.data()).map(|(a, b)| a * b).sum())
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let mass: Vec<f64> = positions
            .iter()
            .map(|p| p.iter().map(|&i| logits[i].exp() / z).sum())
            .collect();
        let total: f64 = mass.iter().sum();
        for (got, m) in probs.iter().zip(&mass) {
            assert!((got - m / total).abs() < 1e-12);
        }
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn attention_sum_rejects_unplaced_candidate() {
    let mut t = Tape::new();
    let w = t.constant(Tensor::zeros(&[3, 2]));
    let q = t.constant(Tensor::zeros(&[1, 2]));
    let r = attention_sum(&mut t, w, q, &[vec![0], vec![]]);
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn uniform_candidates_cost_log_c() {
    let mut rng = RngState::new(13);
    let mut t = Tape::new();
    let w = t.constant(rand_tensor(&[8, 3], &mut rng, 1.0));
    let q = t.constant(Tensor::zeros(&[1, 3]));
    let out = attention_sum(&mut t, w, q, &[vec![0], vec![3], vec![5], vec![7]]).unwrap();
    let gold = t.gather(out.log_probs, &[2]).unwrap();
    let loss = t.affine(gold, -1.0, 0.0).unwrap();
    assert!((t.value(loss).data()[0] - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn span_forward_shapes_and_trace() {
    let (model, ex) = span_model(small(TaskKind::Span), 14);
    let mut t = Tape::with_params(&model.store);
    let mut mode = RunMode::eval(true);
    let out = model.forward(&mut t, &ex, &mut mode).unwrap();
    assert_eq!(t.shape(out.loss), &[] as &[usize]);
    assert!(t.value(out.loss).item().unwrap() > 0.0);
    let trace = out.trace.unwrap();
    assert_eq!(trace.num_hops(), 1);
    assert_eq!(trace.hops[0].shape(), &[12, 8]);
    assert!(trace.hops[0].data().iter().all(|&f| f > 0.0 && f < 1.0));
    match out.prediction {
        Prediction::Span { start, end } => assert!(start <= end && end < 12),
        _ => panic!("wrong prediction kind"),
    }
}

#[test]
fn cloze_forward_traces_every_hop() {
    let cfg = ModelConfig { hops: 3, ..small(TaskKind::Cloze) };
    let (model, ex) = cloze_model(cfg, 15);
    let mut t = Tape::with_params(&model.store);
    let out = model.forward(&mut t, &ex, &mut RunMode::eval(true)).unwrap();
    let trace = out.trace.unwrap();
    assert_eq!(trace.num_hops(), 3);
    for f in &trace.hops {
        assert_eq!(f.shape(), &[14, 8]);
        assert!(f.data().iter().all(|&x| x > 0.0 && x < 1.0));
    }
    match out.prediction {
        Prediction::Cloze { probs, .. } => {
            assert_eq!(probs.len(), 3);
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        _ => panic!("wrong prediction kind"),
    }
}

#[test]
fn single_hop_reader_is_the_plain_pipeline() {
    let cfg = ModelConfig { hops: 1, ..small(TaskKind::Cloze) };
    let (model, ex) = cloze_model(cfg, 16);
    let QaExample::Cloze(ce) = &ex else { unreachable!() };
    let Net::Cloze(net) = &model.net else { unreachable!() };
    let mut t = Tape::with_params(&model.store);
    let out = model.forward(&mut t, &ex, &mut RunMode::eval(false)).unwrap();
    let want = t.value(out.loss).item().unwrap();

    let hop = &net.hops[0];
    let mut t = Tape::with_params(&model.store);
    let e_p = t.param_rows(net.embedding, &model.vocab.ids_of(ce.passage.flat_tokens())).unwrap();
    let e_q = t.param_rows(net.embedding, &model.vocab.ids_of(ce.question.tokens())).unwrap();
    let h_p = crate::encoders::bigru_forward(&mut t, &hop.passage_sentence, e_p).unwrap();
    let (h_q, pooled) = crate::encoders::encode_question(&mut t, &hop.question, e_q).unwrap();
    let v = crate::encoders::bigru_forward(&mut t, &hop.passage_word, e_p).unwrap();
    let s = crate::encoders::encode_sentences(&mut t, h_p, &ce.passage, &hop.gate.encoder).unwrap();
    let m = crate::gate::match_sentence(&mut t, s, pooled).unwrap();
    let (u, _) = crate::gate::apply_sentence_gate(&mut t, &ce.passage, v, m, &hop.gate.combiner).unwrap();
    let x = ga_hop(&mut t, u, h_q).unwrap();
    let qs = t.mean(h_q, 0).unwrap();
    let qs = t.reshape(qs, &[1, 8]).unwrap();
    let a = attention_sum(&mut t, x, qs, &ce.candidate_positions).unwrap();
    let got = -t.value(a.log_probs).data()[ce.answer_index];
    assert_eq!(got.to_bits(), want.to_bits());
}

#[test]
fn wrong_example_kind_is_rejected() {
    let (model, _) = span_model(small(TaskKind::Span), 17);
    let mut t = Tape::with_params(&model.store);
    let r = model.forward(&mut t, &QaExample::Cloze(toy_cloze()), &mut RunMode::eval(false));
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn ablation_variants_keep_output_shapes() {
    for encoder in [
        SentenceEncoding::AveragePooling,
        SentenceEncoding::BigruLast,
        SentenceEncoding::MaxPooling,
        SentenceEncoding::InnerAttention,
    ] {
        for combiner in [Combiner::Concatenation, Combiner::ScalarGate, Combiner::VectorGate] {
            for matching in [false, true] {
                let cfg = ModelConfig { encoder, combiner, matching, ..small(TaskKind::Span) };
                let (model, ex) = span_model(cfg, 18);
                let mut t = Tape::with_params(&model.store);
                let out = model.forward(&mut t, &ex, &mut RunMode::eval(true)).unwrap();
                assert!(t.value(out.loss).item().unwrap().is_finite());
                assert_eq!(out.trace.is_some(), combiner != Combiner::Concatenation);
            }
        }
    }
}

#[test]
fn forward_is_bit_reproducible() {
    let cfg = small(TaskKind::Cloze);
    let run = || {
        let (model, ex) = cloze_model(cfg.clone(), 19);
        let mut t = Tape::with_params(&model.store);
        let mut mode = RunMode::train(0.3, RngState::new(5));
        let out = model.forward(&mut t, &ex, &mut mode).unwrap();
        t.backward(out.loss).unwrap();
        let g: Vec<u64> = t.param_grad(model.params()[3]).unwrap().iter().map(|x| x.to_bits()).collect();
        (t.value(out.loss).item().unwrap().to_bits(), g)
    };
    assert_eq!(run(), run());
}

#[test]
fn character_composer_extends_embeddings() {
    let cfg = ModelConfig {
        chars: Some(CharConfig { char_dim: 3, hidden: 2, buckets: 16 }),
        ..small(TaskKind::Span)
    };
    let (model, ex) = span_model(cfg, 20);
    let Net::Span(net) = &model.net else { unreachable!() };
    assert_eq!(net.passage_sentence.forward.input_dim, 5 + 4);
    let mut t = Tape::with_params(&model.store);
    let out = model.forward(&mut t, &ex, &mut RunMode::eval(false)).unwrap();
    assert!(t.value(out.loss).item().unwrap().is_finite());
}

/// Central differences cannot resolve gradients below roughly
/// `ulp(loss) / 2ε`, so coordinates are compared with an absolute floor
/// on top of the relative tolerance.
fn check_model(model: &mut QaModel, ex: &QaExample) {
    let params = model.params();
    let snapshot = model.clone();
    let report = grad_check(&mut model.store, &params, 1e-5, |t| {
        let out = snapshot.forward(t, ex, &mut RunMode::eval(false))?;
        Ok(out.loss)
    })
    .unwrap();
    let failing = report.failing_with_tolerance(1e-4, 1e-8);
    assert!(failing.is_empty(), "{failing:?}");
}

#[test]
fn span_model_gradients_match_within_roundoff() {
    let cfg = ModelConfig { hidden: 8, embed_dim: 6, ..ModelConfig::default() };
    let (mut model, ex) = span_model(cfg, 21);
    check_model(&mut model, &ex);
}

#[test]
fn cloze_model_gradients_match_within_roundoff() {
    let cfg = ModelConfig { task: TaskKind::Cloze, hidden: 8, embed_dim: 6, hops: 2, ..ModelConfig::default() };
    let (mut model, ex) = cloze_model(cfg, 22);
    check_model(&mut model, &ex);
}
