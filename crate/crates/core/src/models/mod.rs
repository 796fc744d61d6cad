//! The two QA systems built on sentence-gated word representations.

mod cloze;
mod span;

use serde::{Deserialize, Serialize};

pub use cloze::{attention_sum, cloze_forward, ga_hop, AttentionSum, ClozeNet, HopParams};
pub use span::{
    answer_pointer, decode_span, span_loss, match_attention_layer, span_forward, AnswerPointer,
    MatchAttention, MatchDirection, MatchOutput, PointerOutput, SpanNet,
};

use crate::autodiff::{RngState, Tape, Tensor, Var};
use crate::encoders::{
    bigru_forward, BiGruLayer, InnerAttention, SentenceEncoderKind, SentenceEncoding,
};
use crate::error::{Error, Result};
use crate::gate::{Combiner, CombinerKind, MatchingConfig};
use crate::metrics::TaskKind;
use crate::params::{ParamId, ParamStore};
use crate::text::{
    gen_synthetic_cloze, gen_synthetic_span, ClozeSynthConfig, QaExample, SpanSynthConfig, Vocabulary,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CharConfig {
    pub char_dim: usize,
    pub hidden: usize,
    /// Characters are hashed into this many embedding rows.
    pub buckets: usize,
}

impl Default for CharConfig {
    fn default() -> Self {
        CharConfig {
            char_dim: 50,
            hidden: 25,
            buckets: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub task: TaskKind,
    /// Per-direction GRU size `d`; word and sentence vectors are `2d`.
    pub hidden: usize,
    pub embed_dim: usize,
    pub trainable_embeddings: bool,
    /// Number of reader hops (cloze only).
    pub hops: usize,
    pub encoder: SentenceEncoding,
    pub combiner: Combiner,
    pub matching: bool,
    pub max_span_len: usize,
    pub chars: Option<CharConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            task: TaskKind::Span,
            hidden: 16,
            embed_dim: 32,
            trainable_embeddings: true,
            hops: 3,
            encoder: SentenceEncoding::AveragePooling,
            combiner: Combiner::VectorGate,
            matching: true,
            max_span_len: 15,
            chars: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.embed_dim == 0 {
            return Err(Error::Config("hidden and embed_dim must be positive".into()));
        }
        if self.task == TaskKind::Cloze && self.hops == 0 {
            return Err(Error::Config("cloze model needs hops >= 1".into()));
        }
        if let Some(c) = &self.chars {
            if c.char_dim == 0 || c.hidden == 0 || c.buckets == 0 {
                return Err(Error::Config("character composer sizes must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Per-token character BiGRU whose boundary states are appended to the
/// word embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CharComposer {
    pub table: ParamId,
    pub buckets: usize,
    pub rnn: BiGruLayer,
}

impl CharComposer {
    pub fn new(store: &mut ParamStore, cfg: &CharConfig, rng: &mut RngState) -> Self {
        let table = store.add_uniform("char.emb", &[cfg.buckets, cfg.char_dim], 0.1, rng);
        let rnn = BiGruLayer::new(store, "char.rnn", cfg.char_dim, cfg.hidden, rng);
        CharComposer {
            table,
            buckets: cfg.buckets,
            rnn,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.rnn.output_dim()
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.table];
        p.extend(self.rnn.params());
        p
    }

    /// `[T, 2c]`: for each token, the last forward and first backward
    /// character states.
    pub fn compose(&self, tape: &mut Tape<'_>, tokens: &[String]) -> Result<Var> {
        let c = self.rnn.hidden();
        let mut rows = Vec::with_capacity(tokens.len());
        for tok in tokens {
            let ids: Vec<usize> = tok.chars().map(|ch| ch as usize % self.buckets).collect();
            if ids.is_empty() {
                return Err(Error::Contract("empty token".into()));
            }
            let x = tape.param_rows(self.table, &ids)?;
            let h = bigru_forward(tape, &self.rnn, x)?;
            let last = tape.row(h, ids.len() - 1)?;
            let last = tape.slice(last, 1, 0, c)?;
            let first = tape.row(h, 0)?;
            let first = tape.slice(first, 1, c, 2 * c)?;
            rows.push(tape.concat(&[last, first], 1)?);
        }
        tape.concat(&rows, 0)
    }
}

/// Word embeddings for `tokens`, with character features appended when a
/// composer is present.
pub fn embed(
    tape: &mut Tape<'_>,
    table: ParamId,
    chars: Option<&CharComposer>,
    vocab: &Vocabulary,
    tokens: &[String],
) -> Result<Var> {
    let words = tape.param_rows(table, &vocab.ids_of(tokens))?;
    match chars {
        Some(c) => {
            let ch = c.compose(tape, tokens)?;
            tape.concat(&[words, ch], 1)
        }
        None => Ok(words),
    }
}

/// Sentence encoder, matching switch and combiner of one gating stage.
#[derive(Clone, Debug, PartialEq)]
pub struct GateStack {
    pub encoder: SentenceEncoderKind,
    pub matching: MatchingConfig,
    pub combiner: CombinerKind,
}

impl GateStack {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut RngState,
    ) -> Self {
        let width = 2 * cfg.hidden;
        let encoder = match cfg.encoder {
            SentenceEncoding::AveragePooling => SentenceEncoderKind::AveragePooling,
            SentenceEncoding::BigruLast => SentenceEncoderKind::BiGruLast,
            SentenceEncoding::MaxPooling => SentenceEncoderKind::MaxPooling,
            SentenceEncoding::InnerAttention => SentenceEncoderKind::InnerAttention(Some(
                InnerAttention::new(store, &format!("{prefix}.attn"), width, cfg.hidden, rng),
            )),
        };
        let matching = MatchingConfig {
            use_matching: cfg.matching,
        };
        let k = matching.gate_input_dim(width);
        let combiner = CombinerKind::new(store, &format!("{prefix}.gate"), cfg.combiner, k, width, rng);
        GateStack {
            encoder,
            matching,
            combiner,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = Vec::new();
        if let SentenceEncoderKind::InnerAttention(Some(a)) = &self.encoder {
            p.extend([a.w_a, a.v_a]);
        }
        p.extend(self.combiner.params());
        p
    }
}

/// Recorded gate activations: one `[M, 2d]` matrix per hop.
#[derive(Clone, Debug, PartialEq)]
pub struct GateTrace {
    pub hops: Vec<Tensor>,
}

impl GateTrace {
    pub fn num_hops(&self) -> usize {
        self.hops.len()
    }

    /// Mean gate value of every word at `hop`.
    pub fn word_means(&self, hop: usize) -> Vec<f64> {
        let f = &self.hops[hop];
        (0..f.rows())
            .map(|r| f.row(r).iter().sum::<f64>() / f.cols() as f64)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Span { start: usize, end: usize },
    Cloze { index: usize, probs: Vec<f64> },
}

/// Result of one forward pass; `loss` lives on the caller's tape.
#[derive(Clone, Debug)]
pub struct Forward {
    pub loss: Var,
    pub prediction: Prediction,
    pub trace: Option<GateTrace>,
}

/// Dropout switch, rate and mask stream for one forward pass.
#[derive(Clone, Debug)]
pub struct RunMode {
    pub training: bool,
    pub dropout: f64,
    pub rng: RngState,
    pub trace: bool,
}

impl RunMode {
    pub fn train(dropout: f64, rng: RngState) -> Self {
        RunMode {
            training: true,
            dropout,
            rng,
            trace: false,
        }
    }

    pub fn eval(trace: bool) -> Self {
        RunMode {
            training: false,
            dropout: 0.0,
            rng: RngState::new(0),
            trace,
        }
    }

    pub fn dropout(&mut self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        tape.dropout(x, self.dropout, self.training, &mut self.rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Net {
    Span(SpanNet),
    Cloze(ClozeNet),
}

/// A model with its vocabulary and parameters.
#[derive(Clone, Debug)]
pub struct QaModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub net: Net,
}

impl QaModel {
    /// Registers every parameter in a fixed order. `embeddings` must be
    /// `[vocab.len(), embed_dim]`.
    pub fn new(config: ModelConfig, vocab: Vocabulary, embeddings: Tensor, seed: u64) -> Result<Self> {
        config.validate()?;
        if embeddings.shape() != [vocab.len(), config.embed_dim] {
            return Err(Error::Config(format!(
                "embedding matrix {:?} does not match vocabulary {} x embed_dim {}",
                embeddings.shape(),
                vocab.len(),
                config.embed_dim
            )));
        }
        let mut rng = RngState::new(seed);
        let mut store = ParamStore::new();
        let embedding = if config.trainable_embeddings {
            store.add("emb", embeddings)
        } else {
            store.add_frozen("emb", embeddings)
        };
        let chars = config
            .chars
            .as_ref()
            .map(|c| CharComposer::new(&mut store, c, &mut rng));
        let input = config.embed_dim + chars.map_or(0, |c| c.output_dim());
        let d = config.hidden;
        let width = 2 * d;
        let net = match config.task {
            TaskKind::Span => {
                let passage_sentence = BiGruLayer::new(&mut store, "ps", input, d, &mut rng);
                let question = BiGruLayer::new(&mut store, "q", input, d, &mut rng);
                let passage_word = BiGruLayer::new(&mut store, "pw", input, d, &mut rng);
                let gate = GateStack::new(&mut store, "sg", &config, &mut rng);
                let matcher = MatchAttention::new(&mut store, "match", width, &mut rng);
                let pointer = AnswerPointer::new(&mut store, "ptr", width, &mut rng);
                Net::Span(SpanNet {
                    embedding,
                    chars,
                    passage_sentence,
                    passage_word,
                    question,
                    gate,
                    matcher,
                    pointer,
                    max_span_len: config.max_span_len,
                })
            }
            TaskKind::Cloze => {
                let mut hops = Vec::with_capacity(config.hops);
                for k in 1..=config.hops {
                    let p_in = if k == 1 { input } else { width };
                    let passage_sentence = BiGruLayer::new(&mut store, &format!("hop{k}.ps"), p_in, d, &mut rng);
                    let question = BiGruLayer::new(&mut store, &format!("hop{k}.q"), input, d, &mut rng);
                    let passage_word = BiGruLayer::new(&mut store, &format!("hop{k}.pw"), p_in, d, &mut rng);
                    let gate = GateStack::new(&mut store, &format!("hop{k}.sg"), &config, &mut rng);
                    hops.push(HopParams {
                        passage_sentence,
                        passage_word,
                        question,
                        gate,
                    });
                }
                Net::Cloze(ClozeNet {
                    embedding,
                    chars,
                    hops,
                })
            }
        };
        Ok(QaModel {
            config,
            vocab,
            store,
            net,
        })
    }

    /// Model over the vocabulary of every passage and question token in
    /// `examples`, with embeddings drawn from uniform(-1, 1) (padding row
    /// zero) for training from scratch.
    pub fn for_dataset(config: ModelConfig, examples: &[QaExample], seed: u64) -> Result<Self> {
        let vocab = Vocabulary::from_tokens(examples.iter().flat_map(|ex| {
            ex.passage()
                .flat_tokens()
                .iter()
                .chain(ex.question().tokens())
                .map(String::as_str)
        }));
        let dim = config.embed_dim;
        let mut rng = RngState::new(seed ^ 0x5eed_e4b0);
        let data = (0..vocab.len() * dim)
            .map(|i| if i < dim { 0.0 } else { rng.uniform_range(-1.0, 1.0) })
            .collect();
        let emb = Tensor::new(vec![vocab.len(), dim], data)?;
        QaModel::new(config, vocab, emb, seed)
    }

    /// A single small synthetic example (two sentences for span, three
    /// candidates for cloze) and a from-scratch model over it, for
    /// gradient checking.
    pub fn grad_check_toy(config: ModelConfig, seed: u64) -> Result<(Self, QaExample)> {
        let ex = match config.task {
            TaskKind::Span => QaExample::Span(
                gen_synthetic_span(&SpanSynthConfig {
                    n_examples: 1,
                    vocab_size: 30,
                    n_sentences: 2,
                    sent_len_range: (5, 7),
                    seed,
                })?
                .remove(0),
            ),
            TaskKind::Cloze => QaExample::Cloze(
                gen_synthetic_cloze(&ClozeSynthConfig {
                    n_examples: 1,
                    vocab_size: 30,
                    n_candidates: 3,
                    n_sentences: 3,
                    sent_len_range: (3, 5),
                    seed,
                })?
                .remove(0),
            ),
        };
        let model = QaModel::for_dataset(config, std::slice::from_ref(&ex), seed)?;
        Ok((model, ex))
    }

    pub fn task(&self) -> TaskKind {
        self.config.task
    }

    /// Every parameter of the network, in registration order.
    pub fn params(&self) -> Vec<ParamId> {
        let mut p = match &self.net {
            Net::Span(n) => n.params(),
            Net::Cloze(n) => n.params(),
        };
        p.sort();
        p
    }

    /// Runs the model on one example, recording onto `tape` (which must be
    /// bound to `self.store`).
    pub fn forward(&self, tape: &mut Tape<'_>, ex: &QaExample, mode: &mut RunMode) -> Result<Forward> {
        match (&self.net, ex) {
            (Net::Span(n), QaExample::Span(e)) => span_forward(tape, n, &self.vocab, e, mode),
            (Net::Cloze(n), QaExample::Cloze(e)) => cloze_forward(tape, n, &self.vocab, e, mode),
            _ => Err(Error::Contract(format!(
                "example {} does not match a {:?} model",
                ex.id(),
                self.config.task
            ))),
        }
    }
}

#[cfg(test)]
mod tests;
