use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::vocab::{Vocabulary, PAD_ID};
use crate::autodiff::{RngState, Tensor};
use crate::error::{Error, Result};

/// What an out-of-vocabulary token is represented by.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OovPolicy {
    /// All-zero vector.
    Zero,
    /// A random vector that is a pure function of `(seed, token)`.
    RandomPerToken,
}

const RANDOM_SCALE: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct EmbeddingMatrix {
    pub matrix: Tensor,
    pub trainable: bool,
    pub oov_policy: OovPolicy,
    /// Fraction of non-reserved vocabulary entries found in the file.
    pub coverage: f64,
    seed: u64,
    cache: HashMap<String, Vec<f64>>,
}

impl EmbeddingMatrix {
    /// Vector for a token absent from the pretrained file.
    pub fn oov_vector(&mut self, token: &str) -> Vec<f64> {
        let dim = self.dim();
        match self.oov_policy {
            OovPolicy::Zero => vec![0.0; dim],
            OovPolicy::RandomPerToken => {
                let seed = self.seed;
                self.cache
                    .entry(token.to_string())
                    .or_insert_with(|| random_vector(seed, token, dim))
                    .clone()
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    /// Adds rows for tokens unseen at load time (for example test-time
    /// words), registering them in `vocab` under the OOV policy.
    pub fn extend(&mut self, vocab: &mut Vocabulary, tokens: &[String]) {
        let dim = self.dim();
        let mut data = self.matrix.data().to_vec();
        for t in tokens {
            if vocab.get(t).is_none() {
                vocab.insert(t);
                data.extend(self.oov_vector(t));
            }
        }
        self.matrix = Tensor::from_parts(vec![data.len() / dim, dim], data);
    }
}

fn random_vector(seed: u64, token: &str, dim: usize) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(token.as_bytes());
    let digest = h.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    let mut rng = RngState::new(u64::from_le_bytes(word));
    (0..dim)
        .map(|_| rng.uniform_range(-RANDOM_SCALE, RANDOM_SCALE))
        .collect()
}

/// Reads `token v1 ... vD` lines and fills the rows of `vocab`'s tokens.
pub fn load_embeddings(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    oov_policy: OovPolicy,
    seed: u64,
) -> Result<EmbeddingMatrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&text, vocab, dim, oov_policy, seed)
}

pub fn parse_embeddings(
    text: &str,
    vocab: &Vocabulary,
    dim: usize,
    oov_policy: OovPolicy,
    seed: u64,
) -> Result<EmbeddingMatrix> {
    if dim == 0 {
        return Err(Error::Parameter("embedding dimension must be positive".into()));
    }
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; vocab.len()];
    for (n, line) in text.lines().enumerate() {
        let mut fields = line.split(' ').filter(|f| !f.is_empty());
        let Some(token) = fields.next() else { continue };
        let values: Vec<&str> = fields.collect();
        if values.len() != dim {
            return Err(Error::Parse {
                location: format!("line {}", n + 1),
                message: format!("expected {dim} values, found {}", values.len()),
            });
        }
        let Some(id) = vocab.get(token) else { continue };
        let parsed = values
            .iter()
            .map(|v| {
                v.parse::<f64>().map_err(|e| Error::Parse {
                    location: format!("line {}", n + 1),
                    message: format!("{v:?}: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows[id] = Some(parsed);
    }

    let mut emb = EmbeddingMatrix {
        matrix: Tensor::zeros(&[vocab.len(), dim]),
        trainable: false,
        oov_policy,
        coverage: 0.0,
        seed,
        cache: HashMap::new(),
    };
    let mut data = Vec::with_capacity(vocab.len() * dim);
    let mut found = 0;
    for (id, row) in rows.into_iter().enumerate() {
        match row {
            _ if id == PAD_ID => data.extend(std::iter::repeat_n(0.0, dim)),
            Some(r) => {
                if id > 2 {
                    found += 1;
                }
                data.extend(r);
            }
            None => data.extend(emb.oov_vector(vocab.token(id).unwrap_or_default())),
        }
    }
    let regular = vocab.len().saturating_sub(3);
    emb.coverage = if regular == 0 { 1.0 } else { found as f64 / regular as f64 };
    emb.matrix = Tensor::from_parts(vec![vocab.len(), dim], data);
    Ok(emb)
}
