//! Line-oriented text checkpoints.
//!
//! ```text
//! SGQA-CKPT 1
//! config_digest <sha256 of the config line>
//! config <json>
//! vocab <n> <digest>
//! <n lines, one json string each>
//! rng <seed> <position>
//! progress <epoch> <step>
//! adamax <t> <beta1> <beta2> <lr> <eps>
//! params <count>
//! param <name> <trainable 0|1> <dims joined by x>
//! values <v...>
//! m <v...>
//! u <v...>
//! end
//! ```
//!
//! Floats are written with 17 significant digits, which round-trips every
//! finite `f64`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{AdamaxState, TrainConfig, Trainer};
use crate::autodiff::{RngState, Tensor};
use crate::error::{Error as CoreError, Result};
use crate::models::{ModelConfig, QaModel};
use crate::text::Vocabulary;

pub const CHECKPOINT_HEADER: &str = "SGQA-CKPT 1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint version line {0:?}")]
    Version(String),
    #[error("shape mismatch for parameter {name}: checkpoint has {found:?}, model expects {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("malformed checkpoint at line {line}: {message}")]
    Malformed { line: usize, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigRecord {
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SavedParam {
    pub name: String,
    pub trainable: bool,
    pub value: Tensor,
    pub m: Vec<f64>,
    pub u: Vec<f64>,
}

/// Everything needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub vocab: Vocabulary,
    pub rng_seed: u64,
    pub rng_position: u128,
    pub epoch: usize,
    pub step: u64,
    pub adamax_t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub lr: f64,
    pub eps: f64,
    pub params: Vec<SavedParam>,
}

fn sha256_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn push_floats(out: &mut String, tag: &str, values: &[f64]) {
    out.push_str(tag);
    for v in values {
        let _ = write!(out, " {v:.16e}");
    }
    out.push('\n');
}

impl Checkpoint {
    pub fn capture(trainer: &Trainer) -> Self {
        let opt = &trainer.optimizer;
        let params = trainer
            .model
            .store
            .iter()
            .map(|(id, p)| SavedParam {
                name: p.name.clone(),
                trainable: p.trainable,
                value: p.value.clone(),
                m: opt.m[id.index()].clone(),
                u: opt.u[id.index()].clone(),
            })
            .collect();
        Checkpoint {
            model_config: trainer.model.config.clone(),
            train_config: trainer.config.clone(),
            vocab: trainer.model.vocab.clone(),
            rng_seed: trainer.rng.seed(),
            rng_position: trainer.rng.position(),
            epoch: trainer.epoch,
            step: trainer.step,
            adamax_t: opt.t,
            beta1: opt.beta1,
            beta2: opt.beta2,
            lr: opt.lr,
            eps: opt.eps,
            params,
        }
    }

    fn config_line(&self) -> String {
        let record = ConfigRecord {
            model: self.model_config.clone(),
            train: self.train_config.clone(),
        };
        serde_json::to_string(&record).expect("configs serialise")
    }

    /// Digest of the model and training configuration.
    pub fn config_digest(&self) -> String {
        sha256_hex(&self.config_line())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let config = self.config_line();
        let _ = writeln!(out, "{CHECKPOINT_HEADER}");
        let _ = writeln!(out, "config_digest {}", sha256_hex(&config));
        let _ = writeln!(out, "config {config}");
        let _ = writeln!(out, "vocab {} {}", self.vocab.len(), self.vocab.digest());
        for t in self.vocab.tokens() {
            let _ = writeln!(out, "{}", serde_json::to_string(t).expect("string"));
        }
        let _ = writeln!(out, "rng {} {}", self.rng_seed, self.rng_position);
        let _ = writeln!(out, "progress {} {}", self.epoch, self.step);
        let _ = writeln!(
            out,
            "adamax {} {:.16e} {:.16e} {:.16e} {:.16e}",
            self.adamax_t, self.beta1, self.beta2, self.lr, self.eps
        );
        let _ = writeln!(out, "params {}", self.params.len());
        for p in &self.params {
            let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(out, "param {} {} {}", p.name, u8::from(p.trainable), dims.join("x"));
            push_floats(&mut out, "values", p.value.data());
            push_floats(&mut out, "m", &p.m);
            push_floats(&mut out, "u", &p.u);
        }
        out.push_str("end\n");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Ok(Self::parse(&text)?)
    }

    pub fn parse(text: &str) -> Result<Self, CheckpointError> {
        let mut r = Reader {
            lines: text.lines().collect(),
            next: 0,
        };
        let header = r.lines.first().copied().unwrap_or("");
        if header != CHECKPOINT_HEADER {
            return Err(CheckpointError::Version(header.to_string()));
        }
        if r.lines.last().copied() != Some("end") {
            return Err(CheckpointError::Truncated("missing end marker".into()));
        }
        r.next = 1;

        let digest = r.field("config_digest")?.to_string();
        let config = r.field("config")?;
        if sha256_hex(config) != digest {
            return Err(r.malformed("config digest does not match config"));
        }
        let record: ConfigRecord =
            serde_json::from_str(config).map_err(|e| r.malformed(&format!("config: {e}")))?;

        let vocab_line: Vec<&str> = r.field("vocab")?.split(' ').collect();
        let (n, vocab_digest) = match vocab_line[..] {
            [n, d] => (r.num::<usize>(n)?, d.to_string()),
            _ => return Err(r.malformed("vocab line needs a count and a digest")),
        };
        let mut tokens = Vec::with_capacity(n);
        for _ in 0..n {
            let line = r.line()?;
            tokens.push(
                serde_json::from_str::<String>(line).map_err(|e| r.malformed(&format!("token: {e}")))?,
            );
        }
        let vocab = Vocabulary::from_ordered(tokens).ok_or_else(|| r.malformed("invalid vocabulary"))?;
        if vocab.digest() != vocab_digest {
            return Err(r.malformed("vocabulary digest mismatch"));
        }

        let rng: Vec<&str> = r.field("rng")?.split(' ').collect();
        let [seed, position] = rng[..] else {
            return Err(r.malformed("rng line needs seed and position"));
        };
        let (rng_seed, rng_position) = (r.num(seed)?, r.num(position)?);
        let progress: Vec<&str> = r.field("progress")?.split(' ').collect();
        let [epoch, step] = progress[..] else {
            return Err(r.malformed("progress line needs epoch and step"));
        };
        let (epoch, step) = (r.num(epoch)?, r.num(step)?);
        let adamax: Vec<&str> = r.field("adamax")?.split(' ').collect();
        let [t, b1, b2, lr, eps] = adamax[..] else {
            return Err(r.malformed("adamax line needs t, beta1, beta2, lr, eps"));
        };
        let (adamax_t, beta1, beta2, lr, eps) =
            (r.num(t)?, r.num(b1)?, r.num(b2)?, r.num(lr)?, r.num(eps)?);

        let count = r.field("params")?;
        let count: usize = r.num(count)?;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let head: Vec<&str> = r.field("param")?.split(' ').collect();
            let [name, trainable, dims] = head[..] else {
                return Err(r.malformed("param line needs name, trainable flag and shape"));
            };
            let shape = dims
                .split('x')
                .map(|d| r.num::<usize>(d))
                .collect::<Result<Vec<_>, _>>()?;
            let len: usize = shape.iter().product();
            let values = r.floats("values", len)?;
            let m = r.floats("m", len)?;
            let u = r.floats("u", len)?;
            params.push(SavedParam {
                name: name.to_string(),
                trainable: trainable == "1",
                value: Tensor::new(shape, values).map_err(|e| r.malformed(&e.to_string()))?,
                m,
                u,
            });
        }
        if r.line()? != "end" || r.next != r.lines.len() {
            return Err(r.malformed("expected end marker after the last parameter"));
        }
        Ok(Checkpoint {
            model_config: record.model,
            train_config: record.train,
            vocab,
            rng_seed,
            rng_position,
            epoch,
            step,
            adamax_t,
            beta1,
            beta2,
            lr,
            eps,
            params,
        })
    }

    /// Copies the saved parameter values into `model`, which must have the
    /// same parameters with the same shapes.
    pub fn restore_into(&self, model: &mut QaModel) -> Result<(), CheckpointError> {
        if model.store.len() != self.params.len() {
            return Err(CheckpointError::Malformed {
                line: 0,
                message: format!(
                    "checkpoint has {} parameters, model has {}",
                    self.params.len(),
                    model.store.len()
                ),
            });
        }
        let ids: Vec<_> = model.store.ids().collect();
        for (id, saved) in ids.into_iter().zip(&self.params) {
            let current = model.store.get(id);
            if current.name != saved.name {
                return Err(CheckpointError::Malformed {
                    line: 0,
                    message: format!("expected parameter {}, found {}", current.name, saved.name),
                });
            }
            if current.value.shape() != saved.value.shape() {
                return Err(CheckpointError::Shape {
                    name: saved.name.clone(),
                    expected: current.value.shape().to_vec(),
                    found: saved.value.shape().to_vec(),
                });
            }
        }
        let ids: Vec<_> = model.store.ids().collect();
        for (id, saved) in ids.into_iter().zip(&self.params) {
            *model.store.value_mut(id) = saved.value.clone();
        }
        Ok(())
    }

    /// Rebuilds the model described by the stored config and loads it.
    pub fn to_model(&self) -> Result<QaModel> {
        let emb = Tensor::zeros(&[self.vocab.len(), self.model_config.embed_dim]);
        let mut model = QaModel::new(self.model_config.clone(), self.vocab.clone(), emb, 0)?;
        self.restore_into(&mut model)?;
        Ok(model)
    }

    pub fn into_trainer(self) -> Result<Trainer> {
        let model = self.to_model()?;
        let optimizer = AdamaxState {
            beta1: self.beta1,
            beta2: self.beta2,
            lr: self.lr,
            eps: self.eps,
            t: self.adamax_t,
            m: self.params.iter().map(|p| p.m.clone()).collect(),
            u: self.params.iter().map(|p| p.u.clone()).collect(),
        };
        Ok(Trainer {
            model,
            config: self.train_config,
            optimizer,
            rng: RngState::at_position(self.rng_seed, self.rng_position),
            epoch: self.epoch,
            step: self.step,
        })
    }
}

struct Reader<'a> {
    lines: Vec<&'a str>,
    next: usize,
}

impl<'a> Reader<'a> {
    fn malformed(&self, message: &str) -> CheckpointError {
        CheckpointError::Malformed {
            line: self.next,
            message: message.to_string(),
        }
    }

    fn line(&mut self) -> Result<&'a str, CheckpointError> {
        let line = self
            .lines
            .get(self.next)
            .copied()
            .ok_or_else(|| CheckpointError::Truncated(format!("ended at line {}", self.next)))?;
        self.next += 1;
        Ok(line)
    }

    fn field(&mut self, tag: &str) -> Result<&'a str, CheckpointError> {
        let line = self.line()?;
        match line.split_once(' ') {
            Some((t, rest)) if t == tag => Ok(rest),
            _ => Err(self.malformed(&format!("expected {tag} line"))),
        }
    }

    fn num<T: std::str::FromStr>(&self, s: &str) -> Result<T, CheckpointError> {
        s.parse()
            .map_err(|_| self.malformed(&format!("bad number {s:?}")))
    }

    fn floats(&mut self, tag: &str, len: usize) -> Result<Vec<f64>, CheckpointError> {
        let line = self.line()?;
        let mut parts = line.split(' ');
        if parts.next() != Some(tag) {
            return Err(self.malformed(&format!("expected {tag} line")));
        }
        let values = parts.map(|v| self.num::<f64>(v)).collect::<Result<Vec<_>, _>>()?;
        if values.len() != len {
            return Err(self.malformed(&format!("{tag}: expected {len} values, found {}", values.len())));
        }
        Ok(values)
    }
}
