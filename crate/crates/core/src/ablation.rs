//! Sweeps over combiner, matching and sentence-encoder choices, scored
//! with one shared training recipe.

use std::fmt::Write as _;

use crate::encoders::SentenceEncoding;
use crate::error::Result;
use crate::gate::Combiner;
use crate::models::{ModelConfig, QaModel};
use crate::text::QaExample;
use crate::train::{evaluate, TrainConfig, Trainer};

/// One model configuration in a sweep. `table` groups rows the way they
/// are reported: `combiner` or `encoder`.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub table: &'static str,
    pub model: ModelConfig,
}

/// Concatenation, scalar gate and vector gate, each without and with
/// question matching.
pub fn combiner_variants(base: &ModelConfig) -> Vec<Variant> {
    let mut out = Vec::with_capacity(6);
    for combiner in [Combiner::Concatenation, Combiner::ScalarGate, Combiner::VectorGate] {
        for matching in [false, true] {
            out.push(Variant {
                table: "combiner",
                model: ModelConfig {
                    combiner,
                    matching,
                    ..base.clone()
                },
            });
        }
    }
    out
}

/// The four sentence encoders under the base combiner.
pub fn encoder_variants(base: &ModelConfig) -> Vec<Variant> {
    [
        SentenceEncoding::BigruLast,
        SentenceEncoding::MaxPooling,
        SentenceEncoding::InnerAttention,
        SentenceEncoding::AveragePooling,
    ]
    .into_iter()
    .map(|encoder| Variant {
        table: "encoder",
        model: ModelConfig {
            encoder,
            ..base.clone()
        },
    })
    .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub epochs: usize,
    pub final_loss: f64,
    pub train_em: f64,
    pub train_f1: f64,
    pub heldout_em: f64,
    pub heldout_f1: f64,
}

fn snake<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|j| j.as_str().map(String::from))
        .unwrap_or_default()
}

/// Trains `variant` from scratch on `train` for `config.epochs` epochs
/// and scores it on both sets.
pub fn run_variant(
    variant: &Variant,
    train: &[QaExample],
    heldout: &[QaExample],
    config: &TrainConfig,
) -> Result<AblationRow> {
    let model = QaModel::for_dataset(variant.model.clone(), train, config.seed)?;
    let mut trainer = Trainer::new(model, config.clone())?;
    let mut final_loss = f64::NAN;
    for _ in 0..config.epochs {
        final_loss = trainer.train_epoch(train)?.mean_loss;
    }
    let on_train = evaluate(&trainer.model, train, false)?.report;
    let on_heldout = evaluate(&trainer.model, heldout, false)?.report;
    Ok(AblationRow {
        variant: variant.clone(),
        epochs: config.epochs,
        final_loss,
        train_em: on_train.em,
        train_f1: on_train.f1,
        heldout_em: on_heldout.em,
        heldout_f1: on_heldout.f1,
    })
}

/// `table,combiner,matching,encoder,epochs,final_loss,train_em,train_f1,heldout_em,heldout_f1`.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out =
        String::from("table,combiner,matching,encoder,epochs,final_loss,train_em,train_f1,heldout_em,heldout_f1\n");
    for r in rows {
        let m = &r.variant.model;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.variant.table,
            snake(&m.combiner),
            m.matching,
            snake(&m.encoder),
            r.epochs,
            r.final_loss,
            r.train_em,
            r.train_f1,
            r.heldout_em,
            r.heldout_f1
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweeps_cover_every_setting_once() {
        let base = ModelConfig::default();
        let c = combiner_variants(&base);
        assert_eq!(c.len(), 6);
        for (i, a) in c.iter().enumerate() {
            assert!(c[i + 1..].iter().all(|b| b.model != a.model));
        }
        let e = encoder_variants(&base);
        assert_eq!(e.len(), 4);
        assert!(e.iter().all(|v| v.model.combiner == Combiner::VectorGate && v.model.matching));
    }

    #[test]
    fn csv_names_settings() {
        let v = &combiner_variants(&ModelConfig::default())[2];
        let row = AblationRow {
            variant: v.clone(),
            epochs: 3,
            final_loss: 1.5,
            train_em: 1.0,
            train_f1: 1.0,
            heldout_em: 0.5,
            heldout_f1: 0.75,
        };
        let csv = ablation_csv(&[row]);
        assert_eq!(
            csv.lines().nth(1),
            Some("combiner,scalar_gate,false,average_pooling,3,1.5,1,1,0.5,0.75")
        );
    }
}
