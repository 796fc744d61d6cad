//! Exact match, token-level F1, cloze accuracy and sentence-length
//! bucketing.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// Lowercase, drop ASCII punctuation, drop the articles a/an/the and split
/// on whitespace.
pub fn normalize_answer(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    cleaned
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .map(String::from)
        .collect()
}

/// 1 if the normalized prediction equals any normalized gold answer.
pub fn exact_match<S: AsRef<str>>(pred: &str, golds: &[S]) -> f64 {
    let p = normalize_answer(pred);
    let hit = golds.iter().any(|g| normalize_answer(g.as_ref()) == p);
    if hit {
        1.0
    } else {
        0.0
    }
}

fn f1_single(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for t in gold {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut overlap = 0;
    for t in pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Bag-of-tokens F1 against the best-matching gold answer.
pub fn f1_score<S: AsRef<str>>(pred: &str, golds: &[S]) -> f64 {
    let p = normalize_answer(pred);
    golds
        .iter()
        .map(|g| f1_single(&p, &normalize_answer(g.as_ref())))
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Span,
    Cloze,
}

/// Per-example outcome. For cloze examples `em` and `f1` both hold the
/// 0/1 correctness.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExampleScore {
    pub em: f64,
    pub f1: f64,
    /// Average sentence length `M / L` of the example's passage.
    pub avg_sentence_len: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BucketReport {
    pub index: usize,
    pub n: usize,
    pub min_avg_len: f64,
    pub max_avg_len: f64,
    pub em: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub task: TaskKind,
    pub n_examples: usize,
    pub em: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub buckets: Vec<BucketReport>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl MetricReport {
    pub fn from_scores(task: TaskKind, scores: &[ExampleScore]) -> Self {
        let em = mean(scores.iter().map(|s| s.em));
        MetricReport {
            task,
            n_examples: scores.len(),
            em,
            f1: mean(scores.iter().map(|s| s.f1)),
            accuracy: em,
            buckets: Vec::new(),
        }
    }

    pub fn with_buckets(mut self, scores: &[ExampleScore], n_buckets: usize) -> Self {
        self.buckets = bucket_by_sentence_length(scores, n_buckets).buckets;
        self
    }

    /// `metric,bucket,value,n` rows; bucket `all` is the whole dataset.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,bucket,value,n\n");
        let names: &[&str] = match self.task {
            TaskKind::Span => &["em", "f1"],
            TaskKind::Cloze => &["accuracy"],
        };
        for name in names {
            let v = if *name == "f1" { self.f1 } else { self.em };
            let _ = writeln!(out, "{name},all,{v},{}", self.n_examples);
        }
        for b in &self.buckets {
            for name in names {
                let v = if *name == "f1" { b.f1 } else { b.em };
                let _ = writeln!(out, "{name},{},{v},{}", b.index, b.n);
            }
            let _ = writeln!(out, "avg_len_min,{},{},{}", b.index, b.min_avg_len, b.n);
            let _ = writeln!(out, "avg_len_max,{},{},{}", b.index, b.max_avg_len, b.n);
        }
        out
    }

    /// One row per sentence-length bucket.
    pub fn buckets_csv(&self) -> String {
        let mut out = String::from("bucket,n,min_avg_len,max_avg_len,");
        out.push_str(match self.task {
            TaskKind::Span => "em,f1\n",
            TaskKind::Cloze => "accuracy\n",
        });
        for b in &self.buckets {
            let _ = write!(out, "{},{},{},{},{}", b.index, b.n, b.min_avg_len, b.max_avg_len, b.em);
            if self.task == TaskKind::Span {
                let _ = write!(out, ",{}", b.f1);
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bucketing {
    /// Bucket (0-based) of each input example.
    pub assignment: Vec<usize>,
    pub buckets: Vec<BucketReport>,
    pub warning: Option<String>,
}

/// Sorts examples by average sentence length (stable, so ties keep input
/// order) and cuts them into equal-population groups. The first
/// `n % n_buckets` groups take one extra example.
pub fn bucket_by_sentence_length(scores: &[ExampleScore], n_buckets: usize) -> Bucketing {
    let mut warning = None;
    let mut k = n_buckets.max(1);
    if scores.len() < k {
        warning = Some(format!(
            "{} passages is fewer than {k} buckets; using a single bucket",
            scores.len()
        ));
        k = 1;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].avg_sentence_len.total_cmp(&scores[b].avg_sentence_len));

    let base = scores.len() / k;
    let extra = scores.len() % k;
    let mut assignment = vec![0; scores.len()];
    let mut buckets = Vec::with_capacity(k);
    let mut cursor = 0;
    for b in 0..k {
        let size = base + usize::from(b < extra);
        let members = &order[cursor..cursor + size];
        for &m in members {
            assignment[m] = b;
        }
        let lens = members.iter().map(|&m| scores[m].avg_sentence_len);
        buckets.push(BucketReport {
            index: b + 1,
            n: size,
            min_avg_len: lens.clone().fold(f64::INFINITY, f64::min),
            max_avg_len: lens.fold(f64::NEG_INFINITY, f64::max),
            em: mean(members.iter().map(|&m| scores[m].em)),
            f1: mean(members.iter().map(|&m| scores[m].f1)),
        });
        cursor += size;
    }
    Bucketing {
        assignment,
        buckets,
        warning,
    }
}
