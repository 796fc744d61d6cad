//! Per-word gate records, text heatmaps, global token rankings and
//! per-hop gate distributions.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::models::GateTrace;
use crate::text::Passage;

#[derive(Clone, Debug, PartialEq)]
pub struct GateRecord {
    pub example_id: String,
    /// 1-based hop.
    pub hop: usize,
    pub token: String,
    /// Flat word position in the passage.
    pub position: usize,
    /// Gate value averaged over the `2d` coordinates.
    pub mean: f64,
}

/// One record per (hop, word).
pub fn trace_to_records(example_id: &str, trace: &GateTrace, passage: &Passage) -> Result<Vec<GateRecord>> {
    let m = passage.num_words();
    let mut out = Vec::with_capacity(trace.num_hops() * m);
    for (h, f) in trace.hops.iter().enumerate() {
        if f.rank() != 2 || f.rows() != m {
            return Err(Error::Contract(format!(
                "hop {} gate matrix {:?} does not cover {m} passage words",
                h + 1,
                f.shape()
            )));
        }
        for (position, (token, mean)) in passage.flat_tokens().iter().zip(trace.word_means(h)).enumerate() {
            out.push(GateRecord {
                example_id: example_id.to_string(),
                hop: h + 1,
                token: token.clone(),
                position,
                mean,
            });
        }
    }
    Ok(out)
}

/// Nearest-rank quantile of ascending `sorted`: the element at rank
/// `ceil(p·n)` (at least 1).
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

fn sorted(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Intensity level 1..=5 of each value: one plus the number of quintile
/// cut points (nearest rank at 20/40/60/80%) strictly below it. A
/// constant sequence sits at level 3.
pub fn quantize_levels(values: &[f64]) -> Vec<u8> {
    if values.is_empty() {
        return Vec::new();
    }
    let s = sorted(values.iter().copied());
    if s[0] == s[s.len() - 1] {
        return vec![3; values.len()];
    }
    let cuts: Vec<f64> = [0.2, 0.4, 0.6, 0.8].iter().map(|&p| nearest_rank(&s, p)).collect();
    values
        .iter()
        .map(|&v| 1 + cuts.iter().filter(|&&c| c < v).count() as u8)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// One line per sentence: `token/level` pairs.
    pub lines: Vec<String>,
    /// `token,value,hop,example_id` rows with a header.
    pub csv: String,
}

/// Text heatmap of one example at one hop. `records` may hold other
/// examples or hops; they are ignored.
pub fn render_heatmap_text(records: &[GateRecord], passage: &Passage, example_id: &str, hop: usize) -> Result<Heatmap> {
    let mut rows: Vec<&GateRecord> = records
        .iter()
        .filter(|r| r.example_id == example_id && r.hop == hop)
        .collect();
    rows.sort_by_key(|r| r.position);
    if rows.len() != passage.num_words() {
        return Err(Error::Contract(format!(
            "{} records for example {example_id} hop {hop}, passage has {} words",
            rows.len(),
            passage.num_words()
        )));
    }
    let levels = quantize_levels(&rows.iter().map(|r| r.mean).collect::<Vec<_>>());
    let lines = (0..passage.num_sentences())
        .map(|i| {
            passage
                .sentence_range(i)
                .map(|t| format!("{}/{}", rows[t].token, levels[t]))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    Ok(Heatmap {
        lines,
        csv: heatmap_csv(rows.iter().copied())?,
    })
}

fn heatmap_csv<'a>(rows: impl Iterator<Item = &'a GateRecord>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Contract(format!("csv: {e}"));
    w.write_record(["token", "value", "hop", "example_id"]).map_err(err)?;
    for r in rows {
        w.write_record([r.token.as_str(), &r.mean.to_string(), &r.hop.to_string(), &r.example_id])
            .map_err(err)?;
    }
    finish(w)
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Contract(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Contract(format!("csv: {e}")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenStat {
    pub token: String,
    pub mean: f64,
    pub count: usize,
}

/// Token types with at least `min_count` records, by mean gate value
/// descending (ties by token).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenRanking {
    pub ranked: Vec<TokenStat>,
}

impl TokenRanking {
    pub fn highest(&self, k: usize) -> &[TokenStat] {
        &self.ranked[..k.min(self.ranked.len())]
    }

    /// The `k` lowest, lowest first.
    pub fn lowest(&self, k: usize) -> Vec<&TokenStat> {
        self.ranked.iter().rev().take(k).collect()
    }

    /// `token,mean,count` rows with a header.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Contract(format!("csv: {e}"));
        w.write_record(["token", "mean", "count"]).map_err(err)?;
        for s in &self.ranked {
            w.write_record([s.token.as_str(), &s.mean.to_string(), &s.count.to_string()])
                .map_err(err)?;
        }
        finish(w)
    }
}

pub fn rank_tokens_global(records: &[GateRecord], min_count: usize) -> Result<TokenRanking> {
    if records.is_empty() {
        return Err(Error::Contract("no gate records to rank".into()));
    }
    let mut acc: HashMap<&str, (f64, usize)> = HashMap::new();
    for r in records {
        let e = acc.entry(&r.token).or_insert((0.0, 0));
        e.0 += r.mean;
        e.1 += 1;
    }
    let mut ranked: Vec<TokenStat> = acc
        .into_iter()
        .filter(|(_, (_, n))| *n >= min_count)
        .map(|(t, (sum, n))| TokenStat {
            token: t.to_string(),
            mean: sum / n as f64,
            count: n,
        })
        .collect();
    ranked.sort_by(|a, b| b.mean.total_cmp(&a.mean).then_with(|| a.token.cmp(&b.token)));
    Ok(TokenRanking { ranked })
}

#[derive(Clone, Debug, PartialEq)]
pub struct HopStats {
    pub hop: usize,
    /// Passages contributing one value each.
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

/// Per hop, the distribution over passages of each passage's mean gate
/// value (averaged over words and dimensions).
pub fn hop_distribution_stats(records: &[GateRecord]) -> Vec<HopStats> {
    // (hop, example) -> (sum, count); example order is first appearance.
    let mut order: Vec<&str> = Vec::new();
    let mut seen = HashSet::new();
    let mut sums: HashMap<(usize, &str), (f64, usize)> = HashMap::new();
    for r in records {
        let key = (r.hop, r.example_id.as_str());
        if seen.insert(key.1) {
            order.push(key.1);
        }
        let e = sums.entry(key).or_insert((0.0, 0));
        e.0 += r.mean;
        e.1 += 1;
    }
    let mut hops: Vec<usize> = sums.keys().map(|k| k.0).collect();
    hops.sort_unstable();
    hops.dedup();
    hops.into_iter()
        .map(|hop| {
            let per_passage: Vec<f64> = order
                .iter()
                .filter_map(|ex| sums.get(&(hop, *ex)).map(|(s, n)| s / *n as f64))
                .collect();
            let s = sorted(per_passage.iter().copied());
            HopStats {
                hop,
                n: s.len(),
                min: s[0],
                q1: nearest_rank(&s, 0.25),
                median: nearest_rank(&s, 0.5),
                q3: nearest_rank(&s, 0.75),
                max: s[s.len() - 1],
                mean: per_passage.iter().sum::<f64>() / s.len() as f64,
            }
        })
        .collect()
}

/// `hop,min,q1,median,q3,max,mean` rows with a header.
pub fn hop_stats_csv(stats: &[HopStats]) -> String {
    let mut out = String::from("hop,min,q1,median,q3,max,mean\n");
    for s in stats {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.hop, s.min, s.q1, s.median, s.q3, s.max, s.mean
        ));
    }
    out
}
