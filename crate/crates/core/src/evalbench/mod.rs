//! Summary metrics, the low-resource evaluation protocol and the
//! word-distribution shift analysis.

mod scenario;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use scenario::{
    evaluate_once, fold_partition, run_scenario, summarize, Evaluation, MetricsReport, Pipeline, ProjectMetrics, RunManifest, ScenarioContext,
    ScenarioSpec, TupleResult,
};

const ROUGE_BETA: f64 = 1.2;

pub(crate) fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap and the two totals `(overlap, candidate, reference)`.
fn overlap(candidate: &[String], reference: &[String], n: usize) -> (usize, usize, usize) {
    let c = ngram_counts(candidate, n);
    let r = ngram_counts(reference, n);
    let hit = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    (hit, c.values().sum(), r.values().sum())
}

/// Corpus-level BLEU-4 on a 0-100 scale. Zero n-gram matches for n >= 2 are
/// add-one smoothed; no unigram match scores 0.
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Contract("bleu needs at least one candidate".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Contract(format!(
            "bleu: {} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    let mut hits = [0usize; 4];
    let mut totals = [0usize; 4];
    for (c, r) in candidates.iter().zip(references) {
        for n in 1..=4 {
            let (h, t, _) = overlap(c, r, n);
            hits[n - 1] += h;
            totals[n - 1] += t;
        }
    }
    let cand_len: usize = candidates.iter().map(Vec::len).sum();
    let ref_len: usize = references.iter().map(Vec::len).sum();
    if cand_len == 0 || hits[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        let p = if n > 0 && hits[n] == 0 {
            1.0 / (totals[n] as f64 + 1.0)
        } else {
            hits[n] as f64 / totals[n] as f64
        };
        log_sum += p.ln();
    }
    let bp = if cand_len >= ref_len { 1.0 } else { (1.0 - ref_len as f64 / cand_len as f64).exp() };
    Ok(100.0 * bp * (log_sum / 4.0).exp())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// ROUGE-L F-measure (beta 1.2) on a 0-100 scale; empty input scores 0.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    100.0 * (1.0 + b2) * p * r / (r + b2 * p)
}

/// ROUGE-N `(recall, precision)` in `[0, 1]`.
pub fn rouge_n(candidate: &[String], reference: &[String], n: usize) -> (f64, f64) {
    let (hit, c, r) = overlap(candidate, reference, n);
    let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    (div(hit, r), div(hit, c))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordShiftRow {
    pub word: String,
    /// 0-based rank by global count; unknown words rank after all known ones.
    pub global_rank: usize,
    pub global_count: u64,
    pub count_a: u64,
    pub count_b: u64,
    pub delta_count: i64,
    pub high_freq: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordShift {
    pub rows: Vec<WordShiftRow>,
    /// Number of words flagged `high_freq`.
    pub high_freq_cutoff: usize,
}

impl WordShift {
    pub fn total_delta(&self) -> i64 {
        self.rows.iter().map(|r| r.delta_count).sum()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("rank\tword\tglobal_count\tcount_a\tcount_b\tdelta\thigh_freq\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.global_rank, r.word, r.global_count, r.count_a, r.count_b, r.delta_count, r.high_freq
            ));
        }
        out
    }
}

fn word_counts(outs: &[Vec<String>]) -> HashMap<&str, u64> {
    let mut m: HashMap<&str, u64> = HashMap::new();
    for w in outs.iter().flatten() {
        *m.entry(w.as_str()).or_insert(0) += 1;
    }
    m
}

/// Per-word count changes from system A to system B, ordered by global
/// frequency (ties lexicographic). The top 5% of known words by rank are
/// flagged high-frequency.
pub fn word_shift(outputs_a: &[Vec<String>], outputs_b: &[Vec<String>], global_freq: &HashMap<String, u64>) -> WordShift {
    let (ca, cb) = (word_counts(outputs_a), word_counts(outputs_b));
    let mut known: Vec<(&str, u64)> = global_freq.iter().map(|(w, &c)| (w.as_str(), c)).collect();
    known.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let mut unknown: Vec<&str> =
        ca.keys().chain(cb.keys()).copied().filter(|w| !global_freq.contains_key(*w)).collect();
    unknown.sort_unstable();
    unknown.dedup();
    let cutoff = (known.len() as f64 * 0.05).ceil() as usize;
    let rows = known
        .into_iter()
        .chain(unknown.into_iter().map(|w| (w, 0)))
        .enumerate()
        .map(|(rank, (w, g))| {
            let a = ca.get(w).copied().unwrap_or(0);
            let b = cb.get(w).copied().unwrap_or(0);
            WordShiftRow {
                word: w.to_string(),
                global_rank: rank,
                global_count: g,
                count_a: a,
                count_b: b,
                delta_count: b as i64 - a as i64,
                high_freq: rank < cutoff,
            }
        })
        .collect();
    WordShift { rows, high_freq_cutoff: cutoff }
}
