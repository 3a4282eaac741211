//! Sentence-level BLEU with clipped n-gram precision and brevity penalty.
//!
//! A candidate shorter than `max_n` tokens is scored over the orders it has.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    #[default]
    None,
    /// `(0 + 1) / (total + 1)` for an order whose clipped match count is zero.
    AddOneOnZeroCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenizer {
    /// Split on whitespace after isolating every ASCII punctuation character.
    #[default]
    WhitespacePunct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BleuConfig {
    pub max_n: usize,
    pub smoothing: Smoothing,
    pub case_fold: bool,
    pub tokenizer: Tokenizer,
}

impl BleuConfig {
    /// Reported captioning metric: BLEU-4, no smoothing.
    pub fn bleu4() -> Self {
        Self {
            max_n: 4,
            smoothing: Smoothing::None,
            case_fold: true,
            tokenizer: Tokenizer::WhitespacePunct,
        }
    }

    /// Caption consistency check: smoothed BLEU-2.
    pub fn bleu2_smoothed() -> Self {
        Self {
            max_n: 2,
            smoothing: Smoothing::AddOneOnZeroCounts,
            case_fold: true,
            tokenizer: Tokenizer::WhitespacePunct,
        }
    }
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self::bleu4()
    }
}

pub fn tokenize(text: &str, cfg: &BleuConfig) -> Vec<String> {
    let text = if cfg.case_fold {
        text.to_lowercase()
    } else {
        text.to_owned()
    };
    match cfg.tokenizer {
        Tokenizer::WhitespacePunct => {
            let mut spaced = String::with_capacity(text.len() + 8);
            for c in text.chars() {
                if c.is_ascii_punctuation() {
                    spaced.push(' ');
                    spaced.push(c);
                    spaced.push(' ');
                } else {
                    spaced.push(c);
                }
            }
            spaced.split_whitespace().map(str::to_owned).collect()
        }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Length of the reference closest to `c`; ties go to the shorter one.
fn closest_ref_len(c: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

pub fn bleu<S: AsRef<str>>(candidate: &str, references: &[S], cfg: &BleuConfig) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(1..=4).contains(&cfg.max_n) {
        return Err(Error::InvalidConfig(format!("BLEU max_n {} outside 1..=4", cfg.max_n)));
    }
    let cand = tokenize(candidate, cfg);
    if cand.is_empty() {
        return Ok(0.0);
    }
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r.as_ref(), cfg)).collect();

    // Orders longer than the candidate have no n-grams and are left out of
    // the geometric mean.
    let orders = cfg.max_n.min(cand.len());
    let mut log_sum = 0.0;
    for n in 1..=orders {
        let cand_counts = ngram_counts(&cand, n);
        let total: usize = cand_counts.values().sum();
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in &refs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let matches: usize = cand_counts
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        let p = match (matches, cfg.smoothing) {
            (0, Smoothing::None) => return Ok(0.0),
            (0, Smoothing::AddOneOnZeroCounts) => 1.0 / (total as f64 + 1.0),
            (m, _) => m as f64 / total as f64,
        };
        log_sum += p.ln();
    }

    let c = cand.len();
    let r = closest_ref_len(c, &refs);
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok((bp * (log_sum / orders as f64).exp()).clamp(0.0, 1.0))
}
