//! Scoring: answer normalization, exact match, accuracy, BLEU and the
//! correlation/significance statistics used by calibration and the harness.

mod bleu;
pub mod stats;

use serde::{Deserialize, Serialize};

use crate::domain::{GoldAnswer, GoldKind};
use crate::error::{Error, Result};

pub use bleu::{bleu, tokenize, BleuConfig, Smoothing, Tokenizer};
pub use stats::{point_biserial, CorrelationResult};

/// Which aggregate a task reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    #[default]
    Accuracy,
    Bleu4,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Accuracy => "accuracy",
            Self::Bleu4 => "bleu4",
        }
    }
}

const TERMINAL_PUNCT: [char; 4] = ['.', ',', '!', '?'];

/// Lowercase, trim, collapse whitespace, drop terminal `. , ! ?`.
pub fn normalize_answer(text: &str) -> String {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    let mut s = collapsed.as_str();
    loop {
        let next = s.trim_end_matches(TERMINAL_PUNCT).trim_end();
        if next.len() == s.len() {
            break;
        }
        s = next;
    }
    s.to_owned()
}

/// Letter of a multiple-choice answer: `"B"`, `"b"`, `"B: ..."`, `"B. ..."`,
/// `"B) ..."`, `"(B) ..."`.
pub fn option_letter(text: &str) -> Option<char> {
    split_option(text).map(|(c, _)| c)
}

/// Splits `"B: Lignin"` into `('B', "Lignin")`. A bare letter has an empty body.
fn split_option(text: &str) -> Option<(char, &str)> {
    let t = text.trim();
    let (t, paren) = match t.strip_prefix('(') {
        Some(r) => (r, true),
        None => (t, false),
    };
    let mut chars = t.chars();
    let c = chars.next().filter(char::is_ascii_alphabetic)?.to_ascii_uppercase();
    let rest = chars.as_str();
    if rest.is_empty() {
        return (!paren).then_some((c, ""));
    }
    if paren && !rest.starts_with(')') {
        return None;
    }
    let body = rest.strip_prefix([':', '.', ')'])?;
    if body.is_empty() || body.starts_with(char::is_whitespace) {
        Some((c, body.trim()))
    } else {
        None
    }
}

fn resolve_letter(pred: &str, options: &[String]) -> Option<char> {
    if let Some(c) = option_letter(pred) {
        return Some(c);
    }
    let np = normalize_answer(pred);
    options.iter().enumerate().find_map(|(i, o)| {
        let matches =
            split_option(o).is_some_and(|(_, body)| normalize_answer(body) == np) || normalize_answer(o) == np;
        matches.then(|| option_letter(o).unwrap_or((b'A' + i as u8) as char))
    })
}

/// Label correctness. With `options`, a matching option letter also counts.
pub fn exact_match(pred: &str, gold: &GoldAnswer, options: Option<&[String]>) -> Result<bool> {
    if gold.kind != GoldKind::Label {
        return Err(Error::InvalidGoldKind);
    }
    let gold_text = gold.primary();
    if normalize_answer(pred) == normalize_answer(gold_text) {
        return Ok(true);
    }
    if let Some(options) = options {
        let gold_letter = resolve_letter(gold_text, options);
        let pred_letter = resolve_letter(pred, options);
        if let (Some(g), Some(p)) = (gold_letter, pred_letter) {
            return Ok(g == p);
        }
    }
    Ok(false)
}

/// Mean exact match over `(prediction, gold, options)` records.
pub fn accuracy<'a, I>(records: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a str, &'a GoldAnswer, Option<&'a [String]>)>,
{
    let mut n = 0usize;
    let mut hits = 0usize;
    for (pred, gold, options) in records {
        n += 1;
        if exact_match(pred, gold, options)? {
            hits += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(hits as f64 / n as f64)
}

/// Per-sample score: 1/0 for labels, sentence BLEU-4 for captions.
pub fn score_prediction(pred: &str, gold: &GoldAnswer, options: Option<&[String]>) -> Result<f64> {
    match gold.kind {
        GoldKind::Label => Ok(if exact_match(pred, gold, options)? { 1.0 } else { 0.0 }),
        GoldKind::Caption => bleu(pred, &gold.texts, &BleuConfig::bleu4()),
    }
}
