//! Data model shared by every stage of the engine.
//!
//! Value types are immutable once built and `Send + Sync`. The [`Pool`] is the
//! only mutable structure; the pipeline serializes writes to it.

mod dataset;
mod pool;
mod snapshot;

use std::collections::BTreeMap;
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{read_dataset, validate_dataset, write_dataset, Violation};
pub use pool::Pool;
pub use snapshot::{load_pool, read_pool, save_pool, write_pool, SnapshotHeader};

/// Uncertainty gate used for classification and VQA tasks.
pub const DELTA_CLASSIFICATION: f64 = 0.4;
/// Uncertainty gate used for captioning.
pub const DELTA_CAPTIONING: f64 = 1.6;
/// Number of teacher generations per annotation.
pub const DEFAULT_TTS_N: usize = 3;
/// Pairwise BLEU-2 level above which captions count as consistent.
pub const DEFAULT_BLEU2_THRESHOLD: f64 = 0.5;

/// Reference to an image. The engine never reads the pixels; it only forwards
/// the reference (or the raw bytes behind it) to a backend.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageRef(pub String);

impl ImageRef {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoldKind {
    Label,
    Caption,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldAnswer {
    pub kind: GoldKind,
    pub texts: Vec<String>,
}

impl GoldAnswer {
    pub fn label(text: impl Into<String>) -> Self {
        Self {
            kind: GoldKind::Label,
            texts: vec![text.into()],
        }
    }

    pub fn captions<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            kind: GoldKind::Caption,
            texts: texts.into_iter().map(Into::into).collect(),
        }
    }

    /// First reference; for labels, the label itself.
    pub fn primary(&self) -> &str {
        self.texts.first().map(String::as_str).unwrap_or("")
    }

    pub fn check(&self) -> std::result::Result<(), &'static str> {
        if self.texts.is_empty() {
            return Err("gold answer has no reference texts");
        }
        if self.kind == GoldKind::Label && self.texts.len() != 1 {
            return Err("label gold answer must have exactly one text");
        }
        Ok(())
    }
}

/// One item of the evaluation stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub image: ImageRef,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<GoldAnswer>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: impl Into<String>, question: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            image: ImageRef::new(image),
            question: question.into(),
            options: None,
            gold: None,
        }
    }

    pub fn with_gold(mut self, gold: GoldAnswer) -> Self {
        self.gold = Some(gold);
        self
    }

    pub fn with_options(mut self, options: Vec<String>) -> Self {
        self.options = Some(options);
        self
    }

    pub fn options(&self) -> Option<&[String]> {
        self.options.as_deref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationKind {
    #[default]
    Label,
    LabelPlusDescription,
    LabelPlusCot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationSource {
    Teacher,
    StudentSelf,
    Oracle,
}

/// An answer attached to a pool sample.
///
/// `answer` is the label (or caption) that consistency checks compare;
/// `detail` carries the description or reasoning requested by the richer
/// annotation kinds and is only used when rendering demonstrations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub answer: String,
    pub kind: AnnotationKind,
    pub source: AnnotationSource,
    pub consistency_votes: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl Annotation {
    pub fn new(answer: impl Into<String>, source: AnnotationSource) -> Self {
        Self {
            answer: answer.into(),
            kind: AnnotationKind::Label,
            source,
            consistency_votes: 1,
            detail: None,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.answer.trim().is_empty() {
            return Err(Error::InvalidConfig("annotation answer is empty".into()));
        }
        if self.consistency_votes < 1 {
            return Err(Error::InvalidConfig("annotation needs at least one vote".into()));
        }
        Ok(())
    }

    /// Text placed in the answer slot of a demonstration block.
    pub fn render(&self) -> String {
        match (self.kind, self.detail.as_deref()) {
            (AnnotationKind::LabelPlusDescription, Some(d)) => {
                format!("{}\nDescription: {}", self.answer, d)
            }
            (AnnotationKind::LabelPlusCot, Some(d)) => format!("{}\nReasoning: {}", self.answer, d),
            _ => self.answer.clone(),
        }
    }
}

/// Pool entry with its cached image and text embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub sample: Sample,
    pub annotation: Annotation,
    pub image_embedding: Vec<f32>,
    pub text_embedding: Vec<f32>,
}

impl Demonstration {
    pub fn new(
        sample: Sample,
        annotation: Annotation,
        image_embedding: Vec<f32>,
        text_embedding: Vec<f32>,
    ) -> Result<Self> {
        if image_embedding.is_empty() {
            return Err(Error::DimensionMismatch { expected: 1, got: 0 });
        }
        if image_embedding.len() != text_embedding.len() {
            return Err(Error::DimensionMismatch {
                expected: image_embedding.len(),
                got: text_embedding.len(),
            });
        }
        if !image_embedding.iter().chain(&text_embedding).all(|v| v.is_finite()) {
            return Err(Error::NonFinite);
        }
        annotation.check()?;
        Ok(Self {
            sample,
            annotation,
            image_embedding,
            text_embedding,
        })
    }

    pub fn id(&self) -> &str {
        &self.sample.id
    }

    pub fn dimension(&self) -> usize {
        self.image_embedding.len()
    }
}

/// Probability distribution over a backend's vocabulary at one decoding step.
///
/// Token identifiers are scoped to the backend that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution {
    pub probs: BTreeMap<String, f64>,
    pub coverage: f64,
    pub is_truncated: bool,
}

impl TokenDistribution {
    pub fn new(probs: BTreeMap<String, f64>, is_truncated: bool) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("no tokens".into()));
        }
        for (token, &p) in &probs {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::InvalidDistribution(format!(
                    "probability {p} for token {token:?} outside (0, 1]"
                )));
            }
        }
        let coverage: f64 = probs.values().sum();
        if coverage > 1.0 + 1e-9 {
            return Err(Error::InvalidDistribution(format!("mass {coverage} exceeds 1")));
        }
        Ok(Self {
            probs,
            coverage,
            is_truncated,
        })
    }

    /// Full distribution; zero-probability entries are dropped.
    pub fn full<I, S>(probs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let probs = probs
            .into_iter()
            .filter(|(_, p)| *p > 0.0)
            .map(|(t, p)| (t.into(), p))
            .collect();
        Self::new(probs, false)
    }

    /// Top-k distribution reconstructed from log-probabilities.
    pub fn from_logprobs<I, S>(logprobs: I, is_truncated: bool) -> Result<Self>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let mut probs = BTreeMap::new();
        for (t, lp) in logprobs {
            let p = lp.exp().min(1.0);
            if p > 0.0 {
                *probs.entry(t.into()).or_insert(0.0) += p;
            }
        }
        // Duplicate token strings (distinct ids decoding to the same text) can push
        // a bucket marginally past 1.
        for p in probs.values_mut() {
            *p = f64::min(*p, 1.0);
        }
        let total: f64 = probs.values().sum();
        if total > 1.0 {
            for p in probs.values_mut() {
                *p /= total;
            }
        }
        Self::new(probs, is_truncated)
    }

    pub fn support(&self) -> usize {
        self.probs.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenCounts {
    pub prompt_tokens: u64,
    pub output_tokens: u64,
}

/// A generated answer with its per-step distributions.
///
/// `uncertainty` is `None` when the endpoint was not asked for token
/// probabilities (teachers usually are not).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub text: String,
    pub token_dists: Vec<TokenDistribution>,
    pub uncertainty: Option<f64>,
    pub latency: Duration,
    pub token_counts: TokenCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionParams {
    pub k_it_fraction: f64,
    pub k_ii: usize,
    pub k_tt: usize,
}

impl Default for SelectionParams {
    fn default() -> Self {
        Self {
            k_it_fraction: 0.5,
            k_ii: 10,
            k_tt: 3,
        }
    }
}

impl SelectionParams {
    pub fn new(k_it_fraction: f64, k_ii: usize, k_tt: usize) -> Result<Self> {
        let p = Self {
            k_it_fraction,
            k_ii,
            k_tt,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k_it_fraction > 0.0 && self.k_it_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "k_it_fraction {} outside (0, 1]",
                self.k_it_fraction
            )));
        }
        if self.k_ii == 0 || self.k_tt == 0 {
            return Err(Error::InvalidConfig("k_ii and k_tt must be positive".into()));
        }
        if self.k_tt > self.k_ii {
            return Err(Error::InvalidConfig(format!(
                "k_tt ({}) exceeds k_ii ({})",
                self.k_tt, self.k_ii
            )));
        }
        Ok(())
    }

    /// Stage-one cut for a pool of `pool_len` entries.
    pub fn k_it(&self, pool_len: usize) -> usize {
        ((self.k_it_fraction * pool_len as f64).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    #[serde(with = "float_or_inf")]
    pub delta: f64,
    pub tts_n: usize,
    pub bleu2_consistency_threshold: f64,
    pub epsilon_significance: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            delta: DELTA_CLASSIFICATION,
            tts_n: DEFAULT_TTS_N,
            bleu2_consistency_threshold: DEFAULT_BLEU2_THRESHOLD,
            epsilon_significance: 0.05,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta.is_nan() || self.delta < 0.0 {
            return Err(Error::InvalidConfig(format!("delta {} must be >= 0", self.delta)));
        }
        if self.tts_n == 0 {
            return Err(Error::InvalidConfig("tts_n must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.bleu2_consistency_threshold) {
            return Err(Error::InvalidConfig("bleu2 threshold outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// JSON has no infinity; `+inf` is written as the string `"inf"`.
pub mod float_or_inf {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && v.is_sign_positive() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" || s == "+inf" || s == "infinity" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(de::Error::custom(format!("expected number or \"inf\", got {s:?}"))),
        }
    }
}
