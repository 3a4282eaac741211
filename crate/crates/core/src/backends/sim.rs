//! Seeded stand-ins for a student/teacher VLM and a multimodal encoder.
//!
//! A [`SimWorld`] knows the class and gold answer of every image in the
//! datasets it was built from. Image references of the form
//! `sim://{task}/{class}/{id}` carry their class; otherwise the class is the
//! normalized label (or, for captions, the image reference itself).
//!
//! The simulated agent answers correctly with probability
//! `min(cap, competence + gain * m)` where `m` counts demonstrations whose
//! image shares the query's class and whose answer is correct for that image.
//! Its per-step entropy is drawn from one of two normal distributions
//! depending on correctness.
//!
//! Randomness is a pure function of the profile seed, the request content and,
//! for temperature > 0, the draw index and how many times the same request has
//! been seen. Temperature 0 therefore replays the same answer for the same
//! prompt.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{AnnotationKind, GoldAnswer, GoldKind, ImageRef, Sample, TokenCounts, TokenDistribution};
use crate::metrics::{exact_match, normalize_answer};

use super::prompt::{build_prompt, PromptPart};
use super::{BackendError, EmbedContent, Encoder, GenerationRequest, Generator, RawGeneration};

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive 64-bit mix of several seeds.
pub fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5eed, |h, &p| splitmix(h ^ p))
}

fn name_tokens(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// `sim://task/class/id` -> `class`.
fn class_from_ref(r: &str) -> Option<&str> {
    let rest = r.strip_prefix("sim://")?;
    let mut it = rest.split('/');
    let (_task, class, _id) = (it.next()?, it.next()?, it.next()?);
    (!class.is_empty()).then_some(class)
}

#[derive(Debug, Clone)]
struct ImageFacts {
    class: String,
    truth: GoldAnswer,
    options: Option<Vec<String>>,
}

/// Ground truth shared by simulated agents and the simulated encoder.
#[derive(Debug, Clone, Default)]
pub struct SimWorld {
    images: HashMap<String, ImageFacts>,
    class_names: BTreeMap<String, Vec<String>>,
    labels: Vec<String>,
    captions: BTreeMap<String, Vec<String>>,
}

impl SimWorld {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Self {
        let mut w = SimWorld::default();
        let mut labels = BTreeMap::new();
        for s in samples {
            let Some(gold) = &s.gold else { continue };
            let class = match (class_from_ref(s.image.as_str()), gold.kind) {
                (Some(c), _) => c.to_owned(),
                (None, GoldKind::Label) => normalize_answer(gold.primary()),
                (None, GoldKind::Caption) => s.image.as_str().to_owned(),
            };
            match gold.kind {
                GoldKind::Label => {
                    labels.insert(normalize_answer(gold.primary()), gold.primary().to_owned());
                    w.class_names
                        .entry(class.clone())
                        .or_insert_with(|| name_tokens(gold.primary()));
                }
                GoldKind::Caption => {
                    w.class_names
                        .entry(class.clone())
                        .or_insert_with(|| name_tokens(&class));
                    w.captions
                        .entry(class.clone())
                        .or_default()
                        .extend(gold.texts.iter().cloned());
                }
            }
            w.images.insert(
                s.image.as_str().to_owned(),
                ImageFacts {
                    class,
                    truth: gold.clone(),
                    options: s.options.clone(),
                },
            );
        }
        w.labels = labels.into_values().collect();
        w
    }

    pub fn class_of<'a>(&'a self, image: &'a ImageRef) -> Option<&'a str> {
        self.images
            .get(image.as_str())
            .map(|f| f.class.as_str())
            .or_else(|| class_from_ref(image.as_str()))
    }

    pub fn truth(&self, image: &ImageRef) -> Option<&GoldAnswer> {
        self.images.get(image.as_str()).map(|f| &f.truth)
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.class_names.keys().map(String::as_str)
    }

    /// Class whose name appears in `text` as the longest contiguous token run.
    pub fn class_for_text(&self, text: &str) -> Option<&str> {
        let toks = name_tokens(text);
        let mut best: Option<(&str, usize)> = None;
        for (class, name) in &self.class_names {
            if name.is_empty() || name.len() > toks.len() {
                continue;
            }
            if toks.windows(name.len()).any(|w| w == name.as_slice()) && best.is_none_or(|(_, l)| name.len() > l) {
                best = Some((class, name.len()));
            }
        }
        best.map(|(c, _)| c)
    }

    /// Whether `answer` is right for `image` (first line only).
    /// Images outside the world (e.g. from a pool snapshot) are judged by
    /// the class in their reference and the class name in the answer.
    fn answer_is_correct(&self, image: &ImageRef, answer: &str) -> bool {
        let first = answer.lines().next().unwrap_or("");
        let Some(f) = self.images.get(image.as_str()) else {
            return class_from_ref(image.as_str()).is_some_and(|c| self.class_for_text(first) == Some(c));
        };
        match f.truth.kind {
            GoldKind::Label => exact_match(first, &f.truth, f.options.as_deref()).unwrap_or(false),
            GoldKind::Caption => self.class_for_text(first) == Some(f.class.as_str()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyModel {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceModel {
    pub when_correct: EntropyModel,
    pub when_wrong: EntropyModel,
}

impl Default for ConfidenceModel {
    fn default() -> Self {
        Self {
            when_correct: EntropyModel { mean: 0.25, sd: 0.15 },
            when_wrong: EntropyModel { mean: 1.0, sd: 0.35 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IclGain {
    pub per_matching_demo: f64,
    pub cap: f64,
}

impl Default for IclGain {
    fn default() -> Self {
        Self {
            per_matching_demo: 0.3,
            cap: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub base_ms: f64,
    pub per_demo_ms: f64,
    pub per_output_token_ms: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            base_ms: 375.0,
            per_demo_ms: 425.0,
            per_output_token_ms: 20.0,
        }
    }
}

fn default_support() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedAgentProfile {
    /// Per-class probability of a correct zero-shot answer.
    #[serde(default)]
    pub competence: BTreeMap<String, f64>,
    pub default_competence: f64,
    #[serde(default)]
    pub confidence: ConfidenceModel,
    #[serde(default)]
    pub icl_gain: IclGain,
    /// Added to competence when the prompt carries a reasoning instruction.
    #[serde(default)]
    pub cot_gain: f64,
    /// Number of tokens in each simulated step distribution; entropy is
    /// clamped to `ln(support_size)`.
    #[serde(default = "default_support")]
    pub support_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub latency: LatencyModel,
}

impl SimulatedAgentProfile {
    pub fn student(competence: f64) -> Self {
        Self {
            competence: BTreeMap::new(),
            default_competence: competence,
            confidence: ConfidenceModel::default(),
            icl_gain: IclGain::default(),
            cot_gain: 0.05,
            support_size: default_support(),
            seed: 0,
            latency: LatencyModel::default(),
        }
    }

    pub fn teacher(competence: f64) -> Self {
        Self {
            icl_gain: IclGain {
                per_matching_demo: 0.0,
                cap: 1.0,
            },
            cot_gain: 0.0,
            latency: LatencyModel {
                base_ms: 900.0,
                per_demo_ms: 0.0,
                per_output_token_ms: 30.0,
            },
            ..Self::student(competence)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        let unit = |p: f64| (0.0..=1.0).contains(&p);
        if !unit(self.default_competence) || !self.competence.values().all(|&p| unit(p)) {
            return Err("competence outside [0, 1]".into());
        }
        if !unit(self.icl_gain.cap) || !unit(self.cot_gain.abs()) || self.icl_gain.per_matching_demo < 0.0 {
            return Err("icl_gain / cot_gain out of range".into());
        }
        for m in [self.confidence.when_correct, self.confidence.when_wrong] {
            if m.sd.is_nan() || m.sd < 0.0 || !m.mean.is_finite() {
                return Err("entropy model needs a finite mean and sd >= 0".into());
            }
        }
        if self.support_size < 2 {
            return Err("support_size must be >= 2".into());
        }
        Ok(())
    }

    pub fn competence_for(&self, class: &str) -> f64 {
        self.competence.get(class).copied().unwrap_or(self.default_competence)
    }

    pub fn correctness_probability(&self, class: &str, matching_demos: usize, cot: bool) -> f64 {
        let base = self.competence_for(class);
        let boosted = (base + self.icl_gain.per_matching_demo * matching_demos as f64)
            .min(self.icl_gain.cap)
            .max(base);
        let cot = if cot { self.cot_gain } else { 0.0 };
        (boosted + cot).clamp(0.0, 1.0)
    }
}

/// Top-token probability `q` such that `q` plus `(1-q)` spread over `s-1`
/// alternatives has entropy `h`.
fn top_prob_for_entropy(h: f64, s: usize) -> f64 {
    let alts = (s - 1) as f64;
    let entropy = |q: f64| {
        let r = 1.0 - q;
        let a = if q > 0.0 { -q * q.ln() } else { 0.0 };
        let b = if r > 0.0 { -r * (r / alts).ln() } else { 0.0 };
        a + b
    };
    if h <= 0.0 {
        return 1.0;
    }
    let (mut lo, mut hi) = (1.0 / s as f64, 1.0);
    if h >= entropy(lo) {
        return lo;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if entropy(mid) > h {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn step_distribution(token: &str, q: f64, s: usize) -> TokenDistribution {
    let rest = (1.0 - q) / (s - 1) as f64;
    let mut probs = BTreeMap::new();
    probs.insert(token.to_owned(), q);
    if rest > 0.0 {
        for k in 1..s {
            probs.insert(format!("<alt:{k}>"), rest);
        }
    }
    TokenDistribution::new(probs, false).expect("valid by construction")
}

pub struct SimulatedGenerator {
    world: Arc<SimWorld>,
    profile: SimulatedAgentProfile,
    model_id: String,
    seen: Mutex<HashMap<(u64, u32), u64>>,
}

impl SimulatedGenerator {
    pub fn new(world: Arc<SimWorld>, profile: SimulatedAgentProfile, model_id: impl Into<String>) -> Self {
        Self {
            world,
            profile,
            model_id: model_id.into(),
            seen: Mutex::new(HashMap::new()),
        }
    }

    pub fn profile(&self) -> &SimulatedAgentProfile {
        &self.profile
    }

    fn content_hash(req: &GenerationRequest) -> u64 {
        let key = (
            &req.system_message,
            &req.demonstrations,
            &req.query,
            &req.reasoning_instruction,
            req.annotation_kind,
            req.sampling.temperature.to_bits(),
        );
        fnv1a(&serde_json::to_vec(&key).expect("request serializes"))
    }

    fn rng_for(&self, req: &GenerationRequest) -> ChaCha8Rng {
        let h = Self::content_hash(req);
        let key = if req.sampling.temperature == 0.0 {
            mix(&[self.profile.seed, h])
        } else {
            let mut seen = self.seen.lock().unwrap_or_else(|e| e.into_inner());
            let n = seen.entry((h, req.draw)).or_insert(0);
            *n += 1;
            mix(&[self.profile.seed, h, u64::from(req.draw), *n])
        };
        ChaCha8Rng::seed_from_u64(key)
    }

    fn wrong_answer(&self, facts: &ImageFacts, rng: &mut ChaCha8Rng) -> String {
        match facts.truth.kind {
            GoldKind::Label => {
                let pool: Vec<&String> = match &facts.options {
                    Some(opts) => opts
                        .iter()
                        .filter(|o| !exact_match(o, &facts.truth, Some(opts)).unwrap_or(true))
                        .collect(),
                    None => {
                        let gold = normalize_answer(facts.truth.primary());
                        self.world
                            .labels
                            .iter()
                            .filter(|l| normalize_answer(l) != gold)
                            .collect()
                    }
                };
                pool.choose(rng)
                    .map(|s| (*s).clone())
                    .unwrap_or_else(|| "unknown".into())
            }
            GoldKind::Caption => {
                let pool: Vec<&String> = self
                    .world
                    .captions
                    .iter()
                    .filter(|(c, _)| **c != facts.class)
                    .flat_map(|(_, v)| v)
                    .collect();
                pool.choose(rng)
                    .map(|s| (*s).clone())
                    .unwrap_or_else(|| "an image".into())
            }
        }
    }
}

impl Generator for SimulatedGenerator {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn generate(&self, req: &GenerationRequest) -> Result<RawGeneration, BackendError> {
        let facts = self
            .world
            .images
            .get(req.query.image.as_str())
            .ok_or_else(|| BackendError::Protocol(format!("simulator has no image {}", req.query.image)))?;
        let matching = req
            .demonstrations
            .iter()
            .filter(|d| {
                self.world.class_of(&d.image) == Some(facts.class.as_str())
                    && self.world.answer_is_correct(&d.image, &d.answer)
            })
            .count();
        let p = self
            .profile
            .correctness_probability(&facts.class, matching, req.reasoning_instruction.is_some());

        let mut rng = self.rng_for(req);
        let correct = rng.random::<f64>() < p;
        let answer = if correct {
            match facts.truth.kind {
                GoldKind::Label => facts.truth.primary().to_owned(),
                GoldKind::Caption => facts.truth.texts.choose(&mut rng).cloned().unwrap_or_default(),
            }
        } else {
            self.wrong_answer(facts, &mut rng)
        };
        let text = match req.annotation_kind {
            AnnotationKind::Label => answer,
            AnnotationKind::LabelPlusDescription => format!("{answer}\nDescription: an image of {answer}"),
            AnnotationKind::LabelPlusCot => {
                format!("{answer}\nReasoning: the visible features are typical of {answer}")
            }
        };

        let s = self.profile.support_size;
        let model = if correct {
            self.profile.confidence.when_correct
        } else {
            self.profile.confidence.when_wrong
        };
        let z: f64 = StandardNormal.sample(&mut rng);
        let h = (model.mean + model.sd * z).clamp(0.0, (s as f64).ln());
        let tokens: Vec<&str> = text.split_whitespace().collect();
        let n_tokens = tokens.len();
        let token_dists = if req.sampling.want_token_probs {
            let q = top_prob_for_entropy(h, s);
            tokens.iter().map(|t| step_distribution(t, q, s)).collect()
        } else {
            Vec::new()
        };

        let prompt = build_prompt(req);
        let words = prompt.system.split_whitespace().count()
            + prompt
                .parts
                .iter()
                .map(|p| match p {
                    PromptPart::Text(t) => t.split_whitespace().count(),
                    PromptPart::Image(_) => 100,
                })
                .sum::<usize>();
        let lat = &self.profile.latency;
        let ms =
            lat.base_ms + lat.per_demo_ms * req.demonstrations.len() as f64 + lat.per_output_token_ms * n_tokens as f64;
        Ok(RawGeneration {
            text,
            token_dists,
            latency: Duration::from_micros((ms * 1000.0).round() as u64),
            token_counts: TokenCounts {
                prompt_tokens: words as u64,
                output_tokens: n_tokens as u64,
            },
        })
    }
}

/// Encoder with planted class structure: an image is `a * P(class) +
/// sqrt(1 - a^2) * noise`, and a text that names a class is built the same way
/// with affinity `b`. Texts naming no class are pure noise.
pub struct SimulatedEncoder {
    world: Arc<SimWorld>,
    dimension: usize,
    image_affinity: f64,
    text_affinity: f64,
    seed: u64,
    id: String,
}

impl SimulatedEncoder {
    pub fn new(world: Arc<SimWorld>, dimension: usize, image_affinity: f64, text_affinity: f64, seed: u64) -> Self {
        Self {
            world,
            dimension,
            image_affinity,
            text_affinity,
            seed,
            id: format!("sim-encoder-d{dimension}-s{seed}"),
        }
    }

    fn unit(&self, key: &str, salt: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[self.seed, salt, fnv1a(key.as_bytes())]));
        let v: Vec<f64> = (0..self.dimension).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn blend(&self, class: Option<&str>, affinity: f64, noise_key: &str) -> Vec<f32> {
        let noise = self.unit(noise_key, 2);
        match class {
            Some(c) => {
                let proto = self.unit(c, 1);
                let w = (1.0 - affinity * affinity).max(0.0).sqrt();
                proto
                    .iter()
                    .zip(&noise)
                    .map(|(p, n)| (affinity * p + w * n) as f32)
                    .collect()
            }
            None => noise.into_iter().map(|x| x as f32).collect(),
        }
    }
}

impl Encoder for SimulatedEncoder {
    fn encoder_id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, content: &EmbedContent) -> Result<(Vec<f32>, Duration), BackendError> {
        let v = match content {
            EmbedContent::Image(r) => {
                let class = self
                    .world
                    .class_of(r)
                    .ok_or_else(|| BackendError::Protocol(format!("simulator has no image {r}")))?;
                self.blend(Some(class), self.image_affinity, &format!("img:{r}"))
            }
            EmbedContent::Text(t) => self.blend(self.world.class_for_text(t), self.text_affinity, &format!("txt:{t}")),
        };
        Ok((v, Duration::from_millis(2)))
    }
}
