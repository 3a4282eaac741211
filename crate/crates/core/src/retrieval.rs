//! Demonstration retrieval.
//!
//! [`select_demo`] runs the staged cross-modal filter:
//!
//! 1. keep the top `K_it` entries by cosine(entry text, query image),
//! 2. of those keep the top `K_ii` by cosine(entry image, query image),
//! 3. of those keep the top `K_tt` by cosine(entry text, query text).
//!
//! Each stage clamps its cut to the entries still in play, and every tie is
//! broken by the smaller pool insertion index. [`brute_force_select`] is an
//! independent full-sort implementation of the same contract used as a test
//! oracle.

use std::cmp::Ordering;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Demonstration, GoldAnswer, Pool};
use crate::error::{Error, Result};
use crate::metrics::exact_match;

/// Embeddings of the incoming query: `E(image)` and `E(question)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryFeatures {
    pub image_embedding: Vec<f32>,
    pub text_embedding: Vec<f32>,
}

impl QueryFeatures {
    pub fn new(image_embedding: Vec<f32>, text_embedding: Vec<f32>) -> Self {
        Self {
            image_embedding,
            text_embedding,
        }
    }

    fn check(&self, dimension: usize) -> Result<()> {
        for v in [&self.image_embedding, &self.text_embedding] {
            if v.len() != dimension {
                return Err(Error::DimensionMismatch {
                    expected: dimension,
                    got: v.len(),
                });
            }
            if !v.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorKind {
    /// Text-to-image pre-filter, then image-image, then text-text.
    #[default]
    IcdCrossModal,
    /// Image-image similarity only.
    RicesImageImage,
    /// Text-text similarity only.
    SqTextText,
    /// Text-text pre-filter, then image-image.
    SqI,
    /// Image-image pre-filter, then text-text.
    Mmices,
    Random,
}

impl SelectorKind {
    pub const ALL: [SelectorKind; 6] = [
        Self::IcdCrossModal,
        Self::RicesImageImage,
        Self::SqTextText,
        Self::SqI,
        Self::Mmices,
        Self::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::IcdCrossModal => "icd_cross_modal",
            Self::RicesImageImage => "rices_image_image",
            Self::SqTextText => "sq_text_text",
            Self::SqI => "sq_i",
            Self::Mmices => "mmices",
            Self::Random => "random",
        }
    }
}

impl std::str::FromStr for SelectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown selector {s:?}")))
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    // Eight independent accumulators keep the loop vectorizable while the
    // summation order stays fixed.
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += f64::from(x[l]) * f64::from(y[l]);
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += f64::from(*x) * f64::from(*y);
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

fn cosine_from_parts(dot: f64, norm_a: f64, norm_b: f64) -> f64 {
    (dot / (norm_a * norm_b)).clamp(-1.0, 1.0)
}

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(cosine_from_parts(dot(a, b), na, nb))
}

/// Descending score, then ascending index.
fn rank(a: (f64, usize), b: (f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Indices of the `k` largest scores, best first; ties go to the smaller index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let ids: Vec<usize> = (0..scores.len()).collect();
    top_k_of(&ids, scores, k)
}

/// `top_k` over a candidate subset; `scores[i]` belongs to `candidates[i]`
/// and ties are broken by the candidate id.
fn top_k_of(candidates: &[usize], scores: &[f64], k: usize) -> Vec<usize> {
    let mut pairs: Vec<(f64, usize)> = scores.iter().copied().zip(candidates.iter().copied()).collect();
    let k = k.min(pairs.len());
    if k == 0 {
        return Vec::new();
    }
    if k < pairs.len() {
        pairs.select_nth_unstable_by(k - 1, |a, b| rank(*a, *b));
        pairs.truncate(k);
    }
    pairs.sort_unstable_by(|a, b| rank(*a, *b));
    pairs.into_iter().map(|(_, i)| i).collect()
}

#[derive(Clone, Copy)]
enum Field {
    Image,
    Text,
}

fn entry_vec(d: &Demonstration, f: Field) -> &[f32] {
    match f {
        Field::Image => &d.image_embedding,
        Field::Text => &d.text_embedding,
    }
}

/// One filtering stage over `candidates` using cached entry norms.
fn stage(pool: &Pool, candidates: &[usize], field: Field, query: &[f32], k: usize) -> Result<Vec<usize>> {
    let qn = norm(query);
    if qn == 0.0 {
        return Err(Error::ZeroVector);
    }
    let mut scores = Vec::with_capacity(candidates.len());
    for &i in candidates {
        let d = &pool.entries()[i];
        let en = match field {
            Field::Image => pool.image_norm(i),
            Field::Text => pool.text_norm(i),
        };
        if en == 0.0 {
            return Err(Error::ZeroVector);
        }
        scores.push(cosine_from_parts(dot(entry_vec(d, field), query), en, qn));
    }
    Ok(top_k_of(candidates, &scores, k))
}

fn precheck(query: &QueryFeatures, pool: &Pool) -> Result<()> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    query.check(pool.dimension())
}

/// Staged cross-modal selection. Returns pool indices, most similar first.
pub fn select_demo(query: &QueryFeatures, pool: &Pool, params: &crate::domain::SelectionParams) -> Result<Vec<usize>> {
    precheck(query, pool)?;
    let all: Vec<usize> = (0..pool.len()).collect();
    let s1 = stage(pool, &all, Field::Text, &query.image_embedding, params.k_it(pool.len()))?;
    let s2 = stage(pool, &s1, Field::Image, &query.image_embedding, params.k_ii)?;
    stage(pool, &s2, Field::Text, &query.text_embedding, params.k_tt)
}

/// Reference implementation of [`select_demo`]: every stage recomputes cosines
/// from scratch and fully sorts with a stable sort on `(score desc, index asc)`.
pub fn brute_force_select(
    query: &QueryFeatures,
    pool: &Pool,
    params: &crate::domain::SelectionParams,
) -> Result<Vec<usize>> {
    precheck(query, pool)?;
    let k_it = ((params.k_it_fraction * pool.len() as f64).round() as usize).max(1);
    let cuts = [
        (Field::Text, &query.image_embedding, k_it),
        (Field::Image, &query.image_embedding, params.k_ii),
        (Field::Text, &query.text_embedding, params.k_tt),
    ];
    let mut alive: Vec<usize> = (0..pool.len()).collect();
    for (field, q, k) in cuts {
        let mut scored = Vec::with_capacity(alive.len());
        for &i in &alive {
            scored.push((cosine_similarity(entry_vec(&pool.entries()[i], field), q)?, i));
        }
        scored.sort_by(|a, b| match b.0.partial_cmp(&a.0) {
            Some(Ordering::Equal) | None => a.1.cmp(&b.1),
            Some(o) => o,
        });
        scored.truncate(k);
        alive = scored.into_iter().map(|(_, i)| i).collect();
    }
    Ok(alive)
}

/// Baseline selectors. `params.k_tt` is the shot count and `params.k_ii` the
/// pre-filter size of the two-stage selectors; `seed` drives `Random`.
pub fn select_baseline(
    kind: SelectorKind,
    query: &QueryFeatures,
    pool: &Pool,
    params: &crate::domain::SelectionParams,
    seed: u64,
) -> Result<Vec<usize>> {
    precheck(query, pool)?;
    let all: Vec<usize> = (0..pool.len()).collect();
    let k = params.k_tt;
    match kind {
        SelectorKind::IcdCrossModal => select_demo(query, pool, params),
        SelectorKind::RicesImageImage => stage(pool, &all, Field::Image, &query.image_embedding, k),
        SelectorKind::SqTextText => stage(pool, &all, Field::Text, &query.text_embedding, k),
        SelectorKind::SqI => {
            let pre = stage(pool, &all, Field::Text, &query.text_embedding, params.k_ii)?;
            stage(pool, &pre, Field::Image, &query.image_embedding, k)
        }
        SelectorKind::Mmices => {
            let pre = stage(pool, &all, Field::Image, &query.image_embedding, params.k_ii)?;
            stage(pool, &pre, Field::Text, &query.text_embedding, k)
        }
        SelectorKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(index::sample(&mut rng, pool.len(), k.min(pool.len())).into_vec())
        }
    }
}

/// Share of `selected` whose annotation matches the query's gold label.
pub fn demonstration_accuracy(selected: &[&Demonstration], query_gold: &GoldAnswer) -> Result<f64> {
    if selected.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for d in selected {
        if exact_match(&d.annotation.answer, query_gold, None)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / selected.len() as f64)
}
