//! Best-of-n agreement filter for annotations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{parse_annotation_text, BackendError, GenerationEndpoint, GenerationRequest};
use crate::domain::{Annotation, AnnotationSource, GateConfig, GoldKind};
use crate::error::{Error, Result};
use crate::metrics::{bleu, normalize_answer, BleuConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyKind {
    ExactAllPairs,
    PairwiseBleu2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyPolicy {
    pub kind: ConsistencyKind,
    pub bleu_threshold: f64,
    pub n: usize,
}

impl ConsistencyPolicy {
    pub fn exact(n: usize) -> Self {
        Self {
            kind: ConsistencyKind::ExactAllPairs,
            bleu_threshold: 0.5,
            n,
        }
    }

    pub fn bleu2(n: usize, threshold: f64) -> Self {
        Self {
            kind: ConsistencyKind::PairwiseBleu2,
            bleu_threshold: threshold,
            n,
        }
    }

    /// Exact agreement for labels, pairwise BLEU-2 for captions.
    pub fn for_task(gold: GoldKind, gate: &GateConfig) -> Self {
        match gold {
            GoldKind::Label => Self::exact(gate.tts_n),
            GoldKind::Caption => Self::bleu2(gate.tts_n, gate.bleu2_consistency_threshold),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidConfig("consistency n must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.bleu_threshold) {
            return Err(Error::InvalidConfig("bleu threshold outside [0, 1]".into()));
        }
        Ok(())
    }
}

pub fn is_consistent<S: AsRef<str>>(answers: &[S], policy: &ConsistencyPolicy) -> Result<bool> {
    policy.validate()?;
    if answers.len() != policy.n {
        return Err(Error::LengthMismatch {
            expected: policy.n,
            got: answers.len(),
        });
    }
    match policy.kind {
        ConsistencyKind::ExactAllPairs => {
            let first = normalize_answer(answers[0].as_ref());
            Ok(answers[1..].iter().all(|a| normalize_answer(a.as_ref()) == first))
        }
        ConsistencyKind::PairwiseBleu2 => {
            let cfg = BleuConfig::bleu2_smoothed();
            for (i, a) in answers.iter().enumerate() {
                for (j, b) in answers.iter().enumerate() {
                    if i != j && bleu(a.as_ref(), &[b.as_ref()], &cfg)? <= policy.bleu_threshold {
                        return Ok(false);
                    }
                }
            }
            Ok(true)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("annotation failed after {calls_issued} calls: {source}")]
pub struct RefineError {
    pub calls_issued: usize,
    #[source]
    pub source: BackendError,
}

/// Issues `policy.n` draws of `request` and returns the first answer when all
/// draws agree. Draws run in request order with `draw = 0..n`; a simulator
/// keyed on the draw index gives the same result whatever the scheduling.
pub fn refine(
    endpoint: &GenerationEndpoint,
    request: &GenerationRequest,
    policy: &ConsistencyPolicy,
    source: AnnotationSource,
) -> std::result::Result<Option<Annotation>, RefineError> {
    policy.validate().map_err(|e| RefineError {
        calls_issued: 0,
        source: BackendError::InvalidRequest(e.to_string()),
    })?;
    let mut answers = Vec::with_capacity(policy.n);
    let mut details = Vec::with_capacity(policy.n);
    for i in 0..policy.n {
        let mut req = request.clone();
        req.draw = i as u32;
        let p = endpoint.generate(&req).map_err(|e| RefineError {
            calls_issued: i + 1,
            source: e,
        })?;
        let (answer, detail) = parse_annotation_text(&p.text);
        answers.push(answer);
        details.push(detail);
    }
    let ok = !answers[0].is_empty() && is_consistent(&answers, policy).unwrap_or(false);
    if !ok {
        return Ok(None);
    }
    let annotation = Annotation {
        answer: answers.swap_remove(0),
        kind: request.annotation_kind,
        source,
        consistency_votes: policy.n as u32,
        detail: details.swap_remove(0),
    };
    Ok(Some(annotation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_examples() {
        let p = ConsistencyPolicy::exact(3);
        assert!(is_consistent(&["Stop", "stop.", "STOP"], &p).unwrap());
        assert!(!is_consistent(&["stop", "yield", "stop"], &p).unwrap());
        assert!(is_consistent(&["anything"], &ConsistencyPolicy::exact(1)).unwrap());
        assert!(matches!(
            is_consistent(&["a", "a"], &p),
            Err(Error::LengthMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn identical_captions_pass_bleu_policy() {
        let c = "a man riding a horse on the beach";
        assert!(is_consistent(&[c, c, c], &ConsistencyPolicy::bleu2(3, 0.5)).unwrap());
        assert!(!is_consistent(&[c, "two dogs playing in snow", c], &ConsistencyPolicy::bleu2(3, 0.5)).unwrap());
    }

    fn caption() -> impl Strategy<Value = String> {
        prop::collection::vec(
            prop::sample::select(vec!["a", "dog", "runs", "on", "the", "grass", "red"]),
            1..8,
        )
        .prop_map(|v| v.join(" "))
    }

    proptest! {
        #[test]
        fn raising_threshold_never_creates_consistency(
            caps in prop::collection::vec(caption(), 3),
            t1 in 0.0f64..1.0,
            t2 in 0.0f64..1.0,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let at_hi = is_consistent(&caps, &ConsistencyPolicy::bleu2(3, hi)).unwrap();
            let at_lo = is_consistent(&caps, &ConsistencyPolicy::bleu2(3, lo)).unwrap();
            prop_assert!(!at_hi || at_lo);
        }
    }
}
