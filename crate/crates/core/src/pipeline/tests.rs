use std::sync::{Arc, Mutex};
use std::time::Duration;

use super::*;
use crate::backends::{Encoder, Generator, RawGeneration, Role, Sampling};
use crate::domain::{GoldAnswer, TokenCounts, TokenDistribution};

/// What a scripted model returns for a request: answer text and the top-token
/// probability of a single two-way step.
type Script = dyn Fn(&GenerationRequest) -> (String, f64) + Send + Sync;

struct Scripted {
    id: String,
    script: Box<Script>,
    seen: Mutex<Vec<GenerationRequest>>,
}

impl Generator for Scripted {
    fn model_id(&self) -> &str {
        &self.id
    }

    fn generate(&self, req: &GenerationRequest) -> std::result::Result<RawGeneration, BackendError> {
        self.seen.lock().unwrap().push(req.clone());
        let (text, p) = (self.script)(req);
        let dist = if p >= 1.0 {
            TokenDistribution::full([(text.clone(), 1.0)])
        } else {
            TokenDistribution::full([(text.clone(), p), ("other".to_owned(), 1.0 - p)])
        }
        .unwrap();
        Ok(RawGeneration {
            text,
            token_dists: vec![dist],
            latency: Duration::from_millis(1),
            token_counts: TokenCounts {
                prompt_tokens: 10,
                output_tokens: 1,
            },
        })
    }
}

struct HashEncoder;

impl Encoder for HashEncoder {
    fn encoder_id(&self) -> &str {
        "hash-4"
    }

    fn dimension(&self) -> usize {
        4
    }

    fn embed(&self, c: &EmbedContent) -> std::result::Result<(Vec<f32>, Duration), BackendError> {
        let s = match c {
            EmbedContent::Image(i) => i.as_str().to_owned(),
            EmbedContent::Text(t) => t.clone(),
        };
        let h = s
            .bytes()
            .fold(7u32, |h, b| h.wrapping_mul(31).wrapping_add(u32::from(b)));
        let v = (0..4).map(|k| 1.0 + ((h >> (k * 8)) & 0xff) as f32 / 255.0).collect();
        Ok((v, Duration::ZERO))
    }
}

fn scripted(id: &str, f: impl Fn(&GenerationRequest) -> (String, f64) + Send + Sync + 'static) -> Arc<Scripted> {
    Arc::new(Scripted {
        id: id.into(),
        script: Box::new(f),
        seen: Mutex::new(Vec::new()),
    })
}

fn backends(student: Arc<Scripted>, teacher: Arc<Scripted>) -> Backends {
    let ledger = Arc::new(CostLedger::default());
    let student = Arc::new(GenerationEndpoint::new(student, Role::Student, ledger.clone()));
    let teacher_sampling = Sampling {
        temperature: 1.0,
        want_token_probs: false,
        ..Sampling::default()
    };
    let teacher =
        Arc::new(GenerationEndpoint::new(teacher, Role::Teacher, ledger.clone()).with_sampling(teacher_sampling));
    Backends {
        student,
        annotator: Annotator {
            endpoint: teacher,
            policy: None,
            source: AnnotationSource::Teacher,
        },
        encoder: Arc::new(EncoderEndpoint::new(Arc::new(HashEncoder), ledger.clone())),
        ledger,
    }
}

fn samples(n: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            Sample::new(format!("s{i}"), format!("img{i}.png"), "What is the traffic sign?")
                .with_gold(GoldAnswer::label("stop"))
        })
        .collect()
}

fn pool() -> Pool {
    Pool::new(4, "hash-4")
}

const SURE: f64 = 1.0;
const UNSURE: f64 = 0.5; // entropy ln 2, above the default threshold

fn teacher_stop() -> Arc<Scripted> {
    scripted("teacher", |_| ("stop".into(), SURE))
}

#[test]
fn confident_zero_shot_is_accepted_without_teacher() {
    let b = backends(scripted("s", |_| ("yield".into(), SURE)), teacher_stop());
    let r = run_stream(&samples(3), &RunConfig::default(), &b, pool()).unwrap();
    for o in &r.outcomes {
        assert_eq!(o.path, OutcomePath::AcceptedZeroShot);
        assert_eq!(o.u_zero, Some(0.0));
        assert!(o.u_icl.is_none());
        assert_eq!(o.score, Some(0.0));
    }
    assert_eq!(b.ledger.calls(Role::Teacher), 0);
    assert_eq!(r.pool.len(), 0);
}

#[test]
fn cold_start_queries_teacher_then_uses_demos() {
    // Unsure alone, confident with any demonstration.
    let student = scripted("s", |r| {
        if r.demonstrations.is_empty() {
            ("yield".into(), UNSURE)
        } else {
            ("stop".into(), SURE)
        }
    });
    let b = backends(student, teacher_stop());
    let r = run_stream(&samples(3), &RunConfig::default(), &b, pool()).unwrap();
    let o = &r.outcomes;
    assert_eq!(o[0].path, OutcomePath::IclKeptZeroShotAndTeacherQueried);
    assert_eq!(o[0].final_answer, "yield");
    assert_eq!(o[0].u_icl, o[0].u_zero);
    assert_eq!(o[0].annotation_accepted, Some(true));
    for later in &o[1..] {
        assert_eq!(later.path, OutcomePath::IclUsed);
        assert_eq!(later.final_answer, "stop");
        assert_eq!(later.demos_used, vec!["s0".to_owned()]);
        assert!(!later.teacher_queried);
    }
    assert_eq!(r.teacher_queries, 1);
    assert_eq!(r.pool.len(), 1);
}

#[test]
fn final_answer_is_never_the_teachers() {
    let student = scripted("s", |r| {
        let t = if r.demonstrations.is_empty() { "a" } else { "b" };
        (t.into(), UNSURE)
    });
    let teacher = scripted("teacher", |_| ("TEACHER".into(), SURE));
    let b = backends(student, teacher);
    let r = run_stream(&samples(6), &RunConfig::default(), &b, pool()).unwrap();
    assert!(r.outcomes.iter().all(|o| o.final_answer != "TEACHER"));
    assert!(r.outcomes.iter().all(|o| o.teacher_queried));
}

#[test]
fn worse_icl_keeps_zero_shot_answer() {
    let student = scripted("s", |r| {
        if r.demonstrations.is_empty() {
            ("a".into(), 0.7)
        } else {
            ("b".into(), UNSURE)
        }
    });
    let b = backends(student, teacher_stop());
    let r = run_stream(&samples(2), &RunConfig::default(), &b, pool()).unwrap();
    let second = &r.outcomes[1];
    assert_eq!(second.final_answer, "a");
    assert!(second.u_icl.unwrap() > second.u_zero.unwrap());
    assert_eq!(second.path, OutcomePath::IclKeptZeroShotAndTeacherQueried);
}

#[test]
fn a_sample_is_sent_to_the_teacher_once() {
    let b = backends(scripted("s", |_| ("a".into(), UNSURE)), teacher_stop());
    let mut s = samples(2);
    s.push(s[0].clone());
    let r = run_stream(&s, &RunConfig::default(), &b, pool()).unwrap();
    assert_eq!(r.teacher_queries, 2);
    assert!(!r.outcomes[2].teacher_queried);
    assert_eq!(r.outcomes[2].path, OutcomePath::IclKeptZeroShot);
}

#[test]
fn budget_stops_teacher_queries() {
    let b = backends(scripted("s", |_| ("a".into(), UNSURE)), teacher_stop());
    let cfg = RunConfig {
        budget: Some(2),
        ..RunConfig::default()
    };
    let r = run_stream(&samples(5), &cfg, &b, pool()).unwrap();
    assert_eq!(r.teacher_queries, 2);
    assert!(r.budget_exhausted);
    assert_eq!(r.outcomes.iter().filter(|o| o.teacher_queried).count(), 2);
    assert_eq!(r.outcomes.len(), 5);
}

#[test]
fn inconsistent_teacher_adds_nothing() {
    let teacher = scripted("teacher", |r| (format!("label{}", r.draw), SURE));
    let b = backends(scripted("s", |_| ("a".into(), UNSURE)), teacher);
    let r = run_stream(&samples(3), &RunConfig::default(), &b, pool()).unwrap();
    assert_eq!(r.pool.len(), 0);
    assert_eq!(r.annotations_accepted, 0);
    assert!(r.outcomes.iter().all(|o| o.annotation_accepted == Some(false)));
    // Three draws per query.
    assert_eq!(b.ledger.calls(Role::Teacher), 9);
}

#[test]
fn pool_capacity_evicts_oldest() {
    let b = backends(scripted("s", |_| ("a".into(), UNSURE)), teacher_stop());
    let cfg = RunConfig {
        pool_capacity: Some(2),
        ..RunConfig::default()
    };
    let r = run_stream(&samples(5), &cfg, &b, pool()).unwrap();
    assert_eq!(r.annotations_accepted, 5);
    let ids: Vec<&str> = r.pool.entries().iter().map(|d| d.sample.id.as_str()).collect();
    assert_eq!(ids, ["s3", "s4"]);
}

#[test]
fn async_mode_ends_with_the_same_pool() {
    let run = |mode| {
        let b = backends(scripted("s", |_| ("a".into(), UNSURE)), teacher_stop());
        let cfg = RunConfig {
            sync_mode: mode,
            ..RunConfig::default()
        };
        run_stream(&samples(8), &cfg, &b, pool()).unwrap()
    };
    let sync = run(SyncMode::Synchronous);
    let asy = run(SyncMode::Asynchronous);
    assert_eq!(sync.annotations_accepted, 8);
    assert_eq!(asy.annotations_accepted, 8);
    assert_eq!(asy.pool.len(), sync.pool.len());
    assert!(asy.outcomes.iter().all(|o| o.annotation_accepted == Some(true)));
}

#[test]
fn infinite_threshold_matches_zero_shot() {
    let b = backends(scripted("s", |_| ("a".into(), UNSURE)), teacher_stop());
    let mut cfg = RunConfig::default();
    cfg.gate.delta = f64::INFINITY;
    let r = run_stream(&samples(4), &cfg, &b, pool()).unwrap();
    assert!(r.outcomes.iter().all(|o| o.path == OutcomePath::AcceptedZeroShot));
    assert_eq!(b.ledger.calls(Role::Teacher), 0);
    assert_eq!(b.ledger.calls(Role::Encoder), 0);
}

#[test]
fn zero_threshold_queries_every_sample() {
    let b = backends(scripted("s", |_| ("stop".into(), SURE)), teacher_stop());
    let mut cfg = RunConfig::default();
    cfg.gate.delta = 0.0;
    let r = run_stream(&samples(4), &cfg, &b, pool()).unwrap();
    assert!(r.outcomes.iter().all(|o| o.teacher_queried));
}

#[test]
fn student_failure_is_scored_wrong() {
    struct Down;
    impl Generator for Down {
        fn model_id(&self) -> &str {
            "down"
        }
        fn generate(&self, _: &GenerationRequest) -> std::result::Result<RawGeneration, BackendError> {
            Err(BackendError::Protocol("bad".into()))
        }
    }
    let mut b = backends(scripted("s", |_| ("a".into(), SURE)), teacher_stop());
    b.student = Arc::new(GenerationEndpoint::new(Arc::new(Down), Role::Student, b.ledger.clone()));
    let r = run_stream(&samples(2), &RunConfig::default(), &b, pool()).unwrap();
    assert!(r
        .outcomes
        .iter()
        .all(|o| o.path == OutcomePath::Failed && o.score == Some(0.0)));
    let cfg = RunConfig {
        count_failed_as_wrong: false,
        ..RunConfig::default()
    };
    let r = run_stream(&samples(2), &cfg, &b, pool()).unwrap();
    assert!(r.outcomes.iter().all(|o| o.score.is_none()));
}

#[test]
fn demonstrations_carry_teacher_answers() {
    let student = scripted("s", |_| ("a".into(), UNSURE));
    let b = backends(student.clone(), teacher_stop());
    run_stream(&samples(4), &RunConfig::default(), &b, pool()).unwrap();
    let seen = student.seen.lock().unwrap();
    let last = seen.last().unwrap();
    // Pool of three: the first stage keeps half of it.
    assert_eq!(last.demonstrations.len(), 2);
    assert!(last.demonstrations.iter().all(|d| d.answer == "stop"));
}
