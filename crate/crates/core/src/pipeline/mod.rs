//! Online distillation loop: gate on student uncertainty, retry with
//! retrieved demonstrations, ask the annotator when still uncertain, grow the
//! pool.

mod report;

use std::collections::HashSet;
use std::path::PathBuf;
use std::sync::mpsc;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backends::{
    BackendError, CostLedger, DemoBlock, EmbedContent, EncoderEndpoint, GenerationEndpoint, GenerationRequest,
    QueryBlock,
};
use crate::consistency::{refine, ConsistencyPolicy};
use crate::domain::{
    Annotation, AnnotationKind, AnnotationSource, Demonstration, GateConfig, GoldKind, Pool, Prediction, Sample,
    SelectionParams,
};
use crate::error::{Error, Result};
use crate::metrics::{score_prediction, MetricKind};
use crate::retrieval::{select_baseline, QueryFeatures, SelectorKind};
use crate::uncertainty::EntropyVariant;

pub use report::{summarize, PublishedReference, PublishedRow, ReportHeader, RunMetrics, RunReport};

pub const DEFAULT_COT_INSTRUCTION: &str = "Let's think step by step.";

fn default_cot() -> String {
    DEFAULT_COT_INSTRUCTION.to_owned()
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub system_message: String,
    #[serde(default)]
    pub metric: MetricKind,
    /// Appended to the system message by the CoT baseline.
    #[serde(default = "default_cot")]
    pub cot_instruction: String,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            system_message: "Answer the question about the image with a short answer.".into(),
            metric: MetricKind::Accuracy,
            cot_instruction: default_cot(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PoolInit {
    #[default]
    Empty,
    Snapshot {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncMode {
    #[default]
    Synchronous,
    Asynchronous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub selection: SelectionParams,
    #[serde(default)]
    pub gate: GateConfig,
    #[serde(default)]
    pub selector: SelectorKind,
    #[serde(default)]
    pub annotation_kind: AnnotationKind,
    #[serde(default)]
    pub pool_init: PoolInit,
    #[serde(default)]
    pub sync_mode: SyncMode,
    /// Maximum number of samples sent to the annotator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<u64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub entropy_variant: EntropyVariant,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_capacity: Option<usize>,
    /// Failed samples score 0 when true, and are left out of the metric when false.
    #[serde(default = "default_true")]
    pub count_failed_as_wrong: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            selection: SelectionParams::default(),
            gate: GateConfig::default(),
            selector: SelectorKind::default(),
            annotation_kind: AnnotationKind::default(),
            pool_init: PoolInit::default(),
            sync_mode: SyncMode::default(),
            budget: None,
            seed: 0,
            entropy_variant: EntropyVariant::default(),
            task: TaskConfig::default(),
            pool_capacity: None,
            count_failed_as_wrong: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.selection.validate()?;
        self.gate.validate()?;
        if self.pool_capacity == Some(0) {
            return Err(Error::InvalidConfig("pool_capacity must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomePath {
    AcceptedZeroShot,
    IclKeptZeroShot,
    IclUsed,
    IclUsedAndTeacherQueried,
    IclKeptZeroShotAndTeacherQueried,
    /// The student could not produce an answer.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub sample_id: String,
    pub final_answer: String,
    pub path: OutcomePath,
    /// Zero-shot uncertainty; absent for passes that skip the zero-shot call.
    pub u_zero: Option<f64>,
    pub u_icl: Option<f64>,
    pub demos_used: Vec<String>,
    pub teacher_queried: bool,
    pub annotation_accepted: Option<bool>,
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SampleOutcome {
    pub fn failed(sample: &Sample, error: impl ToString) -> Self {
        Self {
            sample_id: sample.id.clone(),
            final_answer: String::new(),
            path: OutcomePath::Failed,
            u_zero: None,
            u_icl: None,
            demos_used: Vec::new(),
            teacher_queried: false,
            annotation_accepted: None,
            score: None,
            error: Some(error.to_string()),
        }
    }
}

/// Who writes pool annotations and how they are filtered.
#[derive(Clone)]
pub struct Annotator {
    pub endpoint: Arc<GenerationEndpoint>,
    /// `None` picks exact agreement for labels and BLEU-2 for captions.
    pub policy: Option<ConsistencyPolicy>,
    pub source: AnnotationSource,
}

#[derive(Clone)]
pub struct Backends {
    pub student: Arc<GenerationEndpoint>,
    pub annotator: Annotator,
    pub encoder: Arc<EncoderEndpoint>,
    pub ledger: Arc<CostLedger>,
}

pub fn demo_block(d: &Demonstration) -> DemoBlock {
    DemoBlock {
        image: d.sample.image.clone(),
        question: d.sample.question.clone(),
        options: d.sample.options.clone(),
        answer: d.annotation.render(),
    }
}

pub fn query_block(s: &Sample) -> QueryBlock {
    QueryBlock {
        image: s.image.clone(),
        question: s.question.clone(),
        options: s.options.clone(),
    }
}

pub fn student_request(
    endpoint: &GenerationEndpoint,
    task: &TaskConfig,
    sample: &Sample,
    demos: Vec<DemoBlock>,
    reasoning: Option<&str>,
) -> GenerationRequest {
    let mut r = GenerationRequest::new(task.system_message.clone(), query_block(sample), endpoint.sampling());
    r.demonstrations = demos;
    r.reasoning_instruction = reasoning.map(str::to_owned);
    r
}

pub fn query_features(encoder: &EncoderEndpoint, sample: &Sample) -> std::result::Result<QueryFeatures, BackendError> {
    let image = encoder.embed(&EmbedContent::Image(sample.image.clone()))?;
    let text = encoder.embed(&EmbedContent::Text(sample.question.clone()))?;
    Ok(QueryFeatures::new(image, text))
}

/// Text embedded for a pool entry: the question followed by the answer.
pub fn demo_text(sample: &Sample, annotation: &Annotation) -> String {
    format!("{} {}", sample.question, annotation.answer)
}

pub fn build_demonstration(
    encoder: &EncoderEndpoint,
    sample: &Sample,
    annotation: Annotation,
) -> Result<Demonstration> {
    let image = encoder.embed(&EmbedContent::Image(sample.image.clone()))?;
    let text = encoder.embed(&EmbedContent::Text(demo_text(sample, &annotation)))?;
    Demonstration::new(sample.clone(), annotation, image, text)
}

/// Embeds and appends one annotated sample. Returns the evicted entry, if any.
pub fn pool_append(
    pool: &mut Pool,
    sample: &Sample,
    annotation: Annotation,
    encoder: &EncoderEndpoint,
) -> Result<Option<Demonstration>> {
    let demo = build_demonstration(encoder, sample, annotation)?;
    pool.push(demo)
}

/// Consistency rule for annotating `sample`.
pub fn annotation_policy(annotator: &Annotator, gate: &GateConfig, sample: &Sample) -> ConsistencyPolicy {
    annotator.policy.unwrap_or_else(|| {
        let kind = sample.gold.as_ref().map_or(GoldKind::Label, |g| g.kind);
        ConsistencyPolicy::for_task(kind, gate)
    })
}

/// Zero-shot request sent to the annotator.
pub fn annotation_request(annotator: &Annotator, config: &RunConfig, sample: &Sample) -> GenerationRequest {
    let ep = &annotator.endpoint;
    let mut r = GenerationRequest::new(config.task.system_message.clone(), query_block(sample), ep.sampling());
    r.annotation_kind = config.annotation_kind;
    r
}

/// Student answer with retrieved demonstrations.
pub struct IclAttempt {
    pub prediction: Prediction,
    pub demo_indices: Vec<usize>,
    pub demo_ids: Vec<String>,
}

/// Retrieves demonstrations for `sample` from `pool` and queries the student.
/// Returns `Ok(None)` when the pool is empty.
pub fn icl_attempt(
    backends: &Backends,
    config: &RunConfig,
    pool: &Pool,
    sample: &Sample,
    selection_seed: u64,
    reasoning: Option<&str>,
) -> Result<Option<IclAttempt>> {
    if pool.is_empty() {
        return Ok(None);
    }
    let q = query_features(&backends.encoder, sample)?;
    let idx = select_baseline(config.selector, &q, pool, &config.selection, selection_seed)?;
    let demos: Vec<&Demonstration> = idx.iter().filter_map(|&i| pool.get(i)).collect();
    let blocks = demos.iter().map(|d| demo_block(d)).collect();
    let req = student_request(&backends.student, &config.task, sample, blocks, reasoning);
    let prediction = backends.student.generate(&req)?;
    Ok(Some(IclAttempt {
        prediction,
        demo_indices: idx.clone(),
        demo_ids: demos.iter().map(|d| d.id().to_owned()).collect(),
    }))
}

pub fn sample_score(sample: &Sample, answer: &str) -> Option<f64> {
    let gold = sample.gold.as_ref()?;
    score_prediction(answer, gold, sample.options()).ok()
}

pub fn selection_seed(run_seed: u64, index: usize) -> u64 {
    crate::backends::mix_seed(&[run_seed, index as u64])
}

/// Result of one stream pass, before it is wrapped into a report.
#[derive(Debug, Clone)]
pub struct StreamRun {
    pub outcomes: Vec<SampleOutcome>,
    pub pool: Pool,
    pub teacher_queries: u64,
    pub annotations_accepted: u64,
    pub budget_exhausted: bool,
}

enum Dispatch {
    Skip,
    Query,
}

struct Loop<'a> {
    backends: &'a Backends,
    config: &'a RunConfig,
    pool: Pool,
    touched: HashSet<String>,
    teacher_queries: u64,
    annotations_accepted: u64,
    budget_exhausted: bool,
}

impl<'a> Loop<'a> {
    fn dispatch_decision(&mut self, sample: &Sample) -> Dispatch {
        if self.budget_exhausted || self.touched.contains(&sample.id) {
            return Dispatch::Skip;
        }
        if let Some(b) = self.config.budget {
            if self.teacher_queries >= b {
                self.budget_exhausted = true;
                return Dispatch::Skip;
            }
        }
        self.touched.insert(sample.id.clone());
        self.teacher_queries += 1;
        Dispatch::Query
    }

    /// Steps 1-3 of the gate. Returns the outcome and whether the annotator
    /// should be asked.
    fn student_steps(&mut self, index: usize, sample: &Sample) -> (SampleOutcome, bool) {
        let b = self.backends;
        let delta = self.config.gate.delta;
        let req = student_request(&b.student, &self.config.task, sample, Vec::new(), None);
        let zero = match b.student.generate(&req) {
            Ok(p) => p,
            Err(e) => return (SampleOutcome::failed(sample, e), false),
        };
        let u = zero.uncertainty.unwrap_or(f64::INFINITY);
        let mut out = SampleOutcome {
            sample_id: sample.id.clone(),
            final_answer: zero.text.clone(),
            path: OutcomePath::AcceptedZeroShot,
            u_zero: Some(u),
            u_icl: None,
            demos_used: Vec::new(),
            teacher_queried: false,
            annotation_accepted: None,
            score: None,
            error: None,
        };
        if u < delta {
            return (out, false);
        }

        let seed = selection_seed(self.config.seed, index);
        let (u_icl, used_icl) = match icl_attempt(b, self.config, &self.pool, sample, seed, None) {
            Ok(Some(a)) => {
                let u2 = a.prediction.uncertainty.unwrap_or(f64::INFINITY);
                out.demos_used = a.demo_ids;
                if u2 < u {
                    out.final_answer = a.prediction.text;
                    (u2, true)
                } else {
                    (u2, false)
                }
            }
            Ok(None) => (u, false),
            Err(e) => {
                out.error = Some(e.to_string());
                (u, false)
            }
        };
        out.u_icl = Some(u_icl);
        out.path = if used_icl {
            OutcomePath::IclUsed
        } else {
            OutcomePath::IclKeptZeroShot
        };
        (out, u_icl >= delta)
    }

    fn mark_queried(out: &mut SampleOutcome) {
        out.teacher_queried = true;
        out.path = match out.path {
            OutcomePath::IclUsed => OutcomePath::IclUsedAndTeacherQueried,
            _ => OutcomePath::IclKeptZeroShotAndTeacherQueried,
        };
    }

    fn commit(&mut self, demo: Demonstration) {
        self.annotations_accepted += 1;
        // Dimension problems surface as an unaccepted annotation.
        let _ = self.pool.push(demo);
    }
}

struct AnnotateError {
    message: String,
    budget: bool,
}

fn annotate(
    backends: &Backends,
    request: &GenerationRequest,
    policy: &ConsistencyPolicy,
    sample: &Sample,
) -> std::result::Result<Option<Demonstration>, AnnotateError> {
    let ann = refine(&backends.annotator.endpoint, request, policy, backends.annotator.source).map_err(|e| {
        AnnotateError {
            budget: matches!(e.source, BackendError::BudgetExceeded(_)),
            message: e.to_string(),
        }
    })?;
    match ann {
        None => Ok(None),
        Some(a) => build_demonstration(&backends.encoder, sample, a)
            .map(Some)
            .map_err(|e| AnnotateError {
                message: e.to_string(),
                budget: false,
            }),
    }
}

fn finish(out: &mut SampleOutcome, sample: &Sample, count_failed: bool) {
    out.score = if out.path == OutcomePath::Failed {
        sample.gold.as_ref().filter(|_| count_failed).map(|_| 0.0)
    } else {
        sample_score(sample, &out.final_answer)
    };
}

/// Runs the gate over `samples` in order, starting from `pool`.
pub fn run_stream(samples: &[Sample], config: &RunConfig, backends: &Backends, pool: Pool) -> Result<StreamRun> {
    config.validate()?;
    let pool = match config.pool_capacity {
        Some(_) => pool.with_capacity(config.pool_capacity),
        None => pool,
    };
    let mut state = Loop {
        backends,
        config,
        pool,
        touched: HashSet::new(),
        teacher_queries: 0,
        annotations_accepted: 0,
        budget_exhausted: false,
    };
    let outcomes = match config.sync_mode {
        SyncMode::Synchronous => run_sync(&mut state, samples),
        SyncMode::Asynchronous => run_async(&mut state, samples),
    };
    Ok(StreamRun {
        outcomes,
        pool: state.pool,
        teacher_queries: state.teacher_queries,
        annotations_accepted: state.annotations_accepted,
        budget_exhausted: state.budget_exhausted,
    })
}

fn run_sync(state: &mut Loop<'_>, samples: &[Sample]) -> Vec<SampleOutcome> {
    let mut outcomes = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        let (mut out, wants_teacher) = state.student_steps(i, sample);
        if wants_teacher {
            if let Dispatch::Query = state.dispatch_decision(sample) {
                Loop::mark_queried(&mut out);
                let req = annotation_request(&state.backends.annotator, state.config, sample);
                let policy = annotation_policy(&state.backends.annotator, &state.config.gate, sample);
                match annotate(state.backends, &req, &policy, sample) {
                    Ok(Some(demo)) => {
                        state.commit(demo);
                        out.annotation_accepted = Some(true);
                    }
                    Ok(None) => out.annotation_accepted = Some(false),
                    Err(e) => {
                        state.budget_exhausted |= e.budget;
                        out.annotation_accepted = Some(false);
                        out.error.get_or_insert(e.message);
                    }
                }
            }
        }
        finish(&mut out, sample, state.config.count_failed_as_wrong);
        outcomes.push(out);
    }
    outcomes
}

type Job = (usize, GenerationRequest, ConsistencyPolicy, Sample);
type Done = (usize, std::result::Result<Option<Demonstration>, AnnotateError>);

/// Annotation runs on a worker thread; finished entries enter the pool at the
/// next sample boundary.
fn run_async(state: &mut Loop<'_>, samples: &[Sample]) -> Vec<SampleOutcome> {
    let backends = state.backends;
    let (job_tx, job_rx) = mpsc::channel::<Job>();
    let (done_tx, done_rx) = mpsc::channel::<Done>();
    let mut outcomes = Vec::with_capacity(samples.len());
    std::thread::scope(|scope| {
        scope.spawn(move || {
            for (i, req, policy, sample) in job_rx {
                let r = annotate(backends, &req, &policy, &sample);
                if done_tx.send((i, r)).is_err() {
                    break;
                }
            }
        });
        let apply = |state: &mut Loop<'_>, outcomes: &mut Vec<SampleOutcome>, (i, r): Done| match r {
            Ok(Some(demo)) => {
                state.commit(demo);
                outcomes[i].annotation_accepted = Some(true);
            }
            Ok(None) => outcomes[i].annotation_accepted = Some(false),
            Err(e) => {
                state.budget_exhausted |= e.budget;
                outcomes[i].annotation_accepted = Some(false);
                outcomes[i].error.get_or_insert(e.message);
            }
        };
        for (i, sample) in samples.iter().enumerate() {
            while let Ok(done) = done_rx.try_recv() {
                apply(state, &mut outcomes, done);
            }
            let (mut out, wants_teacher) = state.student_steps(i, sample);
            if wants_teacher {
                if let Dispatch::Query = state.dispatch_decision(sample) {
                    Loop::mark_queried(&mut out);
                    let req = annotation_request(&state.backends.annotator, state.config, sample);
                    let policy = annotation_policy(&state.backends.annotator, &state.config.gate, sample);
                    let _ = job_tx.send((i, req, policy, sample.clone()));
                }
            }
            finish(&mut out, sample, state.config.count_failed_as_wrong);
            outcomes.push(out);
        }
        drop(job_tx);
        for done in done_rx.iter() {
            apply(state, &mut outcomes, done);
        }
    });
    outcomes
}

#[cfg(test)]
mod tests;
