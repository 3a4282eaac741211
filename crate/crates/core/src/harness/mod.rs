//! Baselines, calibration, sweeps and selector comparisons.

mod sweep;
mod synth;

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backends::{
    mix_seed, CostLedger, EncoderConfig, EncoderEndpoint, EndpointConfig, Role, SimWorld, SimulatedAgentProfile,
};
use crate::consistency::{refine, ConsistencyPolicy};
use crate::domain::{load_pool, Annotation, AnnotationSource, GoldKind, Pool, Sample};
use crate::error::{Error, Result};
use crate::pipeline::{
    annotation_policy, annotation_request, icl_attempt, pool_append, run_stream, sample_score, selection_seed,
    student_request, summarize, Annotator, Backends, OutcomePath, PoolInit, PublishedReference, ReportHeader,
    RunConfig, RunReport, SampleOutcome,
};
use crate::retrieval::{demonstration_accuracy, SelectorKind};
use crate::uncertainty::{calibration_report, CalibrationRecord, CalibrationReport, CalibrationTarget};

pub use sweep::{run_sweep, SeriesPoint, SweepAxis, SweepCell, SweepResult, SweepSpec};
pub use synth::{synthesize, SynthData, SynthSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    ZeroShot,
    Cot,
    BestOfNStudent,
    SelfLabeling,
    IcdOnline,
    IcdOffline,
    OracleDemos,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 7] = [
        Self::ZeroShot,
        Self::Cot,
        Self::BestOfNStudent,
        Self::SelfLabeling,
        Self::IcdOnline,
        Self::IcdOffline,
        Self::OracleDemos,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::ZeroShot => "zero_shot",
            Self::Cot => "cot",
            Self::BestOfNStudent => "best_of_n_student",
            Self::SelfLabeling => "self_labeling",
            Self::IcdOnline => "icd_online",
            Self::IcdOffline => "icd_offline",
            Self::OracleDemos => "oracle_demos",
        }
    }

    pub fn needs_support(self) -> bool {
        matches!(self, Self::IcdOffline | Self::OracleDemos)
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown baseline {s:?}")))
    }
}

fn d_best_of_n() -> usize {
    3
}

/// Everything needed to run one cell: gate settings plus endpoint configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub run: RunConfig,
    pub student: EndpointConfig,
    pub teacher: EndpointConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    /// Draws for the student best-of-n baseline.
    #[serde(default = "d_best_of_n")]
    pub best_of_n: usize,
    /// Apply the teacher's consistency filter to self-labeling as well.
    #[serde(default)]
    pub self_labeling_tts: bool,
}

impl ExperimentConfig {
    /// Simulated student and teacher with the given competences.
    pub fn simulated(student_competence: f64, teacher_competence: f64) -> Self {
        Self {
            run: RunConfig::default(),
            student: EndpointConfig::simulated(SimulatedAgentProfile::student(student_competence).with_seed(1), 0.0),
            teacher: EndpointConfig::simulated(SimulatedAgentProfile::teacher(teacher_competence).with_seed(2), 1.0),
            encoder: EncoderConfig::default(),
            best_of_n: d_best_of_n(),
            self_labeling_tts: false,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_reader(std::fs::File::open(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        self.student.validate()?;
        self.teacher.validate()?;
        if self.best_of_n == 0 {
            return Err(Error::InvalidConfig("best_of_n must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn world_for(sets: &[&[Sample]]) -> Arc<SimWorld> {
    Arc::new(SimWorld::from_samples(sets.iter().flat_map(|s| s.iter())))
}

/// Builds fresh endpoints and ledger for one run.
pub fn build_backends(cfg: &ExperimentConfig, world: &Arc<SimWorld>, kind: BaselineKind) -> Result<Backends> {
    let ledger = Arc::new(CostLedger::default());
    let seed = cfg.run.seed;
    let student = Arc::new(
        cfg.student
            .build(Role::Student, Some(world), ledger.clone(), seed)?
            .with_entropy_variant(cfg.run.entropy_variant),
    );
    let annotator = if kind == BaselineKind::SelfLabeling {
        Annotator {
            endpoint: student.clone(),
            policy: (!cfg.self_labeling_tts).then(|| ConsistencyPolicy::exact(1)),
            source: AnnotationSource::StudentSelf,
        }
    } else {
        Annotator {
            endpoint: Arc::new(cfg.teacher.build(Role::Teacher, Some(world), ledger.clone(), seed)?),
            policy: None,
            source: AnnotationSource::Teacher,
        }
    };
    let encoder = Arc::new(cfg.encoder.build(Some(world), ledger.clone())?);
    Ok(Backends {
        student,
        annotator,
        encoder,
        ledger,
    })
}

pub fn empty_pool(run: &RunConfig, encoder: &EncoderEndpoint) -> Pool {
    Pool::new(encoder.dimension(), encoder.encoder_id()).with_capacity(run.pool_capacity)
}

pub fn initial_pool(run: &RunConfig, encoder: &EncoderEndpoint) -> Result<Pool> {
    match &run.pool_init {
        PoolInit::Empty => Ok(empty_pool(run, encoder)),
        PoolInit::Snapshot { path } => {
            Ok(load_pool(path, Some(encoder.encoder_id()))?.with_capacity(run.pool_capacity))
        }
    }
}

/// Student answer with no demonstrations.
pub fn zero_shot_outcome(
    backends: &Backends,
    run: &RunConfig,
    sample: &Sample,
    reasoning: Option<&str>,
) -> SampleOutcome {
    let req = student_request(&backends.student, &run.task, sample, Vec::new(), reasoning);
    match backends.student.generate(&req) {
        Ok(p) => {
            let answer = if reasoning.is_some() {
                crate::backends::extract_final_answer(&p.text)
            } else {
                p.text
            };
            let mut o = SampleOutcome {
                sample_id: sample.id.clone(),
                final_answer: answer,
                path: OutcomePath::AcceptedZeroShot,
                u_zero: p.uncertainty,
                u_icl: None,
                demos_used: Vec::new(),
                teacher_queried: false,
                annotation_accepted: None,
                score: None,
                error: None,
            };
            o.score = sample_score(sample, &o.final_answer);
            o
        }
        Err(e) => failed(sample, e, run),
    }
}

fn failed(sample: &Sample, e: impl ToString, run: &RunConfig) -> SampleOutcome {
    let mut o = SampleOutcome::failed(sample, e);
    o.score = sample.gold.as_ref().filter(|_| run.count_failed_as_wrong).map(|_| 0.0);
    o
}

fn plain_pass(b: &Backends, run: &RunConfig, stream: &[Sample], reasoning: Option<&str>) -> Vec<SampleOutcome> {
    stream.iter().map(|s| zero_shot_outcome(b, run, s, reasoning)).collect()
}

fn best_of_n_pass(b: &Backends, cfg: &ExperimentConfig, stream: &[Sample]) -> Vec<SampleOutcome> {
    let run = &cfg.run;
    stream
        .iter()
        .map(|s| {
            let kind = s.gold.as_ref().map_or(GoldKind::Label, |g| g.kind);
            let mut policy = ConsistencyPolicy::for_task(kind, &run.gate);
            policy.n = cfg.best_of_n;
            let mut req = student_request(&b.student, &run.task, s, Vec::new(), None);
            req.sampling.temperature = 1.0;
            match refine(&b.student, &req, &policy, AnnotationSource::StudentSelf) {
                Ok(Some(a)) => {
                    let score = sample_score(s, &a.answer);
                    SampleOutcome {
                        sample_id: s.id.clone(),
                        final_answer: a.answer,
                        path: OutcomePath::AcceptedZeroShot,
                        u_zero: None,
                        u_icl: None,
                        demos_used: Vec::new(),
                        teacher_queried: false,
                        annotation_accepted: None,
                        score,
                        error: None,
                    }
                }
                // Draws disagree: fall back to one greedy answer.
                Ok(None) => zero_shot_outcome(b, run, s, None),
                Err(e) => failed(s, e, run),
            }
        })
        .collect()
}

/// Teacher-annotates `support` (with the consistency filter) into a pool.
/// Returns the pool and the number of accepted annotations.
pub fn annotate_support(b: &Backends, run: &RunConfig, support: &[Sample]) -> Result<(Pool, u64)> {
    let mut pool = empty_pool(run, &b.encoder);
    let mut accepted = 0;
    for s in support {
        let req = annotation_request(&b.annotator, run, s);
        let policy = annotation_policy(&b.annotator, &run.gate, s);
        match refine(&b.annotator.endpoint, &req, &policy, b.annotator.source) {
            Ok(Some(a)) => {
                pool_append(&mut pool, s, a, &b.encoder)?;
                accepted += 1;
            }
            Ok(None) => {}
            Err(e) if matches!(e.source, crate::backends::BackendError::BudgetExceeded(_)) => break,
            Err(_) => {}
        }
    }
    Ok((pool, accepted))
}

/// Pool built from gold answers.
pub fn gold_pool(b: &Backends, run: &RunConfig, support: &[Sample]) -> Result<Pool> {
    let mut pool = empty_pool(run, &b.encoder);
    for s in support {
        if let Some(g) = &s.gold {
            let a = Annotation::new(g.primary(), AnnotationSource::Oracle);
            pool_append(&mut pool, s, a, &b.encoder)?;
        }
    }
    Ok(pool)
}

/// Every sample answered with retrieved demonstrations (no gate).
/// Also returns the selected pool indices per sample.
pub fn icl_pass(b: &Backends, run: &RunConfig, stream: &[Sample], pool: &Pool) -> Vec<(SampleOutcome, Vec<usize>)> {
    stream
        .iter()
        .enumerate()
        .map(
            |(i, s)| match icl_attempt(b, run, pool, s, selection_seed(run.seed, i), None) {
                Ok(Some(a)) => {
                    let score = sample_score(s, &a.prediction.text);
                    let o = SampleOutcome {
                        sample_id: s.id.clone(),
                        final_answer: a.prediction.text,
                        path: OutcomePath::IclUsed,
                        u_zero: None,
                        u_icl: a.prediction.uncertainty,
                        demos_used: a.demo_ids,
                        teacher_queried: false,
                        annotation_accepted: None,
                        score,
                        error: None,
                    };
                    (o, a.demo_indices)
                }
                Ok(None) => (zero_shot_outcome(b, run, s, None), Vec::new()),
                Err(e) => (failed(s, e, run), Vec::new()),
            },
        )
        .collect()
}

fn fingerprint(samples: &[Sample]) -> String {
    let bytes = serde_json::to_vec(samples).expect("samples serialize");
    format!("{:016x}", mix_seed(&[bytes.len() as u64, fnv(&bytes)]))
}

fn fnv(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Runs one baseline over `stream`. `support` is the pre-collection set for
/// the offline and oracle variants.
pub fn run_baseline(
    kind: BaselineKind,
    cfg: &ExperimentConfig,
    stream: &[Sample],
    support: Option<&[Sample]>,
) -> Result<RunReport> {
    cfg.validate()?;
    if stream.is_empty() {
        return Err(Error::EmptyInput);
    }
    let support = match (kind.needs_support(), support) {
        (true, None) => {
            return Err(Error::InvalidConfig(format!("{} needs a support set", kind.name())));
        }
        (_, s) => s.unwrap_or(&[]),
    };
    let world = world_for(&[stream, support]);
    let b = build_backends(cfg, &world, kind)?;
    let run = &cfg.run;

    let mut pool_size = 0;
    let mut budget_exhausted = false;
    let mut t_x_override = None;
    let mut pre_annotated = None;
    let outcomes = match kind {
        BaselineKind::ZeroShot => plain_pass(&b, run, stream, None),
        BaselineKind::Cot => plain_pass(&b, run, stream, Some(&run.task.cot_instruction)),
        BaselineKind::BestOfNStudent => best_of_n_pass(&b, cfg, stream),
        BaselineKind::SelfLabeling | BaselineKind::IcdOnline => {
            let pool = initial_pool(run, &b.encoder)?;
            let r = run_stream(stream, run, &b, pool)?;
            pool_size = r.pool.len();
            budget_exhausted = r.budget_exhausted;
            r.outcomes
        }
        BaselineKind::IcdOffline => {
            let (pool, accepted) = annotate_support(&b, run, support)?;
            pool_size = pool.len();
            t_x_override = Some(100.0);
            pre_annotated = Some((support.len() as u64, accepted));
            icl_pass(&b, run, stream, &pool).into_iter().map(|(o, _)| o).collect()
        }
        BaselineKind::OracleDemos => {
            let pool = gold_pool(&b, run, support)?;
            pool_size = pool.len();
            icl_pass(&b, run, stream, &pool).into_iter().map(|(o, _)| o).collect()
        }
    };

    let mut metrics = summarize(&outcomes, run.task.metric, b.ledger.snapshot());
    metrics.pool_size = pool_size;
    metrics.budget_exhausted = budget_exhausted;
    if let Some(t) = t_x_override {
        metrics.t_x_percent = t;
    }
    if let Some((queried, accepted)) = pre_annotated {
        metrics.teacher_queries = queried;
        metrics.annotations_accepted = accepted;
    }
    let config = serde_json::json!({
        "experiment": cfg,
        "inputs": {
            "stream_samples": stream.len(),
            "stream_fingerprint": fingerprint(stream),
            "support_samples": support.len(),
            "support_fingerprint": fingerprint(support),
        },
    });
    Ok(RunReport {
        header: ReportHeader {
            config,
            baseline: kind.name().into(),
            seed: run.seed,
            metrics,
            paper_reference: PublishedReference::default(),
        },
        outcomes,
    })
}

/// Zero-shot (uncertainty, correctness) pairs from a report's outcomes.
/// Captions count as correct at sentence BLEU-4 >= 0.5.
pub fn calibration_records(outcomes: &[SampleOutcome]) -> Vec<CalibrationRecord> {
    outcomes
        .iter()
        .filter_map(|o| Some(CalibrationRecord::new(o.u_zero?, o.score? >= 0.5)))
        .collect()
}

/// Runs the student zero-shot on `validation` and fits the gate threshold.
pub fn calibrate(
    cfg: &ExperimentConfig,
    validation: &[Sample],
    target: CalibrationTarget,
) -> Result<CalibrationReport> {
    let report = run_baseline(BaselineKind::ZeroShot, cfg, validation, None)?;
    calibration_report(&calibration_records(&report.outcomes), target)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorRow {
    pub selector: SelectorKind,
    pub metric: Option<f64>,
    /// Mean share of selected demonstrations whose answer matches the query's gold label.
    pub demonstration_accuracy: Option<f64>,
}

/// Offline pass per selector over one shared teacher-annotated pool.
pub fn selector_comparison(
    cfg: &ExperimentConfig,
    stream: &[Sample],
    support: &[Sample],
    selectors: &[SelectorKind],
) -> Result<Vec<SelectorRow>> {
    cfg.validate()?;
    let world = world_for(&[stream, support]);
    let b = build_backends(cfg, &world, BaselineKind::IcdOffline)?;
    let (pool, _) = annotate_support(&b, &cfg.run, support)?;
    let mut rows = Vec::with_capacity(selectors.len());
    for &sel in selectors {
        let mut c = cfg.clone();
        c.run.selector = sel;
        let b = build_backends(&c, &world, BaselineKind::IcdOffline)?;
        let results = icl_pass(&b, &c.run, stream, &pool);
        let scores: Vec<f64> = results.iter().filter_map(|(o, _)| o.score).collect();
        let mut demo_acc = Vec::new();
        for ((_, idx), s) in results.iter().zip(stream) {
            if let Some(g) = s.gold.as_ref().filter(|g| g.kind == GoldKind::Label) {
                let demos: Vec<_> = idx.iter().filter_map(|&i| pool.get(i)).collect();
                demo_acc.push(demonstration_accuracy(&demos, g)?);
            }
        }
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        rows.push(SelectorRow {
            selector: sel,
            metric: mean(&scores),
            demonstration_accuracy: mean(&demo_acc),
        });
    }
    Ok(rows)
}

/// Seed for repeat `r` of a sweep cell.
pub fn repeat_seed(base: u64, repeat: usize) -> u64 {
    base + repeat as u64
}

#[cfg(test)]
mod tests;
