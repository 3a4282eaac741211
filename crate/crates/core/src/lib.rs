//! Online in-context distillation for vision-language models.
//!
//! A small student answers a stream of image questions. When its answer
//! entropy is high it retries with demonstrations retrieved from a pool, and
//! when it is still unsure a larger teacher annotates the sample; consistent
//! annotations join the pool for later queries.

pub mod backends;
pub mod consistency;
pub mod domain;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod pipeline;
pub mod retrieval;
pub mod uncertainty;

pub use backends::{BackendError, CostLedger, EncoderEndpoint, GenerationEndpoint, LedgerSnapshot, Role};
pub use consistency::{is_consistent, refine, ConsistencyKind, ConsistencyPolicy};
pub use domain::{
    Annotation, AnnotationKind, AnnotationSource, Demonstration, GateConfig, GoldAnswer, GoldKind, ImageRef, Pool,
    Prediction, Sample, SelectionParams, TokenDistribution,
};
pub use error::{Error, Result};
pub use harness::{run_baseline, BaselineKind, ExperimentConfig};
pub use metrics::MetricKind;
pub use pipeline::{OutcomePath, RunConfig, RunReport, SampleOutcome};
pub use retrieval::{select_demo, QueryFeatures, SelectorKind};
