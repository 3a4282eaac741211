use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backends::LedgerSnapshot;
use crate::error::{Error, Result};
use crate::metrics::MetricKind;

use super::{OutcomePath, SampleOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishedRow {
    pub student: String,
    pub dataset: String,
    pub zero_shot: f64,
    pub icd: f64,
    #[serde(rename = "T_x_percent")]
    pub t_x_percent: f64,
}

/// Published reference numbers carried by every report. They come from
/// runs with real 7B-scale students and a commercial teacher, and are not
/// expected to be reproduced by the simulated backends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishedReference {
    pub desk_reproducible: bool,
    pub note: String,
    pub rows: Vec<PublishedRow>,
}

impl Default for PublishedReference {
    fn default() -> Self {
        Self {
            desk_reproducible: false,
            note: "published target with real models; not reproducible with simulated backends".into(),
            rows: vec![
                PublishedRow {
                    student: "InternVL2.5".into(),
                    dataset: "average".into(),
                    zero_shot: 26.0,
                    icd: 40.8,
                    t_x_percent: 14.7,
                },
                PublishedRow {
                    student: "LLaVA-OneVision".into(),
                    dataset: "GTSRB".into(),
                    zero_shot: 42.6,
                    icd: 70.8,
                    t_x_percent: 4.4,
                },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub metric_name: String,
    /// Mean per-sample score (accuracy or sentence BLEU-4); `None` without golds.
    pub value: Option<f64>,
    #[serde(rename = "T_x_percent")]
    pub t_x_percent: f64,
    pub ledger: LedgerSnapshot,
    pub n_samples: usize,
    pub n_scored: usize,
    pub n_failed: usize,
    pub teacher_queries: u64,
    pub annotations_accepted: u64,
    pub pool_size: usize,
    pub budget_exhausted: bool,
}

/// Aggregates outcomes. `T_x_percent` is the share of samples marked
/// `teacher_queried`; callers overwrite it for passes that annotate up front.
pub fn summarize(outcomes: &[SampleOutcome], metric: MetricKind, ledger: LedgerSnapshot) -> RunMetrics {
    let scores: Vec<f64> = outcomes.iter().filter_map(|o| o.score).collect();
    let value = (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64);
    let queried = outcomes.iter().filter(|o| o.teacher_queried).count();
    let t_x_percent = if outcomes.is_empty() {
        0.0
    } else {
        queried as f64 / outcomes.len() as f64 * 100.0
    };
    RunMetrics {
        metric_name: metric.name().into(),
        value,
        t_x_percent,
        ledger,
        n_samples: outcomes.len(),
        n_scored: scores.len(),
        n_failed: outcomes.iter().filter(|o| o.path == OutcomePath::Failed).count(),
        teacher_queries: queried as u64,
        annotations_accepted: outcomes.iter().filter(|o| o.annotation_accepted == Some(true)).count() as u64,
        pool_size: 0,
        budget_exhausted: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    /// Fully resolved configuration; enough to rerun the cell.
    pub config: serde_json::Value,
    pub baseline: String,
    pub seed: u64,
    pub metrics: RunMetrics,
    pub paper_reference: PublishedReference,
}

/// One JSON header line followed by one JSON line per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub header: ReportHeader,
    pub outcomes: Vec<SampleOutcome>,
}

impl RunReport {
    pub fn to_jsonl(&self) -> String {
        let mut s = serde_json::to_string(&self.header).expect("header serializes");
        s.push('\n');
        for o in &self.outcomes {
            s.push_str(&serde_json::to_string(o).expect("outcome serializes"));
            s.push('\n');
        }
        s
    }

    /// Metrics and outcomes only, without the config echo.
    pub fn results_jsonl(&self) -> String {
        let mut s = serde_json::to_string(&self.header.metrics).expect("metrics serialize");
        s.push('\n');
        for o in &self.outcomes {
            s.push_str(&serde_json::to_string(o).expect("outcome serializes"));
            s.push('\n');
        }
        s
    }

    /// Mean of per-sample scores, recomputed from the outcome lines.
    pub fn recomputed_value(&self) -> Option<f64> {
        let scores: Vec<f64> = self.outcomes.iter().filter_map(|o| o.score).collect();
        (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
    }

    /// Writes via a temporary file and rename so readers never see a partial report.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("jsonl.tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(self.to_jsonl().as_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut lines = reader.lines();
        let header_line = lines.next().ok_or_else(|| Error::Dataset {
            line: 1,
            message: "empty report".into(),
        })??;
        let header: ReportHeader = serde_json::from_str(&header_line)?;
        let mut outcomes = Vec::new();
        for line in lines {
            let line = line?;
            if !line.trim().is_empty() {
                outcomes.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { header, outcomes })
    }
}
