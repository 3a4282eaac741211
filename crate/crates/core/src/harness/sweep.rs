use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backends::EndpointConfig;
use crate::domain::Sample;
use crate::error::{Error, Result};
use crate::metrics::stats::{mean, sample_std};
use crate::pipeline::RunReport;
use crate::retrieval::SelectorKind;

use super::{repeat_seed, run_baseline, BaselineKind, ExperimentConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Shots,
    /// Fraction of the support set (a prefix) used by offline and oracle runs.
    PoolFraction,
    TeacherEndpoint,
    Selector,
    Delta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<Value>,
    pub repeats: usize,
    pub baseline: BaselineKind,
    /// Seed of repeat 0; defaults to the base config's seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_seed: Option<u64>,
    /// Worker threads; 0 uses the available cores.
    #[serde(default)]
    pub parallelism: usize,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::InvalidConfig("sweep needs at least one value".into()));
        }
        if self.repeats == 0 {
            return Err(Error::InvalidConfig("sweep needs repeats >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub samples_seen: usize,
    pub annotations: usize,
    pub cumulative_metric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub label: String,
    pub repeat: usize,
    pub seed: u64,
    pub report: Option<RunReport>,
    pub error: Option<String>,
    pub series: Vec<SeriesPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub labels: Vec<String>,
    pub cells: Vec<SweepCell>,
}

const SERIES_STEP: usize = 64;

/// Cumulative metric after every 64 annotations, plus the final point.
fn series(report: &RunReport) -> Vec<SeriesPoint> {
    let mut out = Vec::new();
    let (mut sum, mut scored, mut annotations) = (0.0, 0usize, 0usize);
    for (i, o) in report.outcomes.iter().enumerate() {
        if let Some(s) = o.score {
            sum += s;
            scored += 1;
        }
        let point = |annotations| SeriesPoint {
            samples_seen: i + 1,
            annotations,
            cumulative_metric: if scored == 0 { 0.0 } else { sum / scored as f64 },
        };
        if o.teacher_queried {
            annotations += 1;
            if annotations % SERIES_STEP == 0 {
                out.push(point(annotations));
            }
        }
        if i + 1 == report.outcomes.len() && out.last().is_none_or(|p| p.samples_seen != i + 1) {
            out.push(point(annotations));
        }
    }
    out
}

fn label_of(axis: SweepAxis, v: &Value, index: usize) -> String {
    match (axis, v) {
        (SweepAxis::TeacherEndpoint, Value::Object(m)) => m
            .get("model_id")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .unwrap_or_else(|| format!("teacher{index}")),
        (_, Value::String(s)) => s.clone(),
        (_, other) => other.to_string(),
    }
}

/// Applies one axis value to a copy of the base config.
fn apply(
    axis: SweepAxis,
    v: &Value,
    base: &ExperimentConfig,
    baseline: BaselineKind,
    support: Option<&[Sample]>,
) -> Result<(ExperimentConfig, BaselineKind, Option<Vec<Sample>>)> {
    let mut cfg = base.clone();
    let mut kind = baseline;
    let mut sup = support.map(<[Sample]>::to_vec);
    let bad = |what: &str| Error::InvalidConfig(format!("sweep value {v} is not a valid {what}"));
    match axis {
        SweepAxis::Shots => {
            let k = v.as_u64().ok_or_else(|| bad("shot count"))? as usize;
            if k == 0 {
                kind = BaselineKind::ZeroShot;
            } else {
                cfg.run.selection.k_tt = k;
                cfg.run.selection.k_ii = cfg.run.selection.k_ii.max(k);
            }
        }
        SweepAxis::PoolFraction => {
            let f = v
                .as_f64()
                .filter(|f| *f > 0.0 && *f <= 1.0)
                .ok_or_else(|| bad("fraction in (0, 1]"))?;
            if !baseline.needs_support() {
                return Err(Error::InvalidConfig(format!(
                    "pool_fraction applies to offline baselines, not {}",
                    baseline.name()
                )));
            }
            let s = sup
                .as_mut()
                .ok_or_else(|| Error::InvalidConfig("pool_fraction needs a support set".into()))?;
            let n = ((f * s.len() as f64).round() as usize).max(1).min(s.len());
            s.truncate(n);
        }
        SweepAxis::TeacherEndpoint => {
            cfg.teacher = serde_json::from_value::<EndpointConfig>(v.clone()).map_err(|_| bad("endpoint config"))?;
        }
        SweepAxis::Selector => {
            cfg.run.selector = v.as_str().ok_or_else(|| bad("selector"))?.parse::<SelectorKind>()?;
        }
        SweepAxis::Delta => {
            cfg.run.gate.delta = match v {
                Value::String(s) if s == "inf" => f64::INFINITY,
                _ => v.as_f64().ok_or_else(|| bad("threshold"))?,
            };
        }
    }
    Ok((cfg, kind, sup))
}

/// One report per (value, repeat). A failing cell records its error and the
/// rest of the sweep continues.
pub fn run_sweep(
    spec: &SweepSpec,
    base: &ExperimentConfig,
    stream: &[Sample],
    support: Option<&[Sample]>,
) -> Result<SweepResult> {
    spec.validate()?;
    let labels: Vec<String> = spec
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| label_of(spec.axis, v, i))
        .collect();
    let base_seed = spec.base_seed.unwrap_or(base.run.seed);
    let jobs: Vec<(usize, usize)> = (0..spec.values.len())
        .flat_map(|v| (0..spec.repeats).map(move |r| (v, r)))
        .collect();
    let slots: Vec<Mutex<Option<SweepCell>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = match spec.parallelism {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(jobs.len())
    .max(1);

    let run_cell = |vi: usize, r: usize| -> SweepCell {
        let seed = repeat_seed(base_seed, r);
        let result =
            apply(spec.axis, &spec.values[vi], base, spec.baseline, support).and_then(|(mut cfg, kind, sup)| {
                cfg.run.seed = seed;
                run_baseline(kind, &cfg, stream, sup.as_deref())
            });
        let (report, error) = match result {
            Ok(rep) => (Some(rep), None),
            Err(e) => (None, Some(e.to_string())),
        };
        SweepCell {
            label: labels[vi].clone(),
            repeat: r,
            seed,
            series: report.as_ref().map(series).unwrap_or_default(),
            report,
            error,
        }
    };

    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(vi, r)) = jobs.get(j) else { break };
                let cell = run_cell(vi, r);
                *slots[j].lock().unwrap_or_else(|e| e.into_inner()) = Some(cell);
            });
        }
    });
    let cells = slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .unwrap_or_else(|e| e.into_inner())
                .expect("every job ran")
        })
        .collect();
    Ok(SweepResult {
        axis: spec.axis,
        labels,
        cells,
    })
}

impl SweepResult {
    /// Metric values of successful repeats, per axis value in spec order.
    pub fn values_by_label(&self) -> Vec<(String, Vec<f64>)> {
        self.labels
            .iter()
            .map(|l| {
                let v = self
                    .cells
                    .iter()
                    .filter(|c| &c.label == l)
                    .filter_map(|c| c.report.as_ref()?.header.metrics.value)
                    .collect();
                (l.clone(), v)
            })
            .collect()
    }

    /// `axis,value,runs,failed,mean,sd,t_x_mean` with sample standard deviation.
    pub fn summary_csv(&self) -> String {
        let axis = serde_json::to_value(self.axis)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default();
        let mut out = String::from("axis,value,runs,failed,mean,sd,t_x_mean\n");
        for (label, values) in self.values_by_label() {
            let cells: Vec<&SweepCell> = self.cells.iter().filter(|c| c.label == label).collect();
            let failed = cells.iter().filter(|c| c.report.is_none()).count();
            let tx: Vec<f64> = cells
                .iter()
                .filter_map(|c| Some(c.report.as_ref()?.header.metrics.t_x_percent))
                .collect();
            let fmt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
            let m = (!values.is_empty()).then(|| mean(&values));
            let sd = (!values.is_empty()).then(|| sample_std(&values));
            let t = (!tx.is_empty()).then(|| mean(&tx));
            let label = if label.contains(',') {
                format!("\"{label}\"")
            } else {
                label
            };
            let _ = writeln!(
                out,
                "{axis},{label},{},{failed},{},{},{}",
                cells.len(),
                fmt(m),
                fmt(sd),
                fmt(t)
            );
        }
        out
    }

    /// Long-format series for plotting: `value,repeat,samples_seen,annotations,cumulative_metric`.
    pub fn series_csv(&self) -> String {
        let mut out = String::from("value,repeat,samples_seen,annotations,cumulative_metric\n");
        for c in &self.cells {
            for p in &c.series {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{:.6}",
                    c.label, c.repeat, p.samples_seen, p.annotations, p.cumulative_metric
                );
            }
        }
        out
    }
}
