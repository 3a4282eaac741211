use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use icd_core::domain::{load_pool, read_dataset, save_pool, validate_dataset, write_dataset, GoldKind, Sample};
use icd_core::harness::{
    annotate_support, build_backends, calibrate, gold_pool, run_baseline, run_sweep, selector_comparison, synthesize,
    world_for, BaselineKind, ExperimentConfig, SweepSpec, SynthSpec,
};
use icd_core::uncertainty::CalibrationTarget;
use icd_core::SelectorKind;

/// Like `println!`, but a closed stdout (e.g. piped into `head`) is not an error.
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($t)*);
    }};
}

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_BUDGET: u8 = 3;

#[derive(Parser)]
#[command(name = "icd", version, about = "Online in-context distillation runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one baseline over a dataset and write a JSONL report.
    Run {
        /// Experiment config (JSON). Defaults to the built-in simulated setup.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        /// Support set for icd_offline and oracle_demos.
        #[arg(long)]
        support: Option<PathBuf>,
        #[arg(long, default_value = "icd_online")]
        baseline: String,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a parameter sweep; writes per-cell reports and CSV summaries.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        support: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the gate threshold on a validation set and print the result as JSON.
    Calibrate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        validation: PathBuf,
        /// Use this quantile of the observed uncertainties instead of the best split.
        #[arg(long)]
        quantile: Option<f64>,
    },
    /// Offline pass per selector over one teacher-annotated pool; prints CSV.
    CompareSelectors {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        support: PathBuf,
        /// Comma-separated selector names; all by default.
        #[arg(long, value_delimiter = ',')]
        selectors: Vec<String>,
    },
    /// Build or inspect pool snapshots.
    Pool {
        #[command(subcommand)]
        action: PoolAction,
    },
    /// Write a synthetic stream, support and validation set for the simulator.
    Synth {
        #[arg(long, default_value = "signs")]
        task: String,
        #[arg(long, value_enum, default_value_t = Kind::Label)]
        kind: Kind,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 500)]
        stream: usize,
        #[arg(long, default_value_t = 400)]
        support: usize,
        #[arg(long, default_value_t = 100)]
        validation: usize,
        #[arg(long)]
        with_options: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum PoolAction {
    /// Annotate a support set (teacher, or gold answers with --gold) into a snapshot.
    Build {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        gold: bool,
    },
    /// Print a snapshot summary as JSON.
    Inspect {
        #[arg(long)]
        pool: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Label,
    Caption,
}

/// Error tagged with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        error: e.into(),
    }
}

/// Runtime failure, except that configuration problems found late still exit as usage errors.
fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    let error = e.into();
    let code = match error.downcast_ref::<icd_core::Error>() {
        Some(icd_core::Error::InvalidConfig(_)) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    };
    Failure { code, error }
}

type Outcome = Result<u8, Failure>;

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(ExperimentConfig::simulated(0.4, 0.95)),
    }
    .map_err(usage)?;
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    Ok(cfg)
}

fn load_samples(path: &Path) -> Result<Vec<Sample>, Failure> {
    let samples = read_dataset(path)
        .with_context(|| format!("reading dataset {}", path.display()))
        .map_err(usage)?;
    if let Some(v) = validate_dataset(&samples).first() {
        return Err(usage(anyhow!("{}: {v}", path.display())));
    }
    Ok(samples)
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(runtime)
}

fn cmd_run(
    config: Option<&Path>,
    dataset: &Path,
    support: Option<&Path>,
    baseline: &str,
    out: &Path,
    seed: Option<u64>,
) -> Outcome {
    let cfg = load_config(config, seed)?;
    let kind: BaselineKind = baseline.parse().map_err(usage)?;
    let stream = load_samples(dataset)?;
    let support = support.map(load_samples).transpose()?;
    if kind.needs_support() && support.is_none() {
        return Err(usage(anyhow!("{} needs --support", kind.name())));
    }
    let report = run_baseline(kind, &cfg, &stream, support.as_deref()).map_err(runtime)?;
    create_dir(out)?;
    let path = out.join(format!("{}-seed{}.jsonl", kind.name(), cfg.run.seed));
    report.write(&path).map_err(runtime)?;
    let m = &report.header.metrics;
    let value = m.value.map_or("n/a".to_owned(), |v| format!("{v:.4}"));
    say!(
        "{} {}={} T(x)={:.1}% teacher_calls={} pool={} -> {}",
        kind.name(),
        m.metric_name,
        value,
        m.t_x_percent,
        m.ledger.teacher.calls,
        m.pool_size,
        path.display()
    );
    if m.budget_exhausted {
        eprintln!("annotation budget exhausted before the stream ended");
        return Ok(EXIT_BUDGET);
    }
    Ok(0)
}

fn cmd_sweep(spec: &Path, config: Option<&Path>, dataset: &Path, support: Option<&Path>, out: &Path) -> Outcome {
    let spec: SweepSpec = std::fs::File::open(spec)
        .map_err(anyhow::Error::from)
        .and_then(|f| serde_json::from_reader(f).map_err(anyhow::Error::from))
        .with_context(|| format!("loading sweep spec {}", spec.display()))
        .map_err(usage)?;
    spec.validate().map_err(usage)?;
    let cfg = load_config(config, None)?;
    let stream = load_samples(dataset)?;
    let support = support.map(load_samples).transpose()?;
    let result = run_sweep(&spec, &cfg, &stream, support.as_deref()).map_err(runtime)?;
    let cells = out.join("cells");
    create_dir(&cells)?;
    let mut failed = 0;
    let mut budget = false;
    for c in &result.cells {
        let stem: String = c
            .label
            .chars()
            .map(|ch| {
                if ch.is_ascii_alphanumeric() || ch == '.' || ch == '-' {
                    ch
                } else {
                    '_'
                }
            })
            .collect();
        match (&c.report, &c.error) {
            (Some(r), _) => {
                budget |= r.header.metrics.budget_exhausted;
                r.write(&cells.join(format!("{stem}-r{}.jsonl", c.repeat)))
                    .map_err(runtime)?;
            }
            (None, e) => {
                failed += 1;
                eprintln!(
                    "cell {} repeat {} failed: {}",
                    c.label,
                    c.repeat,
                    e.as_deref().unwrap_or("unknown")
                );
            }
        }
    }
    let write = |name: &str, body: String| {
        std::fs::write(out.join(name), body)
            .with_context(|| format!("writing {name}"))
            .map_err(runtime)
    };
    let summary = result.summary_csv();
    write("summary.csv", summary.clone())?;
    write("series.csv", result.series_csv())?;
    say!("{}", summary.trim_end());
    if failed > 0 {
        return Ok(EXIT_RUNTIME);
    }
    Ok(if budget { EXIT_BUDGET } else { 0 })
}

fn cmd_calibrate(config: Option<&Path>, validation: &Path, quantile: Option<f64>) -> Outcome {
    let cfg = load_config(config, None)?;
    let samples = load_samples(validation)?;
    let target = match quantile {
        Some(q) if (0.0..=1.0).contains(&q) => CalibrationTarget::Quantile(q),
        Some(q) => return Err(usage(anyhow!("quantile {q} is outside [0, 1]"))),
        None => CalibrationTarget::MaxAccuracySplit,
    };
    let report = calibrate(&cfg, &samples, target).map_err(runtime)?;
    say!("{}", serde_json::to_string_pretty(&report).map_err(runtime)?);
    Ok(0)
}

fn cmd_compare(config: Option<&Path>, dataset: &Path, support: &Path, selectors: &[String]) -> Outcome {
    let cfg = load_config(config, None)?;
    let sels: Vec<SelectorKind> = if selectors.is_empty() {
        SelectorKind::ALL.to_vec()
    } else {
        selectors
            .iter()
            .map(|s| s.parse::<SelectorKind>())
            .collect::<Result<_, _>>()
            .map_err(usage)?
    };
    let stream = load_samples(dataset)?;
    let support = load_samples(support)?;
    let rows = selector_comparison(&cfg, &stream, &support, &sels).map_err(runtime)?;
    let fmt = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_default();
    say!("selector,metric,demonstration_accuracy");
    for r in rows {
        say!(
            "{},{},{}",
            r.selector.name(),
            fmt(r.metric),
            fmt(r.demonstration_accuracy)
        );
    }
    Ok(0)
}

fn cmd_pool_build(config: Option<&Path>, dataset: &Path, out: &Path, gold: bool) -> Outcome {
    let cfg = load_config(config, None)?;
    let support = load_samples(dataset)?;
    let world = world_for(&[&support]);
    let b = build_backends(&cfg, &world, BaselineKind::IcdOffline).map_err(usage)?;
    let pool = if gold {
        gold_pool(&b, &cfg.run, &support)
    } else {
        annotate_support(&b, &cfg.run, &support).map(|(p, _)| p)
    }
    .map_err(runtime)?;
    save_pool(out, &pool).map_err(runtime)?;
    let ledger = b.ledger.snapshot();
    say!(
        "{} of {} samples in pool ({} teacher calls) -> {}",
        pool.len(),
        support.len(),
        ledger.teacher.calls,
        out.display()
    );
    Ok(0)
}

fn cmd_pool_inspect(path: &Path) -> Outcome {
    let pool = load_pool(path, None)
        .with_context(|| format!("reading snapshot {}", path.display()))
        .map_err(usage)?;
    let mut answers: BTreeMap<&str, usize> = BTreeMap::new();
    let mut sources: BTreeMap<String, usize> = BTreeMap::new();
    for d in pool.entries() {
        *answers.entry(d.annotation.answer.as_str()).or_default() += 1;
        let s = serde_json::to_value(d.annotation.source).map_err(runtime)?;
        *sources.entry(s.as_str().unwrap_or("?").to_owned()).or_default() += 1;
    }
    let summary = serde_json::json!({
        "entries": pool.len(),
        "dimension": pool.dimension(),
        "encoder_id": pool.encoder_id(),
        "sources": sources,
        "answers": answers,
    });
    say!("{}", serde_json::to_string_pretty(&summary).map_err(runtime)?);
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    task: &str,
    kind: Kind,
    classes: usize,
    stream: usize,
    support: usize,
    validation: usize,
    with_options: bool,
    seed: u64,
    out: &Path,
) -> Outcome {
    let spec = SynthSpec {
        task: task.to_owned(),
        kind: match kind {
            Kind::Label => GoldKind::Label,
            Kind::Caption => GoldKind::Caption,
        },
        classes,
        stream,
        support,
        validation,
        with_options,
        seed,
    };
    let data = synthesize(&spec).map_err(usage)?;
    create_dir(out)?;
    for (name, set) in [
        ("stream", &data.stream),
        ("support", &data.support),
        ("validation", &data.validation),
    ] {
        let path = out.join(format!("{name}.jsonl"));
        write_dataset(&path, set).map_err(runtime)?;
        say!("{} samples -> {}", set.len(), path.display());
    }
    Ok(0)
}

fn dispatch(cmd: Command) -> Outcome {
    match cmd {
        Command::Run {
            config,
            dataset,
            support,
            baseline,
            out,
            seed,
        } => cmd_run(config.as_deref(), &dataset, support.as_deref(), &baseline, &out, seed),
        Command::Sweep {
            spec,
            config,
            dataset,
            support,
            out,
        } => cmd_sweep(&spec, config.as_deref(), &dataset, support.as_deref(), &out),
        Command::Calibrate {
            config,
            validation,
            quantile,
        } => cmd_calibrate(config.as_deref(), &validation, quantile),
        Command::CompareSelectors {
            config,
            dataset,
            support,
            selectors,
        } => cmd_compare(config.as_deref(), &dataset, &support, &selectors),
        Command::Pool {
            action:
                PoolAction::Build {
                    config,
                    dataset,
                    out,
                    gold,
                },
        } => cmd_pool_build(config.as_deref(), &dataset, &out, gold),
        Command::Pool {
            action: PoolAction::Inspect { pool },
        } => cmd_pool_inspect(&pool),
        Command::Synth {
            task,
            kind,
            classes,
            stream,
            support,
            validation,
            with_options,
            seed,
            out,
        } => cmd_synth(
            &task,
            kind,
            classes,
            stream,
            support,
            validation,
            with_options,
            seed,
            &out,
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
