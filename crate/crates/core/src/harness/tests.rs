use super::*;

fn data(seed: u64) -> SynthData {
    let mut spec = SynthSpec::labels("signs", seed);
    spec.stream = 120;
    spec.support = 80;
    spec.validation = 60;
    synthesize(&spec).unwrap()
}

fn cfg() -> ExperimentConfig {
    ExperimentConfig::simulated(0.4, 0.95)
}

#[test]
fn baseline_names_round_trip() {
    for k in BaselineKind::ALL {
        assert_eq!(k.name().parse::<BaselineKind>().unwrap(), k);
        let j = serde_json::to_string(&k).unwrap();
        assert_eq!(j, format!("\"{}\"", k.name()));
    }
    assert!("nope".parse::<BaselineKind>().is_err());
}

#[test]
fn config_rejects_unknown_fields() {
    let mut v = serde_json::to_value(cfg()).unwrap();
    let back: ExperimentConfig = serde_json::from_value(v.clone()).unwrap();
    assert_eq!(back, cfg());
    v["api_key"] = serde_json::json!("sk-nope");
    assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
}

#[test]
fn every_baseline_runs_and_reports_consistently() {
    let d = data(1);
    for k in BaselineKind::ALL {
        let rep = run_baseline(k, &cfg(), &d.stream, Some(&d.support)).unwrap();
        let m = &rep.header.metrics;
        assert_eq!(rep.outcomes.len(), d.stream.len(), "{}", k.name());
        assert_eq!(m.n_failed, 0, "{}", k.name());
        let v = m.value.unwrap();
        assert!((v - rep.recomputed_value().unwrap()).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&v));
        match k {
            BaselineKind::ZeroShot | BaselineKind::Cot | BaselineKind::BestOfNStudent | BaselineKind::OracleDemos => {
                assert_eq!(m.t_x_percent, 0.0, "{}", k.name());
                assert_eq!(m.ledger.teacher.calls, 0, "{}", k.name());
            }
            BaselineKind::IcdOffline => assert_eq!(m.t_x_percent, 100.0),
            BaselineKind::IcdOnline | BaselineKind::SelfLabeling => {
                assert!(
                    m.t_x_percent > 0.0 && m.t_x_percent < 100.0,
                    "{}: {}",
                    k.name(),
                    m.t_x_percent
                )
            }
        }
    }
}

#[test]
fn offline_baselines_need_support() {
    let d = data(2);
    assert!(run_baseline(BaselineKind::IcdOffline, &cfg(), &d.stream, None).is_err());
    assert!(run_baseline(BaselineKind::ZeroShot, &cfg(), &[], None).is_err());
}

#[test]
fn runs_are_deterministic_per_seed() {
    let d = data(3);
    let a = run_baseline(BaselineKind::IcdOnline, &cfg(), &d.stream, None).unwrap();
    let b = run_baseline(BaselineKind::IcdOnline, &cfg(), &d.stream, None).unwrap();
    assert_eq!(a.to_jsonl(), b.to_jsonl());
    let mut other = cfg();
    other.run.seed = 9;
    let c = run_baseline(BaselineKind::IcdOnline, &other, &d.stream, None).unwrap();
    assert_ne!(a.results_jsonl(), c.results_jsonl());
}

#[test]
fn infinite_threshold_reproduces_zero_shot() {
    let d = data(4);
    let mut c = cfg();
    c.run.gate.delta = f64::INFINITY;
    let online = run_baseline(BaselineKind::IcdOnline, &c, &d.stream, None).unwrap();
    let zero = run_baseline(BaselineKind::ZeroShot, &c, &d.stream, None).unwrap();
    assert_eq!(online.results_jsonl(), zero.results_jsonl());
}

#[test]
fn report_survives_a_file_round_trip() {
    let d = data(5);
    let rep = run_baseline(BaselineKind::IcdOnline, &cfg(), &d.stream, None).unwrap();
    let dir = std::env::temp_dir().join(format!("icd-report-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("run.jsonl");
    rep.write(&path).unwrap();
    let back = RunReport::read(&path).unwrap();
    assert_eq!(back.to_jsonl(), rep.to_jsonl());
    assert!(!back.header.paper_reference.desk_reproducible);
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn calibration_produces_a_usable_threshold() {
    let d = data(6);
    let r = calibrate(&cfg(), &d.validation, CalibrationTarget::MaxAccuracySplit).unwrap();
    assert!(r.delta.is_finite() && r.delta > 0.0);
}

#[test]
fn selector_comparison_covers_each_selector() {
    let d = data(7);
    let sels = [SelectorKind::IcdCrossModal, SelectorKind::Random];
    let rows = selector_comparison(&cfg(), &d.stream, &d.support, &sels).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].demonstration_accuracy.unwrap() > rows[1].demonstration_accuracy.unwrap());
}

#[test]
fn sweep_keeps_every_cell_and_summarizes() {
    let d = data(8);
    let spec = SweepSpec {
        axis: SweepAxis::Delta,
        values: vec![
            serde_json::json!("inf"),
            serde_json::json!(0.4),
            serde_json::json!("bogus"),
        ],
        repeats: 2,
        baseline: BaselineKind::IcdOnline,
        base_seed: Some(10),
        parallelism: 2,
    };
    let r = run_sweep(&spec, &cfg(), &d.stream[..40], None).unwrap();
    assert_eq!(r.cells.len(), 6);
    let bad: Vec<_> = r.cells.iter().filter(|c| c.error.is_some()).collect();
    assert_eq!(bad.len(), 2);
    assert!(bad.iter().all(|c| c.label == "bogus"));
    assert_eq!(r.cells[0].seed, 10);
    assert_eq!(r.cells[1].seed, 11);
    let csv = r.summary_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("delta,inf,2,0,"));
    assert!(lines[3].starts_with("delta,bogus,2,2,"));
    assert!(r.cells[0].series.last().unwrap().samples_seen == 40);
}

#[test]
fn zero_shots_cell_is_the_zero_shot_baseline() {
    let d = data(9);
    let spec = SweepSpec {
        axis: SweepAxis::Shots,
        values: vec![serde_json::json!(0), serde_json::json!(2)],
        repeats: 1,
        baseline: BaselineKind::OracleDemos,
        base_seed: None,
        parallelism: 1,
    };
    let r = run_sweep(&spec, &cfg(), &d.stream[..30], Some(&d.support)).unwrap();
    let zero = r.cells[0].report.as_ref().unwrap();
    assert_eq!(zero.header.baseline, "zero_shot");
    let two = r.cells[1].report.as_ref().unwrap();
    assert!(two.outcomes.iter().all(|o| o.demos_used.len() <= 2));
}

#[test]
fn pool_fraction_rejects_online_baselines() {
    let d = data(10);
    let spec = SweepSpec {
        axis: SweepAxis::PoolFraction,
        values: vec![serde_json::json!(0.5)],
        repeats: 1,
        baseline: BaselineKind::IcdOnline,
        base_seed: None,
        parallelism: 1,
    };
    let r = run_sweep(&spec, &cfg(), &d.stream[..10], Some(&d.support)).unwrap();
    assert!(r.cells[0].error.is_some());
}

/// Rough shape check on a small simulated stream; not a tolerance test.
#[test]
fn online_distillation_beats_zero_shot_in_simulation() {
    let d = data(11);
    let mut c = cfg();
    c.run.gate.delta = calibrate(&c, &d.validation, CalibrationTarget::MaxAccuracySplit)
        .unwrap()
        .delta;
    let z = run_baseline(BaselineKind::ZeroShot, &c, &d.stream, None).unwrap();
    let o = run_baseline(BaselineKind::IcdOnline, &c, &d.stream, None).unwrap();
    let (zv, ov) = (z.header.metrics.value.unwrap(), o.header.metrics.value.unwrap());
    eprintln!("zero {zv:.3} online {ov:.3} T(x) {:.1}", o.header.metrics.t_x_percent);
    assert!(ov > zv);
}
