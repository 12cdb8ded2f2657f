use nmpc_tuner::artifacts::{read_settings, read_trace, SETTINGS_FILE, TRACE_FILE};
use nmpc_tuner::*;

fn small(out: &std::path::Path, seed: u64) -> RunConfig {
    RunConfig {
        n_trials: 4,
        nb: 3,
        nsb: 2,
        timing_mode: TimingKind::CostModel,
        c_eval: Some(5e-6),
        seed,
        jobs: 2,
        out: out.to_path_buf(),
        ..Default::default()
    }
}

#[test]
fn run_writes_consistent_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), 7);
    let outcome = run(&cfg, &ProblemRegistry::with_builtins()).unwrap();
    for f in ["settings.csv", "trace.json", "run.log"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let rows = read_settings(&dir.path().join(SETTINGS_FILE)).unwrap();
    assert_eq!(rows.len(), 4);
    for row in &rows {
        if let Some(d) = row.design() {
            d.validate(&cfg.design_bounds()).unwrap();
        }
    }
    let trace = read_trace(&dir.path().join(TRACE_FILE)).unwrap();
    assert_eq!(trace.config, cfg);
    assert_eq!(trace.elimination_trace.len(), 2);
    assert!(trace.ocp_solve_count <= trace.ocp_solve_bound);

    let log = std::fs::read_to_string(dir.path().join("run.log")).unwrap();
    assert!(log.contains("master seed: 7"));
    assert!(log.contains(&format!("sigma seed: {}", trace.seeds.sigma)));

    let summary = summarize(dir.path()).unwrap();
    assert_eq!(summary.exit_code(), outcome.exit_code());
    assert!(dir.path().join("elimination_curve.csv").exists());
    if let Some(best) = &trace.best {
        assert_eq!(summary.survivors[0].index, best.index);
    }
    assert!(summary.curve.windows(2).all(|w| w[0].1 <= w[1].1));
}

#[test]
fn repeated_runs_are_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run(&small(a.path(), 11), &ProblemRegistry::with_builtins()).unwrap();
    let mut cfg = small(b.path(), 11);
    cfg.jobs = 1;
    run(&cfg, &ProblemRegistry::with_builtins()).unwrap();
    let read = |d: &std::path::Path| std::fs::read(d.join(SETTINGS_FILE)).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn dump_reports_writes_one_file_per_candidate() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path(), 3);
    cfg.n_trials = 2;
    cfg.dump_reports = true;
    run(&cfg, &ProblemRegistry::with_builtins()).unwrap();
    for j in 0..2 {
        let text = std::fs::read_to_string(dir.path().join(format!("reports/candidate_{j:04}.json"))).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(!v.as_array().unwrap().is_empty());
    }
}

#[test]
fn mismatched_scenario_count_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path(), 1);
    cfg.n_scenarios = Some(7);
    assert!(matches!(run(&cfg, &ProblemRegistry::with_builtins()), Err(Error::Config(_))));
}

#[test]
fn corrupt_settings_report_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    run(&small(dir.path(), 5), &ProblemRegistry::with_builtins()).unwrap();
    let path = dir.path().join(SETTINGS_FILE);
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("9,surviving,1:1:1:1:1:1:1,abc,,,,,,,,,,,0,,\n");
    std::fs::write(&path, text).unwrap();
    let err = summarize(dir.path()).unwrap_err().to_string();
    assert!(err.contains("line 6"), "{err}");
}

#[test]
fn empty_survivor_set_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path(), 2);
    // no solve fits a budget this small
    cfg.c_eval = Some(1.0);
    let outcome = run(&cfg, &ProblemRegistry::with_builtins()).unwrap();
    assert_eq!(outcome.exit_code(), 3);
    let summary = summarize(dir.path()).unwrap();
    assert_eq!(summary.exit_code(), 3);
    assert!(nmpc_tuner::summary::render_table(&summary).contains("no admissible setting"));
}
