//! End-to-end orchestration of a tuning run and its artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::artifacts::{self, Seeds, TraceFile};
use crate::config::{RunConfig, TimingKind};
use crate::controller::{calibrate_c_eval, TimingMode};
use crate::design::{sample_sigma, ShapingVector};
use crate::error::{Error, Result};
use crate::problem::{generate_cloud, make_batches, ProblemRegistry};
use crate::tuner::{ocp_solve_bound, required_scenarios, tune, CandidateStatus, ClosedLoopEvaluator, EvaluationRecord, TuningResult};

/// Certification precision and confidence quoted in `run.log`.
const NOTE_ETA: f64 = 0.05;
const NOTE_DELTA: f64 = 1e-3;

const SIGMA_TAG: u64 = 1;
const SCENARIO_TAG: u64 = 2;

/// Derives an independent sub-seed from the master seed.
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(tag);
    rng.next_u64()
}

pub fn seeds(master: u64) -> Seeds {
    Seeds {
        master,
        sigma: derive_seed(master, SIGMA_TAG),
        scenarios: derive_seed(master, SCENARIO_TAG),
    }
}

/// Shaping vectors of a run, in candidate order.
pub fn sample_candidates(config: &RunConfig) -> Result<Vec<ShapingVector>> {
    let seed = seeds(config.seed).sigma;
    (0..config.n_trials as u64).map(|j| sample_sigma(seed, j, config.sigma_bar)).collect()
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub result: TuningResult,
    pub trace: TraceFile,
    pub log: Vec<EvaluationRecord>,
    pub out_dir: PathBuf,
}

impl RunOutcome {
    /// 0 when at least one setting survived, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.result.survivors.is_empty() {
            3
        } else {
            0
        }
    }
}

/// Samples candidates and scenarios, tunes, and writes `settings.csv`,
/// `trace.json` and `run.log` (plus per-candidate report dumps when
/// requested) into `config.out`.
pub fn run(config: &RunConfig, registry: &ProblemRegistry) -> Result<RunOutcome> {
    let start = Instant::now();
    config.validate()?;
    let problem = registry
        .get(&config.problem)?
        .with_scenario_duration(config.duration)
        .map_err(|e| Error::Config(e.to_string()))?;
    let bounds = config.design_bounds();
    let par = config.optim_par();
    let seeds = seeds(config.seed);

    let sigmas = sample_candidates(config)?;
    let scenarios = generate_cloud(&problem, config.cardinality(), seeds.scenarios);
    let batches = make_batches(scenarios, config.nb, config.nsb).map_err(|e| Error::Config(e.to_string()))?;

    let (timing, c_eval, jobs) = match config.timing_mode {
        TimingKind::CostModel => {
            let c = config.c_eval.unwrap_or_else(|| calibrate_c_eval(&problem));
            (TimingMode::CostModel { c_eval: c }, Some(c), config.jobs)
        }
        TimingKind::Wallclock => {
            // timing is only meaningful without oversubscription
            let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
            (
                TimingMode::Wallclock {
                    repeats: config.timing_repeats,
                },
                None,
                config.jobs.min(cores),
            )
        }
    };

    let evaluator = ClosedLoopEvaluator {
        problem: problem.clone(),
        bounds: bounds.clone(),
        par,
        timing,
        keep_reports: config.dump_reports,
    };
    let output = tune(&evaluator, &bounds, &sigmas, &batches, &par, jobs)?;
    let result = output.result;

    let m_max = ((config.duration / (f64::from(bounds.kappa.min) * problem.tau())) - 1e-9).ceil() as usize;
    let trace = TraceFile {
        elimination_trace: result.elimination_trace.clone(),
        infeasible_at_a0: result
            .records
            .iter()
            .filter(|r| matches!(r.status, CandidateStatus::InfeasibleAtA0 { .. }))
            .count(),
        ocp_solve_count: result.ocp_solve_count,
        ocp_solve_bound: ocp_solve_bound(config.n_trials, config.cardinality(), m_max, config.eps),
        set_evaluations: result.set_evaluations,
        step3_rejections: result.step3_rejections,
        survivors: result.survivors.clone(),
        best: result.best.clone(),
        c_eval,
        seeds: seeds.clone(),
        config: config.clone(),
    };

    let out = &config.out;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let rows = artifacts::settings_rows(&result, problem.tau());
    artifacts::write_settings(&out.join(artifacts::SETTINGS_FILE), &rows)?;
    artifacts::write_json(&out.join(artifacts::TRACE_FILE), &trace)?;
    if config.dump_reports {
        write_reports(out, &output.log, sigmas.len())?;
    }
    let log_text = run_log(config, &trace, &result, jobs, start.elapsed().as_secs_f64())?;
    let log_path = out.join(artifacts::RUN_LOG_FILE);
    std::fs::write(&log_path, log_text).map_err(|e| Error::io(&log_path, e))?;

    Ok(RunOutcome {
        result,
        trace,
        log: output.log,
        out_dir: out.clone(),
    })
}

fn write_reports(out: &Path, log: &[EvaluationRecord], n: usize) -> Result<()> {
    let dir = out.join(artifacts::REPORTS_DIR);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for j in 0..n {
        let entries: Vec<&EvaluationRecord> = log.iter().filter(|r| r.candidate == j).collect();
        artifacts::write_json(&dir.join(format!("candidate_{j:04}.json")), &entries)?;
    }
    Ok(())
}

fn run_log(config: &RunConfig, trace: &TraceFile, result: &TuningResult, jobs: usize, elapsed: f64) -> Result<String> {
    let mut s = String::new();
    let card = config.cardinality();
    let certifying = card - config.nsb;
    let for_trials = required_scenarios(NOTE_ETA, NOTE_DELTA, config.n_trials, 1)?;
    let for_one = required_scenarios(NOTE_ETA, NOTE_DELTA, 1, 1)?;
    let _ = writeln!(s, "problem: {}", config.problem);
    let _ = writeln!(s, "master seed: {}", trace.seeds.master);
    let _ = writeln!(s, "sigma seed: {} (candidate j uses stream j)", trace.seeds.sigma);
    let _ = writeln!(s, "scenario seed: {} (scenario i uses stream i; batch b holds scenarios (b-1)*nsb..b*nsb)", trace.seeds.scenarios);
    let _ = writeln!(s, "candidates: {}  batches: {} x {} = {} scenarios", config.n_trials, config.nb, config.nsb, card);
    match trace.c_eval {
        Some(c) => {
            let _ = writeln!(s, "timing: cost-model, c_eval = {c:e} s per stage evaluation");
        }
        None => {
            let _ = writeln!(s, "timing: wallclock, median of {} run(s) per solve", config.timing_repeats);
        }
    }
    let _ = writeln!(s, "workers: {jobs}");
    let _ = writeln!(
        s,
        "certification: {certifying} scenarios beyond the initial set; at eta = {NOTE_ETA}, delta = {NOTE_DELTA:e} with one admitted failure, \
         {for_trials} are required for {} candidates and {for_one} for a single candidate",
        config.n_trials
    );
    let _ = writeln!(s, "phase 1: {} candidates infeasible on the initial set ({} after the quality check)", trace.infeasible_at_a0, trace.step3_rejections);
    let _ = writeln!(s, "phase 2: cumulative eliminations per batch {:?}", trace.elimination_trace);
    let _ = writeln!(s, "open-loop solves: {} (worst-case bound {})", trace.ocp_solve_count, trace.ocp_solve_bound);
    for r in &result.records {
        let alpha = r.alpha_hat.map_or_else(|| "-".to_string(), |a| a.to_string());
        let _ = writeln!(s, "candidate {}: sigma {} alpha {} {:?}", r.index, r.sigma, alpha, r.status);
    }
    match &result.best {
        Some(b) => {
            let _ = writeln!(s, "best: candidate {} sigma {} alpha {} cost {}", b.index, b.sigma, b.alpha, b.cumulative_cost);
        }
        None => {
            let _ = writeln!(s, "best: no admissible setting");
        }
    }
    let _ = writeln!(s, "elapsed: {elapsed:.3} s");
    Ok(s)
}
