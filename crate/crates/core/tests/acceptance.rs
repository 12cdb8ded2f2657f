//! Acceptance checks, one PASS/FAIL line each. Exits non-zero if any fails.

use std::sync::Arc;
use std::time::{Duration, Instant};

use nmpc_tuner::artifacts::{read_settings, SETTINGS_FILE};
use nmpc_tuner::controller::{input_block, open_loop_cost_gradient, predict_trajectory};
use nmpc_tuner::design::{realize_continuous, shape_value, N_DESIGN};
use nmpc_tuner::integrator::simulate_fine;
use nmpc_tuner::tuner::{ccstr, cgamma, crt, evaluate_on_set, find_alpha_hat, SetEvaluation, SetEvaluator};
use nmpc_tuner::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Expected sample counts, rows by candidate count, columns eta = 0.1, 0.05,
/// 0.01, 0.001 (delta = 1e-3, one admitted failure).
const SAMPLE_COUNTS: [(usize, [u64; 4]); 5] = [
    (1, [132, 264, 1317, 13164]),
    (5, [154, 308, 1536, 15354]),
    (10, [163, 326, 1628, 16280]),
    (100, [193, 386, 1930, 19299]),
    (1000, [223, 445, 2225, 22249]),
];
const SAMPLE_ETA: [f64; 4] = [0.1, 0.05, 0.01, 0.001];

const ORDER_RATIO: (f64, f64) = (14.0, 18.0);
const GRADIENT_POINTS: usize = 20;
const GRADIENT_REL_TOL: f64 = 1e-5;
const FD_REL_STEP: f64 = 1e-6;
const KINK_MARGIN: f64 = 1e-3;
const EQUILIBRIUM_RHS_TOL: f64 = 1e-12;
const EQUILIBRIUM_COST_TOL: f64 = 1e-9;
const ALPHA_WINDOW: (f64, f64) = (0.55, 0.70);
const MAX_BISECTION_EVALS: u32 = 5;

/// End-to-end run: a cost-model constant that puts the real-time boundary
/// inside (0, 1) for most candidates.
const E2E_C_EVAL: f64 = 5e-6;
const E2E_SEED: u64 = 3;
const E2E_BUDGET: Duration = Duration::from_secs(15 * 60);

struct Outcome {
    ok: bool,
    detail: String,
}

fn check(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome { ok, detail: detail.into() }
}

fn timed(budget: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let t = Instant::now();
    let mut o = f();
    let el = t.elapsed();
    if el > budget {
        o.ok = false;
    }
    o.detail = format!("{} [{:.2?} of {:.0?}]", o.detail, el, budget);
    o
}

fn sample_counts() -> Outcome {
    let mut misses = Vec::new();
    for (n, row) in SAMPLE_COUNTS {
        for (eta, expected) in SAMPLE_ETA.into_iter().zip(row) {
            let got = required_scenarios(eta, 1e-3, n, 1).unwrap();
            if got != expected {
                misses.push(format!("n={n} eta={eta}: {got} != {expected}"));
            }
        }
    }
    check(misses.is_empty(), if misses.is_empty() { "20/20 cells exact".into() } else { misses.join("; ") })
}

fn n_steps_cases() -> Outcome {
    let mut ok = n_steps_for(0.5, 3).unwrap() == 2;
    for kappa in 1..=20 {
        ok &= n_steps_for(0.0, kappa).unwrap() == 1;
        ok &= n_steps_for(1.0, kappa).unwrap() == kappa;
    }
    check(ok, "n_steps(0.5, 3) = 2; endpoints for kappa 1..20")
}

struct Decay;

impl Plant for Decay {
    fn n_constraints(&self) -> usize {
        0
    }
    fn rhs(&self, x: &[f64], _u: &[f64], _p: &[f64], dx: &mut [f64]) {
        dx[0] = -x[0];
    }
    fn stage_cost(&self, _x: &[f64], _u: &[f64], _p: &[f64], _q: &[f64]) -> f64 {
        0.0
    }
    fn terminal_penalty(&self, _x: &[f64], _p: &[f64], _q: &[f64]) -> f64 {
        0.0
    }
    fn constraints(&self, _x: &[f64], _u: &[f64], _p: &[f64], _q: &[f64], _c: &mut [f64]) {}
}

fn decay_problem(tau: f64) -> ProblemDefinition {
    let bounds = ProblemBounds {
        u_min: vec![0.0],
        u_max: vec![0.0],
        x_min: vec![0.0],
        x_max: vec![1.0],
        q_min: vec![0.0],
        q_max: vec![0.0],
        p_nom: vec![0.0],
        p_std: vec![0.0],
    };
    ProblemDefinition::new("decay", tau, bounds, Arc::new(Decay)).unwrap()
}

fn integrator_order() -> Outcome {
    let err = |steps: u32| {
        let pb = decay_problem(1.0 / f64::from(steps));
        let x = simulate_fine(&pb, &[1.0], &[0.0], &[0.0], steps).unwrap();
        (x[0] - (-1.0f64).exp()).abs()
    };
    let ratio = err(10) / err(20);
    check((ORDER_RATIO.0..=ORDER_RATIO.1).contains(&ratio), format!("error ratio {ratio:.3}"))
}

fn gradient_check() -> Outcome {
    let pb = pvtol_problem();
    let d = DesignVector {
        kappa: 3,
        mu_d: 0.5,
        n_pred: 10,
        n_contr: 3,
        rho_f: 100.0,
        rho_constr: 1e4,
        max_iter: 5,
    };
    let s = MpcSetting::new(&pb, d).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut c = vec![0.0; pb.n_c()];
    let (mut tested, mut worst) = (0, 0.0f64);
    while tested < GRADIENT_POINTS {
        let sc = generate_cloud(&pb, 1, rng.random())[0].clone();
        let z: Vec<f64> = (0..s.n_z())
            .map(|i| if i % 2 == 0 { rng.random_range(0.0..3.0) } else { rng.random_range(-0.5..0.5) })
            .collect();
        let Ok(traj) = predict_trajectory(&s, &sc.x0, &sc.p, &z) else { continue };
        let mut smooth = pb.plant().terminal_penalty(traj.last().unwrap(), &sc.p, &sc.q) > KINK_MARGIN;
        for (j, xj) in traj.iter().enumerate().skip(1) {
            pb.plant().constraints(xj, input_block(&s, &z, j), &sc.p, &sc.q, &mut c);
            smooth &= c.iter().all(|v| v.abs() > KINK_MARGIN);
        }
        if !smooth {
            continue;
        }
        let (_, g) = open_loop_cost_gradient(&s, &sc.x0, &sc.p, &sc.q, &z).unwrap();
        let mut zp = z.clone();
        let mut err = 0.0f64;
        for i in 0..z.len() {
            let h = FD_REL_STEP * z[i].abs().max(1.0);
            zp[i] = z[i] + h;
            let a = open_loop_cost(&s, &sc.x0, &sc.p, &sc.q, &zp).unwrap();
            zp[i] = z[i] - h;
            let b = open_loop_cost(&s, &sc.x0, &sc.p, &sc.q, &zp).unwrap();
            zp[i] = z[i];
            err = err.max(((a - b) / (2.0 * h) - g[i]).abs());
        }
        let scale = g.iter().map(|v| v.abs()).fold(1.0, f64::max);
        worst = worst.max(err / scale);
        tested += 1;
    }
    check(worst < GRADIENT_REL_TOL, format!("worst relative error {worst:.2e} over {tested} points"))
}

fn pvtol_equilibrium() -> Outcome {
    let pb = pvtol_problem();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    let mut dx = [0.0; 6];
    for _ in 0..100 {
        let p = [rng.random_range(-1.0..1.0), rng.random_range(-10.0..10.0)];
        let xd = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0, 0.0, 0.0, 0.0];
        pb.plant().rhs(&xd, &[1.0, 0.0], &p, &mut dx);
        worst = worst.max(dx.iter().fold(0.0, |m, v| m.max(v.abs())));
    }
    let d = realize(&ShapingVector::linear(), 0.5, &DesignBounds::default()).unwrap();
    let s = MpcSetting::new(&pb, d).unwrap();
    let sc = Scenario {
        x0: vec![0.3, -0.6, 0.0, 0.0, 0.0, 0.0],
        p: vec![0.2, 5.0],
        q: vec![0.3, -0.6, 1.0, 0.5],
        duration: 0.5,
    };
    let r = sim_cl(&s, &sc, &s.default_warm_start(), TimingMode::CostModel { c_eval: 1e-9 });
    let tau_u = s.grid().tau_u;
    let crit = (crt(&r, tau_u, 1.0), cgamma(&r, 0.98), ccstr(&r));
    let ok = worst < EQUILIBRIUM_RHS_TOL && r.closed_loop_cost < EQUILIBRIUM_COST_TOL && crit == (0.0, 0.0, 0.0);
    check(ok, format!("max |rhs| {worst:.1e}, closed-loop cost {:.1e}, criteria {crit:?}", r.closed_loop_cost))
}

struct Threshold {
    limit: f64,
}

impl SetEvaluator for Threshold {
    fn evaluate(&self, _c: usize, _s: &ShapingVector, alpha: f64, scenarios: &[Scenario]) -> nmpc_tuner::Result<SetEvaluation> {
        Ok(SetEvaluation {
            crt: if alpha <= self.limit { 0.0 } else { 1.0 },
            scenarios: scenarios.len(),
            ..Default::default()
        })
    }
}

fn dichotomy() -> Outcome {
    let a0 = vec![Scenario {
        x0: vec![],
        p: vec![],
        q: vec![],
        duration: 1.0,
    }];
    let par = OptimPar {
        eps: 0.15,
        ..Default::default()
    };
    let sigma = ShapingVector::linear();
    let mid = find_alpha_hat(&Threshold { limit: 0.7 }, 0, &sigma, &a0, &par).unwrap();
    let none = find_alpha_hat(&Threshold { limit: -1.0 }, 0, &sigma, &a0, &par).unwrap();
    let all = find_alpha_hat(&Threshold { limit: 2.0 }, 0, &sigma, &a0, &par).unwrap();
    let ok = mid.alpha_hat.is_some_and(|a| (ALPHA_WINDOW.0..=ALPHA_WINDOW.1).contains(&a))
        && mid.evaluations <= MAX_BISECTION_EVALS
        && none.alpha_hat.is_none()
        && all.alpha_hat == Some(1.0)
        && all.evaluations == 2;
    check(
        ok,
        format!(
            "alpha {:?} in {} evals; infeasible {:?}; always feasible {:?} in {} evals",
            mid.alpha_hat, mid.evaluations, none.alpha_hat, all.alpha_hat, all.evaluations
        ),
    )
}

fn shaping() -> Outcome {
    let grid: Vec<f64> = (0..=100).map(|i| f64::from(i) / 100.0).collect();
    let bounds = DesignBounds::default();
    let mut ok = true;
    for s in (-3..=-1).chain(1..=3) {
        ok &= shape_value(s, 0.0).unwrap() == 0.0 && shape_value(s, 1.0).unwrap() == 1.0;
        ok &= grid.windows(2).all(|w| shape_value(s, w[0]).unwrap() < shape_value(s, w[1]).unwrap());
    }
    // every exponent in every component, plus mixed vectors
    let mut sigmas: Vec<ShapingVector> = (-3..=-1).chain(1..=3).map(|s| ShapingVector::new([s; N_DESIGN], 3).unwrap()).collect();
    sigmas.extend((0..50).map(|j| sample_sigma(5, j, 3).unwrap()));
    for sigma in &sigmas {
        let cont: Vec<[f64; N_DESIGN]> = grid.iter().map(|a| realize_continuous(sigma, *a, &bounds).unwrap()).collect();
        for w in cont.windows(2) {
            // kappa strictly decreasing, everything else strictly increasing
            ok &= w[1][0] < w[0][0];
            ok &= (1..N_DESIGN).all(|i| w[1][i] > w[0][i]);
        }
        let real: Vec<DesignVector> = grid.iter().map(|a| realize(sigma, *a, &bounds).unwrap()).collect();
        for w in real.windows(2) {
            ok &= w[1].kappa <= w[0].kappa
                && w[1].mu_d >= w[0].mu_d
                && w[1].n_pred >= w[0].n_pred
                && w[1].n_contr >= w[0].n_contr
                && w[1].rho_f >= w[0].rho_f
                && w[1].rho_constr >= w[0].rho_constr
                && w[1].max_iter >= w[0].max_iter;
        }
    }
    check(ok, format!("{} shaping vectors x 101 alphas", sigmas.len()))
}

struct EndToEnd {
    outcome: Outcome,
    reports: Vec<ClosedLoopReport>,
}

fn end_to_end() -> EndToEnd {
    let registry = ProblemRegistry::with_builtins();
    let base = RunConfig {
        problem: "pvtol".into(),
        n_trials: 10,
        nb: 5,
        nsb: 4,
        duration: 0.5,
        timing_mode: TimingKind::CostModel,
        c_eval: Some(E2E_C_EVAL),
        seed: E2E_SEED,
        dump_reports: true,
        ..Default::default()
    };
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let t = Instant::now();
    let outcomes: Vec<RunOutcome> = dirs
        .iter()
        .zip([1, 1, 4])
        .map(|(d, jobs)| {
            let cfg = RunConfig {
                jobs,
                out: d.path().to_path_buf(),
                ..base.clone()
            };
            run(&cfg, &registry).unwrap()
        })
        .collect();
    let elapsed = t.elapsed();

    let json: Vec<String> = outcomes.iter().map(|o| serde_json::to_string(&o.result).unwrap()).collect();
    let csv: Vec<Vec<u8>> = dirs.iter().map(|d| std::fs::read(d.path().join(SETTINGS_FILE)).unwrap()).collect();
    let identical = json.windows(2).all(|w| w[0] == w[1]) && csv.windows(2).all(|w| w[0] == w[1]);

    let result = &outcomes[0].result;
    let pb = pvtol_problem();
    let seeds = nmpc_tuner::run::seeds(E2E_SEED);
    let all = generate_cloud(&pb, 20, seeds.scenarios);
    let par = OptimPar::default();
    let mut survivors_ok = true;
    for &j in &result.survivors {
        let r = &result.records[j];
        let e = evaluate_on_set(&pb, &base.design_bounds(), &r.sigma, r.alpha_hat.unwrap(), &all, &par, TimingMode::CostModel { c_eval: E2E_C_EVAL }, false).unwrap();
        survivors_ok &= e.crt == 0.0 && e.cgamma == 0.0 && e.ccstr <= par.c_max;
    }

    let rows = read_settings(&dirs[0].path().join(SETTINGS_FILE)).unwrap();
    let annotated = rows
        .iter()
        .filter(|r| !r.is_surviving())
        .all(|r| r.elimination_batch.is_some() && r.elimination_criterion.is_some());
    let trace = &outcomes[0].trace;
    let bounded = trace.ocp_solve_count <= trace.ocp_solve_bound;

    let reports = outcomes[0].log.iter().flat_map(|r| r.reports.iter().cloned()).collect();
    let ok = identical && survivors_ok && annotated && bounded && elapsed < E2E_BUDGET;
    EndToEnd {
        outcome: check(
            ok,
            format!(
                "identical {identical}; {} survivors re-certified {survivors_ok}; annotated {annotated}; \
                 solves {} <= {} {bounded}; elimination {:?}; 3 runs in {elapsed:.1?}",
                result.survivors.len(),
                trace.ocp_solve_count,
                trace.ocp_solve_bound,
                result.elimination_trace
            ),
        ),
        reports,
    }
}

fn dev_acc_monotone(reports: &[ClosedLoopReport]) -> Outcome {
    let ok = !reports.is_empty() && reports.iter().all(|r| crt(r, r.tau_u, 2.0) <= crt(r, r.tau_u, 1.0));
    check(ok, format!("{} reports", reports.len()))
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let sec = Duration::from_secs;
    results.push(("1 certification sample counts", timed(sec(1), sample_counts)));
    results.push(("2 inner step counts", timed(sec(1), n_steps_cases)));
    results.push(("3 RK4 global order", timed(sec(1), integrator_order)));
    results.push(("4 sensitivity gradient vs finite differences", timed(sec(30), gradient_check)));
    results.push(("5 PVTOL equilibrium", timed(sec(30), pvtol_equilibrium)));
    results.push(("6 dichotomy oracle", timed(sec(1), dichotomy)));
    results.push(("7 shaping properties", timed(sec(5), shaping)));
    let e2e = end_to_end();
    results.push(("8 end-to-end desk-scale run", e2e.outcome));
    let reports = e2e.reports;
    results.push(("9 dev_acc monotonicity", timed(sec(1), || dev_acc_monotone(&reports))));

    let mut failed = 0;
    for (name, o) in &results {
        println!("{} {name}: {}", if o.ok { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.ok);
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
