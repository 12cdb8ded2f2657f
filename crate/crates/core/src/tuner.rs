//! Certification engine: the three success criteria, the per-candidate
//! alpha search and the two-phase elimination over scenario batches.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{sim_cl, ClosedLoopReport, MpcSetting, TimingMode};
use crate::design::{realize, DesignBounds, DesignVector, ShapingVector};
use crate::error::{Error, Result};
use crate::problem::{ProblemDefinition, Scenario, ScenarioBatchSet};

/// Certification thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimPar {
    /// Required contraction of the open-loop cost over one experiment.
    pub gamma: f64,
    /// Precision of the alpha bisection.
    pub eps: f64,
    /// Speed of the target device relative to this machine.
    pub dev_acc: f64,
    /// Largest admissible constraint violation.
    pub c_max: f64,
}

impl Default for OptimPar {
    fn default() -> Self {
        Self {
            gamma: 0.98,
            eps: 0.15,
            dev_acc: 1.0,
            c_max: 0.1,
        }
    }
}

impl OptimPar {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(self.gamma) {
            return Err(Error::invalid(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if !open_unit(self.eps) {
            return Err(Error::invalid(format!("eps must lie in (0, 1), got {}", self.eps)));
        }
        if !(self.dev_acc > 0.0 && self.dev_acc.is_finite()) {
            return Err(Error::invalid(format!("dev_acc must be positive, got {}", self.dev_acc)));
        }
        if !(self.c_max >= 0.0 && self.c_max.is_finite()) {
            return Err(Error::invalid(format!("c_max must be nonnegative, got {}", self.c_max)));
        }
        Ok(())
    }
}

/// The success criterion a candidate failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Criterion {
    RealTime,
    Contraction,
    Constraints,
}

impl Criterion {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::RealTime => "real-time",
            Self::Contraction => "contraction",
            Self::Constraints => "constraints",
        }
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real-time" => Ok(Self::RealTime),
            "contraction" => Ok(Self::Contraction),
            "constraints" => Ok(Self::Constraints),
            _ => Err(Error::invalid(format!("unknown criterion `{s}`"))),
        }
    }
}

/// Real-time violation: `max_k max(0, t_k / (dev_acc tau_u) - 1)`.
pub fn crt(report: &ClosedLoopReport, tau_u: f64, dev_acc: f64) -> f64 {
    if report.diverged {
        return f64::INFINITY;
    }
    let budget = dev_acc * tau_u;
    report
        .solver_time
        .iter()
        .map(|t| (t / budget - 1.0).max(0.0))
        .fold(0.0, f64::max)
}

/// Contraction violation: `max(0, J_ol(m) - gamma J_ol(1))`.
pub fn cgamma(report: &ClosedLoopReport, gamma: f64) -> f64 {
    if report.diverged || report.j_ol.is_empty() {
        return f64::INFINITY;
    }
    let first = report.j_ol[0];
    let last = report.j_ol[report.j_ol.len() - 1];
    (last - gamma * first).max(0.0)
}

/// Largest constraint violation over the experiment.
pub fn ccstr(report: &ClosedLoopReport) -> f64 {
    if report.diverged {
        return f64::INFINITY;
    }
    report.max_violation.iter().map(|v| v.max(0.0)).fold(0.0, f64::max)
}

/// Criteria aggregated over a scenario set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SetEvaluation {
    pub crt: f64,
    pub cgamma: f64,
    pub ccstr: f64,
    /// Sum of closed-loop costs over the set.
    pub cost_sum: f64,
    pub scenarios: usize,
    /// Open-loop solves performed.
    pub solves: u64,
    /// Per-scenario reports, kept only when requested.
    #[serde(skip)]
    pub reports: Vec<ClosedLoopReport>,
}

impl SetEvaluation {
    pub fn rt_ok(&self) -> bool {
        self.crt == 0.0
    }

    /// The first failed criterion, checked in the order real-time,
    /// contraction, constraints.
    pub fn failure(&self, par: &OptimPar) -> Option<Criterion> {
        if !self.rt_ok() {
            Some(Criterion::RealTime)
        } else {
            self.quality_failure(par)
        }
    }

    /// Contraction or constraint failure, ignoring real time.
    pub fn quality_failure(&self, par: &OptimPar) -> Option<Criterion> {
        if self.cgamma > 0.0 {
            Some(Criterion::Contraction)
        } else if !(self.ccstr <= par.c_max) {
            Some(Criterion::Constraints)
        } else {
            None
        }
    }
}

/// Evaluates one candidate at one alpha on a scenario set. The tuner only
/// interacts with controllers through this trait, which lets tests swap in
/// synthetic feasibility maps.
pub trait SetEvaluator: Sync {
    fn evaluate(&self, candidate: usize, sigma: &ShapingVector, alpha: f64, scenarios: &[Scenario]) -> Result<SetEvaluation>;
}

/// Runs `sim_cl` on every scenario of a set and aggregates the criteria.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_on_set(
    problem: &ProblemDefinition,
    bounds: &DesignBounds,
    sigma: &ShapingVector,
    alpha: f64,
    scenarios: &[Scenario],
    par: &OptimPar,
    timing: TimingMode,
    keep_reports: bool,
) -> Result<SetEvaluation> {
    if scenarios.is_empty() {
        return Err(Error::invalid("scenario set is empty"));
    }
    let design = realize(sigma, alpha, bounds)?;
    let setting = MpcSetting::new(problem, design)?;
    let tau_u = setting.grid().tau_u;
    let z0 = setting.default_warm_start();
    let mut out = SetEvaluation::default();
    for sc in scenarios {
        let report = sim_cl(&setting, sc, &z0, timing);
        out.crt = out.crt.max(crt(&report, tau_u, par.dev_acc));
        out.cgamma = out.cgamma.max(cgamma(&report, par.gamma));
        out.ccstr = out.ccstr.max(ccstr(&report));
        out.cost_sum += report.closed_loop_cost;
        out.scenarios += 1;
        out.solves += report.solves as u64;
        if keep_reports {
            out.reports.push(report);
        }
    }
    Ok(out)
}

/// [`SetEvaluator`] backed by closed-loop simulation of a real problem.
#[derive(Debug, Clone)]
pub struct ClosedLoopEvaluator {
    pub problem: ProblemDefinition,
    pub bounds: DesignBounds,
    pub par: OptimPar,
    pub timing: TimingMode,
    pub keep_reports: bool,
}

impl SetEvaluator for ClosedLoopEvaluator {
    fn evaluate(&self, _candidate: usize, sigma: &ShapingVector, alpha: f64, scenarios: &[Scenario]) -> Result<SetEvaluation> {
        evaluate_on_set(&self.problem, &self.bounds, sigma, alpha, scenarios, &self.par, self.timing, self.keep_reports)
    }
}

/// One set evaluation made while tuning, with its reports when they were
/// kept.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationRecord {
    pub candidate: usize,
    /// 1-based batch index; batch 1 is the initial set.
    pub batch: usize,
    pub alpha: f64,
    pub evaluation: SetEvaluation,
    pub reports: Vec<ClosedLoopReport>,
}

/// Outcome of the alpha search for one candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaSearch {
    pub alpha_hat: Option<f64>,
    /// Set evaluations spent.
    pub evaluations: u32,
    /// Largest alpha known to be real-time feasible, if any.
    pub feasible_lower: Option<f64>,
    /// Smallest alpha known to be real-time infeasible; `None` when alpha = 1
    /// passed the real-time test.
    pub infeasible_upper: Option<f64>,
    /// Why the candidate was rejected, if it was.
    pub rejection: Option<Criterion>,
    /// True when the rejection came from the quality post-check at
    /// `alpha_max` rather than from real time at alpha = 0.
    pub rejected_after_bisection: bool,
    /// Evaluation at `alpha_hat` (or at the rejecting point).
    pub evaluation: Option<SetEvaluation>,
    /// Every evaluation in order, as `(alpha, evaluation)`.
    pub trail: Vec<(f64, SetEvaluation)>,
}

/// Finds the largest real-time-feasible alpha on `a0` to precision `eps`.
///
/// 1. If real time fails at alpha = 0 the candidate is infeasible.
/// 2. If every criterion holds at alpha = 1, that is the answer.
/// 3. Otherwise bisect on real time alone, keeping a feasible lower and an
///    infeasible upper endpoint, until they are within `eps`; the lower
///    endpoint must then also pass contraction and constraints.
pub fn find_alpha_hat<E: SetEvaluator + ?Sized>(
    evaluator: &E,
    candidate: usize,
    sigma: &ShapingVector,
    a0: &[Scenario],
    par: &OptimPar,
) -> Result<AlphaSearch> {
    if a0.is_empty() {
        return Err(Error::invalid("initial scenario set is empty"));
    }
    par.validate()?;
    let mut trail = Vec::new();
    let eval = |alpha: f64, trail: &mut Vec<(f64, SetEvaluation)>| -> Result<SetEvaluation> {
        let e = evaluator.evaluate(candidate, sigma, alpha, a0)?;
        trail.push((alpha, e.clone()));
        Ok(e)
    };
    let done = |alpha_hat, lower, upper, rejection, after, evaluation, trail: Vec<(f64, SetEvaluation)>| AlphaSearch {
        alpha_hat,
        evaluations: trail.len() as u32,
        feasible_lower: lower,
        infeasible_upper: upper,
        rejection,
        rejected_after_bisection: after,
        evaluation,
        trail,
    };

    let e0 = eval(0.0, &mut trail)?;
    if !e0.rt_ok() {
        return Ok(done(None, None, Some(0.0), Some(Criterion::RealTime), false, Some(e0), trail));
    }
    let e1 = eval(1.0, &mut trail)?;
    if e1.failure(par).is_none() {
        return Ok(done(Some(1.0), Some(1.0), None, None, false, Some(e1), trail));
    }
    let (lower, lower_eval, upper) = if e1.rt_ok() {
        (1.0, e1, None)
    } else {
        let (mut lo, mut lo_eval, mut hi) = (0.0, e0, 1.0);
        while hi - lo > par.eps {
            let mid = 0.5 * (lo + hi);
            let e = eval(mid, &mut trail)?;
            if e.rt_ok() {
                lo = mid;
                lo_eval = e;
            } else {
                hi = mid;
            }
        }
        (lo, lo_eval, Some(hi))
    };
    match lower_eval.quality_failure(par) {
        None => Ok(done(Some(lower), Some(lower), upper, None, false, Some(lower_eval), trail)),
        Some(c) => Ok(done(None, Some(lower), upper, Some(c), true, Some(lower_eval), trail)),
    }
}

/// Final state of a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum CandidateStatus {
    Surviving,
    /// No admissible alpha on the initial set.
    InfeasibleAtA0 { criterion: Criterion },
    /// Failed `criterion` on batch `batch` (1-based, at least 2).
    Eliminated { batch: usize, criterion: Criterion },
}

impl CandidateStatus {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Surviving => "surviving",
            Self::InfeasibleAtA0 { .. } => "infeasible_at_A0",
            Self::Eliminated { .. } => "eliminated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub index: usize,
    pub sigma: ShapingVector,
    pub alpha_hat: Option<f64>,
    pub design: Option<DesignVector>,
    /// Sum of closed-loop costs over every scenario evaluated at `alpha_hat`,
    /// the initial set included.
    pub cumulative_cost: Option<f64>,
    pub status: CandidateStatus,
    pub scenarios_evaluated: usize,
    /// Set evaluations spent in the alpha search.
    pub search_evaluations: u32,
}

/// The selected `(sigma, alpha)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestSetting {
    pub index: usize,
    pub sigma: ShapingVector,
    pub alpha: f64,
    pub design: DesignVector,
    pub cumulative_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningResult {
    pub records: Vec<CandidateRecord>,
    /// Indices of surviving candidates, ascending cumulative cost, ties by
    /// index.
    pub survivors: Vec<usize>,
    pub best: Option<BestSetting>,
    /// Cumulative number of candidates eliminated after each of batches
    /// `2..=nb`.
    pub elimination_trace: Vec<usize>,
    pub ocp_solve_count: u64,
    pub set_evaluations: u64,
    /// Candidates real-time feasible at some alpha but rejected by the
    /// quality check at `alpha_max`.
    pub step3_rejections: usize,
}

/// A tuning result together with every evaluation that produced it.
#[derive(Debug, Clone)]
pub struct TuneOutput {
    pub result: TuningResult,
    pub log: Vec<EvaluationRecord>,
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Two-phase tuning: freeze `alpha_hat` per candidate on batch 1, then
/// evaluate survivors on batches `2..=nb`, dropping each at its first
/// failure. Candidates are processed in parallel on `jobs` workers; the
/// result does not depend on `jobs`.
pub fn tune<E: SetEvaluator>(
    evaluator: &E,
    bounds: &DesignBounds,
    sigmas: &[ShapingVector],
    batches: &ScenarioBatchSet,
    par: &OptimPar,
    jobs: usize,
) -> Result<TuneOutput> {
    if sigmas.is_empty() {
        return Err(Error::invalid("no candidate shaping vectors"));
    }
    if batches.is_empty() {
        return Err(Error::invalid("no scenario batches"));
    }
    par.validate()?;
    bounds.validate()?;
    let pool = pool(jobs)?;
    let mut log = Vec::new();

    let searches: Vec<Result<AlphaSearch>> = pool.install(|| {
        sigmas
            .par_iter()
            .enumerate()
            .map(|(j, s)| find_alpha_hat(evaluator, j, s, batches.initial(), par))
            .collect()
    });

    let mut records = Vec::with_capacity(sigmas.len());
    let mut ocp_solve_count = 0u64;
    let mut set_evaluations = 0u64;
    let mut step3_rejections = 0;
    for (j, search) in searches.into_iter().enumerate() {
        let search = search?;
        set_evaluations += u64::from(search.evaluations);
        if search.rejected_after_bisection {
            step3_rejections += 1;
        }
        let record = match (search.alpha_hat, search.rejection) {
            (Some(alpha), _) => {
                let e = search.evaluation.as_ref().expect("accepted search keeps its evaluation");
                CandidateRecord {
                    index: j,
                    sigma: sigmas[j],
                    alpha_hat: Some(alpha),
                    design: Some(realize(&sigmas[j], alpha, bounds)?),
                    cumulative_cost: Some(e.cost_sum),
                    status: CandidateStatus::Surviving,
                    scenarios_evaluated: e.scenarios,
                    search_evaluations: search.evaluations,
                }
            }
            (None, c) => CandidateRecord {
                index: j,
                sigma: sigmas[j],
                alpha_hat: None,
                design: None,
                cumulative_cost: None,
                status: CandidateStatus::InfeasibleAtA0 {
                    criterion: c.unwrap_or(Criterion::RealTime),
                },
                scenarios_evaluated: 0,
                search_evaluations: search.evaluations,
            },
        };
        records.push(record);
        for (alpha, mut e) in search.trail {
            ocp_solve_count += e.solves;
            let reports = std::mem::take(&mut e.reports);
            log.push(EvaluationRecord {
                candidate: j,
                batch: 1,
                alpha,
                evaluation: e,
                reports,
            });
        }
    }

    let mut elimination_trace = Vec::with_capacity(batches.len().saturating_sub(1));
    let mut eliminated = 0;
    for (b, batch) in batches.batches().iter().enumerate().skip(1) {
        let alive: Vec<usize> = records
            .iter()
            .filter(|r| r.status == CandidateStatus::Surviving)
            .map(|r| r.index)
            .collect();
        let evals: Vec<Result<SetEvaluation>> = pool.install(|| {
            alive
                .par_iter()
                .map(|&j| evaluator.evaluate(j, &sigmas[j], records[j].alpha_hat.expect("survivors have alpha"), batch))
                .collect()
        });
        for (&j, e) in alive.iter().zip(evals) {
            let mut e = e?;
            set_evaluations += 1;
            ocp_solve_count += e.solves;
            let rec = &mut records[j];
            rec.scenarios_evaluated += e.scenarios;
            rec.cumulative_cost = rec.cumulative_cost.map(|c| c + e.cost_sum);
            if let Some(criterion) = e.failure(par) {
                rec.status = CandidateStatus::Eliminated { batch: b + 1, criterion };
                eliminated += 1;
            }
            let alpha = rec.alpha_hat.expect("survivors have alpha");
            let reports = std::mem::take(&mut e.reports);
            log.push(EvaluationRecord {
                candidate: j,
                batch: b + 1,
                alpha,
                evaluation: e,
                reports,
            });
        }
        elimination_trace.push(eliminated);
    }

    let mut survivors: Vec<usize> = records
        .iter()
        .filter(|r| r.status == CandidateStatus::Surviving)
        .map(|r| r.index)
        .collect();
    let cost = |j: usize| records[j].cumulative_cost.unwrap_or(f64::INFINITY);
    survivors.sort_by(|&a, &b| cost(a).total_cmp(&cost(b)).then(a.cmp(&b)));
    let best = survivors.first().map(|&j| {
        let r = &records[j];
        BestSetting {
            index: j,
            sigma: r.sigma,
            alpha: r.alpha_hat.expect("survivors have alpha"),
            design: r.design.expect("survivors have a design"),
            cumulative_cost: cost(j),
        }
    });

    Ok(TuneOutput {
        result: TuningResult {
            records,
            survivors,
            best,
            elimination_trace,
            ocp_solve_count,
            set_evaluations,
            step3_rejections,
        },
        log,
    })
}

/// Worst-case open-loop solve count
/// `n_trials * card(A) * m_max * ceil(log2(1 / eps))`.
pub fn ocp_solve_bound(n_trials: usize, cardinality: usize, m_max: usize, eps: f64) -> u64 {
    let levels = (1.0 / eps).log2().ceil().max(1.0) as u64;
    n_trials as u64 * cardinality as u64 * m_max as u64 * levels
}

/// Number of scenarios needed to certify, with confidence `1 - delta`, that
/// each of `n_trials` candidates fails on at most a fraction `eta` of the
/// scenario space while tolerating `allowed_failures` observed failures.
///
/// Uses `(sqrt(L) + sqrt(m))^2 / eta` with `L = ln(n_trials / delta)`; the
/// numerator is rounded to three decimals before division, which is how the
/// reference tables were produced.
pub fn required_scenarios(eta: f64, delta: f64, n_trials: usize, allowed_failures: usize) -> Result<u64> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::invalid(format!("eta must lie in (0, 1), got {eta}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    if n_trials == 0 {
        return Err(Error::invalid("n_trials must be at least 1"));
    }
    let l = (n_trials as f64 / delta).ln();
    let m = allowed_failures as f64;
    let numerator_milli = (1000.0 * (l.sqrt() + m.sqrt()).powi(2)).round();
    Ok((numerator_milli / (1000.0 * eta) - 1e-9).ceil() as u64)
}
