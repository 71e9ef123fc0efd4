//! Plan and validate end to end, with the on-disk artifact formats.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conic::{BnbOptions, Residuals, SolveStats};
use crate::error::{Error, Result};
use crate::linalg::{matrix_from_rows, matrix_to_rows};
use crate::planner::{
    self, extract_schedule, FaceMargin, PlannerDecision, PlannerSolution, Schedule,
};
use crate::scenario::BuiltScenario;
use crate::sim::{
    build_report, simulate_nominal, simulate_true, PathEnsemble, SimulationReport,
    ValidationContext,
};

pub const SOLUTION_SCHEMA_VERSION: u32 = 1;

type Rows = Vec<Vec<f64>>;

/// Planner output as written to `solution.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolutionArtifact {
    pub schema_version: u32,
    pub scenario_hash: String,
    pub objective: f64,
    pub rho: f64,
    pub rho_certified: Option<f64>,
    /// `v_k` per step.
    pub feedforward: Rows,
    /// `(m k') × (n + n_w k')` disturbance-feedback gain.
    pub feedback_gain: Rows,
    /// Region index of every assignment column.
    pub regions: Vec<usize>,
    pub planned_means: Rows,
    pub planned_covs: Vec<Rows>,
    pub max_margin: f64,
    pub face_margins: Vec<FaceMargin>,
    pub stats: SolveStats,
    pub residuals: Residuals,
}

impl SolutionArtifact {
    pub fn new(built: &BuiltScenario, sol: &PlannerSolution) -> Self {
        let m = built.dm.m();
        let kp = built.dm.k_prime;
        let d = &sol.decision;
        Self {
            schema_version: SOLUTION_SCHEMA_VERSION,
            scenario_hash: built.hash.clone(),
            objective: sol.objective,
            rho: built.rho.value(),
            rho_certified: built.certified.map(|c| c.rho),
            feedforward: (0..kp)
                .map(|k| d.v.rows(k * m, m).iter().copied().collect())
                .collect(),
            feedback_gain: matrix_to_rows(&d.k_gain),
            regions: (0..kp).map(|k| d.region_of_column(k)).collect(),
            planned_means: sol
                .planned_means
                .iter()
                .map(|v| v.iter().copied().collect())
                .collect(),
            planned_covs: sol.planned_covs.iter().map(matrix_to_rows).collect(),
            max_margin: sol.max_margin(),
            face_margins: sol.face_margins.clone(),
            stats: sol.stats.clone(),
            residuals: sol.residuals,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let a: Self = serde_json::from_str(text)?;
        if a.schema_version != SOLUTION_SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "unsupported solution schema_version {}",
                a.schema_version
            )));
        }
        Ok(a)
    }

    /// Rebuild the decision, checking shapes against the scenario.
    pub fn decision(&self, built: &BuiltScenario) -> Result<PlannerDecision> {
        self.check_hash(built)?;
        let (n, m, n_w, kp) = (built.dm.n(), built.dm.m(), built.dm.n_w(), built.dm.k_prime);
        let n_o = built.safe_set.n_regions();
        let bad =
            |what: &str| Error::invalid(format!("solution {what} does not match the scenario"));
        if self.feedforward.len() != kp || self.feedforward.iter().any(|v| v.len() != m) {
            return Err(bad("feedforward"));
        }
        let k_gain = matrix_from_rows(&self.feedback_gain).ok_or_else(|| bad("feedback_gain"))?;
        if k_gain.shape() != (m * kp, n + n_w * kp) {
            return Err(bad("feedback_gain"));
        }
        if self.regions.len() != kp || self.regions.iter().any(|&j| j >= n_o) {
            return Err(bad("regions"));
        }
        let mut o_assign = DMatrix::zeros(n_o, kp);
        for (k, &j) in self.regions.iter().enumerate() {
            o_assign[(j, k)] = 1.0;
        }
        Ok(PlannerDecision {
            v: DVector::from_iterator(m * kp, self.feedforward.iter().flatten().copied()),
            k_gain,
            o_assign,
        })
    }

    pub fn check_hash(&self, built: &BuiltScenario) -> Result<()> {
        if self.scenario_hash != built.hash {
            return Err(Error::invalid(format!(
                "solution was planned for scenario {} but this scenario hashes to {}",
                self.scenario_hash, built.hash
            )));
        }
        Ok(())
    }

    /// Control schedule; moments are recomputed from the decision, not read back.
    pub fn schedule(&self, built: &BuiltScenario) -> Result<(Schedule, PlannerSolutionView)> {
        let decision = self.decision(built)?;
        let (means, covs) = planner::propagate_moments(
            &built.problem.lifted,
            &decision,
            &built.boundary,
            built.dm.delta_t,
        )?;
        let view = PlannerSolutionView {
            decision,
            means,
            covs,
        };
        let sch = schedule_of(built, &view.decision);
        Ok((sch, view))
    }

    /// Schedule lines for `schedule.csv`: step, time, feedforward inputs.
    pub fn schedule_csv(&self, delta_t: f64) -> String {
        let m = self.feedforward.first().map_or(0, |v| v.len());
        let mut out = String::from("step,t");
        for i in 0..m {
            out.push_str(&format!(",v{i}"));
        }
        out.push('\n');
        for (k, v) in self.feedforward.iter().enumerate() {
            out.push_str(&format!("{k},{}", k as f64 * delta_t));
            for x in v {
                out.push_str(&format!(",{x}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Decision and recomputed planned moments.
#[derive(Debug, Clone)]
pub struct PlannerSolutionView {
    pub decision: PlannerDecision,
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
}

fn schedule_of(built: &BuiltScenario, decision: &PlannerDecision) -> Schedule {
    let sol = PlannerSolution {
        decision: decision.clone(),
        planned_means: Vec::new(),
        planned_covs: Vec::new(),
        objective: f64::NAN,
        face_margins: Vec::new(),
        stats: SolveStats::default(),
        residuals: Residuals::default(),
        big_m_rounds: 0,
    };
    extract_schedule(&sol, &built.dm, &built.boundary.mu0)
}

/// Solve the planning problem of a scenario.
pub fn plan(built: &BuiltScenario) -> Result<(PlannerSolution, SolutionArtifact)> {
    plan_with(built, &built.bnb_options())
}

pub fn plan_with(
    built: &BuiltScenario,
    options: &BnbOptions,
) -> Result<(PlannerSolution, SolutionArtifact)> {
    let sol = planner::solve(&built.problem, options)?;
    let art = SolutionArtifact::new(built, &sol);
    Ok((sol, art))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationSettings {
    pub n_paths: usize,
    pub seed: u64,
    pub l1_enabled: bool,
}

impl SimulationSettings {
    pub fn from_scenario(built: &BuiltScenario) -> Self {
        Self {
            n_paths: built.scenario.monte_carlo.n_paths,
            seed: built.scenario.monte_carlo.seed,
            l1_enabled: true,
        }
    }
}

/// Nominal and true ensembles plus the report comparing them.
pub fn simulate(
    built: &BuiltScenario,
    solution: &SolutionArtifact,
    settings: &SimulationSettings,
) -> Result<(PathEnsemble, PathEnsemble, SimulationReport)> {
    if settings.n_paths == 0 {
        return Err(Error::invalid("the number of paths must be >= 1"));
    }
    let (schedule, view) = solution.schedule(built)?;
    let nominal = simulate_nominal(
        &built.dm,
        &schedule,
        &built.boundary,
        settings.n_paths,
        settings.seed,
    )?;
    let l1 = settings.l1_enabled.then_some(&built.l1);
    let truth = simulate_true(
        &built.model,
        &built.uncertainty,
        &schedule,
        l1,
        built.substeps,
        &built.boundary_true,
        settings.n_paths,
        settings.seed,
    )?;
    let ctx = ValidationContext {
        safe_set: &built.safe_set,
        regions_of_state: (0..=built.dm.k_prime)
            .map(|e| view.decision.regions_of_state(e))
            .collect(),
        face_risks: built.face_risks()?,
        planned_means: &view.means,
        planned_covs: &view.covs,
        mu_t: &built.boundary.mu_t,
        sigma_t: &built.boundary.sigma_t,
        delta_s: built.risk.delta_s,
        rho: built.rho.value(),
        w2_samples: built.scenario.monte_carlo.w2_samples,
        w2_blocks: built.scenario.monte_carlo.w2_blocks,
        l1_enabled: settings.l1_enabled,
        scenario_hash: built.hash.clone(),
    };
    let report = build_report(&nominal, &truth, &ctx)?;
    Ok((nominal, truth, report))
}

/// Per-step summary lines for `steps.csv`.
pub fn steps_csv(report: &SimulationReport) -> String {
    let mut out = String::from(
        "k,t,w2_true_nominal,w2_se,w2_true_planned,violation_true,violation_true_upper,violation_nominal,violation_nominal_upper\n",
    );
    for s in &report.steps {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            s.k,
            s.t,
            s.w2_true_nominal,
            s.w2_true_nominal_se,
            s.w2_true_planned,
            s.violation_true.rate,
            s.violation_true.upper,
            s.violation_nominal.rate,
            s.violation_nominal.upper
        ));
    }
    out
}

/// Slack on the terminal covariance: `Σ̂ ⪯ Σ_T + COV_SLACK·I`.
pub const COV_SLACK: f64 = 0.05;
/// Standard errors allowed on the terminal mean.
pub const MEAN_SE_FACTOR: f64 = 3.0;

/// One named check on a report with its verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Safety, ambiguity and boundary-moment checks, all recomputed from the
/// per-step numbers of the report.
pub fn predicates(report: &SimulationReport) -> Vec<Predicate> {
    let mut out = Vec::new();
    let worst_rate = report
        .steps
        .iter()
        .max_by(|a, b| a.violation_true.upper.total_cmp(&b.violation_true.upper))
        .expect("validated report has steps");
    out.push(Predicate {
        name: "violation_upper_ci <= delta_s".into(),
        pass: report
            .steps
            .iter()
            .all(|s| s.violation_true.upper <= report.delta_s),
        detail: format!(
            "worst upper bound {:.4} at k={} (rate {:.4}), delta_s {}",
            worst_rate.violation_true.upper,
            worst_rate.k,
            worst_rate.violation_true.rate,
            report.delta_s
        ),
    });
    let worst_w2 = report
        .steps
        .iter()
        .max_by(|a, b| a.w2_true_nominal.total_cmp(&b.w2_true_nominal))
        .expect("validated report has steps");
    out.push(Predicate {
        name: "w2(true, nominal) <= rho".into(),
        pass: report.steps.iter().all(|s| s.w2_true_nominal <= report.rho),
        detail: format!(
            "max {:.4} ± {:.4} at k={}, rho {}",
            worst_w2.w2_true_nominal, worst_w2.w2_true_nominal_se, worst_w2.k, report.rho
        ),
    });
    let t = &report.terminal_nominal;
    out.push(Predicate {
        name: "terminal mean within 3 SE".into(),
        pass: t.mean_error <= MEAN_SE_FACTOR * t.mean_se,
        detail: format!("|mean - mu_T| = {:.3e}, SE {:.3e}", t.mean_error, t.mean_se),
    });
    out.push(Predicate {
        name: "terminal cov <= Sigma_T + 0.05 I".into(),
        pass: t.cov_excess <= COV_SLACK,
        detail: format!("max eig(cov - Sigma_T) = {:.4}", t.cov_excess),
    });
    out
}

/// Wall-clock timings and verdicts of one simulate run, written apart from
/// the deterministic report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario_hash: String,
    pub objective: f64,
    pub max_margin: f64,
    pub l1_enabled: bool,
    pub max_w2: f64,
    pub predicates: Vec<Predicate>,
    pub timings_s: Timings,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub simulate: f64,
    pub total: f64,
}

impl RunReport {
    pub fn new(solution: &SolutionArtifact, report: &SimulationReport, timings: Timings) -> Self {
        Self {
            scenario_hash: report.scenario_hash.clone(),
            objective: solution.objective,
            max_margin: solution.max_margin,
            l1_enabled: report.l1_enabled,
            max_w2: report.max_w2().0,
            predicates: predicates(report),
            timings_s: timings,
        }
    }
}
