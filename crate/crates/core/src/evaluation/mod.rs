//! Out-of-sample evaluation, baselines and the k sweep.

mod svg;

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use log::{info, warn};
use nalgebra::DVector;
use rayon::prelude::*;
use thiserror::Error;

use crate::ac_model::{
    fixed_point_solve, respond, solve_deterministic_ac, AcControls, AcError, AcNetwork, AcRows, AcState,
    FixedPointOptions,
};
use crate::ambiguity::{optimal_epsilon, AmbiguityError, AmbiguityParams};
use crate::case_io::{NetworkCase, VreFleet};
use crate::dc_model::{
    assemble_cc_system, build_ptdf, dispatch_cost, solve_deterministic_dc, CcOptions, CcSystem, DcError, PtdfMatrix,
};
use crate::scenario_mip::{
    build_selection_from_ccopf, solve_selection, QuadCost, SelectionError, SelectionOptions, SelectionSolution,
    SelectionStats, SelectionStatus,
};
use crate::scenarios::{fmt_f64, ScenarioSet};

pub use svg::sweep_svg;

/// A row counts as violated when it exceeds its bound by more than this.
pub const VIOLATION_TOL: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error(transparent)]
    Dc(#[from] DcError),
    #[error(transparent)]
    Ac(#[from] AcError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Ambiguity(#[from] AmbiguityError),
    /// `scenarios` lists the ones infeasible on their own, or all of them
    /// when only the combination conflicts.
    #[error("{}", ro_infeasible_message(*count, scenarios))]
    RoInfeasible { count: usize, scenarios: Vec<usize> },
    #[error("{0}")]
    Invalid(String),
}

fn ro_infeasible_message(count: usize, scenarios: &[usize]) -> String {
    if scenarios.len() == count {
        format!("no dispatch enforces all {count} scenarios; each is feasible alone, so the conflict is joint")
    } else {
        format!("no dispatch enforces all {count} scenarios; scenarios {scenarios:?} are infeasible on their own")
    }
}

/// Operating point produced by a solve.
#[derive(Debug, Clone, PartialEq)]
pub enum Dispatch {
    /// Generator setpoints.
    Dc(DVector<f64>),
    Ac(Box<AcState>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solved {
    pub dispatch: Dispatch,
    pub cost: f64,
    /// Absent for the deterministic dispatch.
    pub selection: Option<SelectionSolution>,
    pub wall_time: Duration,
    pub outer_iterations: Option<usize>,
}

impl Solved {
    pub fn status(&self) -> SelectionStatus {
        self.selection.as_ref().map_or(SelectionStatus::Optimal, |s| s.status)
    }
}

/// Violation counts over a test set.
#[derive(Debug, Clone, PartialEq)]
pub struct ViolationCounts {
    pub samples: usize,
    pub joint: usize,
    pub per_row: Vec<usize>,
    /// Scenarios whose power flow failed; counted as joint violations.
    pub failures: usize,
}

impl ViolationCounts {
    pub fn joint_rate(&self) -> f64 {
        self.joint as f64 / self.samples.max(1) as f64
    }

    pub fn per_row_rates(&self) -> Vec<f64> {
        self.per_row.iter().map(|&c| c as f64 / self.samples.max(1) as f64).collect()
    }
}

fn tally(rows: usize, outcomes: Vec<Option<Vec<usize>>>) -> ViolationCounts {
    let mut per_row = vec![0; rows];
    let (mut joint, mut failures) = (0, 0);
    for o in &outcomes {
        match o {
            None => {
                joint += 1;
                failures += 1;
            }
            Some(v) => {
                if !v.is_empty() {
                    joint += 1;
                }
                for &r in v {
                    per_row[r] += 1;
                }
            }
        }
    }
    ViolationCounts { samples: outcomes.len(), joint, per_row, failures }
}

fn violated(excess: &DVector<f64>) -> Vec<usize> {
    (0..excess.len()).filter(|&r| excess[r] > VIOLATION_TOL).collect()
}

/// DC rows are affine in the error, so each scenario is checked exactly.
pub fn dc_violations(cc: &CcSystem, x: &DVector<f64>, test: &ScenarioSet) -> ViolationCounts {
    let base = cc.base(x) - &cc.rhs;
    let outcomes = (0..test.len())
        .into_par_iter()
        .map(|j| Some(violated(&(&base + &cc.sens * test.scenario(j)))))
        .collect();
    tally(cc.n_rows(), outcomes)
}

/// Each scenario is re-solved with the full power flow.
pub fn ac_violations(
    net: &AcNetwork,
    state: &AcState,
    fleet: &VreFleet,
    rows: &AcRows,
    test: &ScenarioSet,
    opts: &FixedPointOptions,
) -> ViolationCounts {
    let outcomes = (0..test.len())
        .into_par_iter()
        .map(|j| respond(net, state, fleet, &test.scenario(j), &opts.pf).ok().map(|s| violated(&rows.excess(&s))))
        .collect();
    tally(rows.len(), outcomes)
}

/// A chance-constrained dispatch study on one network and fleet.
#[derive(Debug, Clone)]
pub enum Study {
    Dc(DcStudy),
    Ac(AcStudy),
}

#[derive(Debug, Clone)]
pub struct DcStudy {
    pub case: NetworkCase,
    pub fleet: VreFleet,
    pub ptdf: PtdfMatrix,
    pub cc: CcSystem,
    pub cost: QuadCost,
    pub selection: SelectionOptions,
}

impl DcStudy {
    pub fn new(case: NetworkCase, fleet: VreFleet, selection: SelectionOptions) -> Result<Self, EvalError> {
        let ptdf = build_ptdf(&case)?;
        let cc = assemble_cc_system(&case, &fleet, &ptdf, CcOptions::default());
        let cost = dispatch_cost(&case);
        Ok(Self { case, fleet, ptdf, cc, cost, selection })
    }
}

#[derive(Debug, Clone)]
pub struct AcStudy {
    pub net: AcNetwork,
    pub fleet: VreFleet,
    pub rows: AcRows,
    pub start: AcControls,
    pub options: FixedPointOptions,
}

impl AcStudy {
    pub fn new(case: &NetworkCase, fleet: VreFleet, options: FixedPointOptions) -> Result<Self, EvalError> {
        let net = AcNetwork::new(case)?;
        let rows = AcRows::new(&net, options.cc);
        let start = AcControls::from_case(&net);
        Ok(Self { net, fleet, rows, start, options })
    }
}

impl Study {
    pub fn fleet(&self) -> &VreFleet {
        match self {
            Study::Dc(s) => &s.fleet,
            Study::Ac(s) => &s.fleet,
        }
    }

    pub fn row_names(&self) -> &[String] {
        match self {
            Study::Dc(s) => &s.cc.names,
            Study::Ac(s) => &s.rows.names,
        }
    }

    pub fn model_name(&self) -> &'static str {
        match self {
            Study::Dc(_) => "dc",
            Study::Ac(_) => "ac",
        }
    }

    /// Cheapest dispatch that meets every limit with zero forecast error.
    pub fn deterministic(&self) -> Result<Solved, EvalError> {
        let start = Instant::now();
        match self {
            Study::Dc(s) => {
                let d = solve_deterministic_dc(&s.case, &s.fleet, &s.ptdf)?;
                Ok(Solved {
                    cost: d.cost,
                    dispatch: Dispatch::Dc(d.p_gen),
                    selection: None,
                    wall_time: start.elapsed(),
                    outer_iterations: None,
                })
            }
            Study::Ac(s) => {
                let d = solve_deterministic_ac(&s.net, &s.fleet, &s.start, &s.options)?;
                Ok(Solved {
                    cost: d.selection.objective,
                    dispatch: Dispatch::Ac(Box::new(d.state)),
                    selection: None,
                    wall_time: start.elapsed(),
                    outer_iterations: None,
                })
            }
        }
    }

    /// Cheapest dispatch meeting every limit in at least `k` training scenarios.
    pub fn solve(&self, train: &ScenarioSet, k: usize) -> Result<Solved, EvalError> {
        let start = Instant::now();
        match self {
            Study::Dc(s) => {
                let problem = build_selection_from_ccopf(&s.cc, train, s.cost.clone(), k)?;
                let sol = solve_selection(&problem, &s.selection)?;
                Ok(Solved {
                    cost: sol.objective,
                    dispatch: Dispatch::Dc(sol.x.clone()),
                    selection: Some(sol),
                    wall_time: start.elapsed(),
                    outer_iterations: None,
                })
            }
            Study::Ac(s) => {
                let params = AmbiguityParams::from_k(k, train.len())?;
                let fp = fixed_point_solve(&s.net, &s.fleet, train, &params, &s.start, &s.options)?;
                Ok(Solved {
                    cost: fp.selection.objective,
                    dispatch: Dispatch::Ac(Box::new(fp.state)),
                    selection: Some(fp.selection),
                    wall_time: start.elapsed(),
                    outer_iterations: Some(fp.iterations),
                })
            }
        }
    }

    pub fn violation_frequency(&self, dispatch: &Dispatch, test: &ScenarioSet) -> Result<ViolationCounts, EvalError> {
        match (self, dispatch) {
            (Study::Dc(s), Dispatch::Dc(x)) => Ok(dc_violations(&s.cc, x, test)),
            (Study::Ac(s), Dispatch::Ac(state)) => {
                Ok(ac_violations(&s.net, state, &s.fleet, &s.rows, test, &s.options))
            }
            _ => Err(EvalError::Invalid(format!("dispatch does not belong to a {} study", self.model_name()))),
        }
    }
}

/// Robust baseline: every scenario of `set` enforced.
pub fn ro_baseline(study: &Study, set: &ScenarioSet) -> Result<Solved, EvalError> {
    // An AC dispatch that stalls with positive elastic violation counts as
    // infeasible here, as does a proven-infeasible DC selection.
    let solved = match study.solve(set, set.len()) {
        Err(EvalError::Ac(AcError::Infeasible(sigma))) => {
            warn!("robust AC dispatch stalls with violation {sigma:.3e} p.u.");
            None
        }
        other => Some(other?),
    };
    if let Some(solved) = solved.filter(|s| s.status() != SelectionStatus::Infeasible) {
        return Ok(solved);
    }
    // Name the scenarios that are infeasible on their own; if none is, the
    // conflict is joint and the whole set is reported.
    let mut alone = Vec::new();
    for j in 0..set.len() {
        let single = ScenarioSet::new(set.labels.clone(), set.xi.rows(j, 1).into_owned())
            .map_err(|e| EvalError::Invalid(e.to_string()))?;
        let infeasible = study.solve(&single, 1).map_or(true, |s| s.status() == SelectionStatus::Infeasible);
        if infeasible {
            alone.push(j);
        }
    }
    if alone.is_empty() {
        alone = (0..set.len()).collect();
    }
    Err(EvalError::RoInfeasible { count: set.len(), scenarios: alone })
}

/// Summary of one evaluated dispatch.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub model: String,
    pub k: Option<usize>,
    pub samples: usize,
    pub joint_violation_rate: f64,
    pub row_names: Vec<String>,
    pub per_row_rates: Vec<f64>,
    pub newton_failures: usize,
    pub cost: f64,
    pub cost_vs_ro: Option<f64>,
    pub status: String,
    pub stats: Option<SelectionStats>,
}

impl EvalReport {
    pub fn new(study: &Study, solved: &Solved, counts: &ViolationCounts, k: Option<usize>, ro_cost: Option<f64>) -> Self {
        Self {
            model: study.model_name().into(),
            k,
            samples: counts.samples,
            joint_violation_rate: counts.joint_rate(),
            row_names: study.row_names().to_vec(),
            per_row_rates: counts.per_row_rates(),
            newton_failures: counts.failures,
            cost: solved.cost,
            cost_vs_ro: ro_cost.map(|r| solved.cost / r),
            status: solved.status().as_str().into(),
            stats: solved.selection.as_ref().map(|s| s.stats.clone()),
        }
    }

    /// `key,value` summary followed by `row,rate` lines; wall time is omitted
    /// so the text is reproducible.
    pub fn to_csv(&self, digest_line: &str) -> String {
        let mut out = format!("{digest_line}\nkey,value\n");
        let opt = |v: Option<f64>| v.map_or_else(String::new, fmt_f64);
        let _ = writeln!(out, "model,{}", self.model);
        let _ = writeln!(out, "k,{}", self.k.map_or_else(String::new, |k| k.to_string()));
        let _ = writeln!(out, "status,{}", self.status);
        let _ = writeln!(out, "cost,{}", fmt_f64(self.cost));
        let _ = writeln!(out, "cost_vs_ro,{}", opt(self.cost_vs_ro));
        let _ = writeln!(out, "samples,{}", self.samples);
        let _ = writeln!(out, "joint_violation,{}", fmt_f64(self.joint_violation_rate));
        let _ = writeln!(out, "newton_failures,{}", self.newton_failures);
        if let Some(s) = &self.stats {
            let _ = writeln!(out, "nodes,{}", s.nodes);
            let _ = writeln!(out, "qp_solves,{}", s.qp_solves);
        }
        out.push_str("\nrow,violation_rate\n");
        for (name, rate) in self.row_names.iter().zip(&self.per_row_rates) {
            let _ = writeln!(out, "{name},{}", fmt_f64(*rate));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub k: usize,
    pub epsilon_star: f64,
    pub bound: f64,
    pub cost: f64,
    pub cost_vs_ro: f64,
    pub joint_violation: f64,
    pub time_s: f64,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub ro_cost: f64,
    pub deterministic_cost: f64,
}

impl SweepTable {
    /// CSV with columns `k,epsilon_star,bound,cost,cost_vs_ro,joint_violation,time_s,status`.
    /// Without timing the `time_s` cells are left empty so reruns compare equal.
    pub fn to_csv(&self, digest_line: &str, timing: bool) -> String {
        let mut out = format!("{digest_line}\nk,epsilon_star,bound,cost,cost_vs_ro,joint_violation,time_s,status\n");
        for r in &self.rows {
            let time = if timing { format!("{:.6}", r.time_s) } else { String::new() };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.k,
                fmt_f64(r.epsilon_star),
                fmt_f64(r.bound),
                fmt_f64(r.cost),
                fmt_f64(r.cost_vs_ro),
                fmt_f64(r.joint_violation),
                time,
                r.status
            );
        }
        out
    }
}

/// Solve and evaluate for every `k`; a failing `k` is recorded and skipped.
///
/// Rows come out in ascending `ε*`, that is descending `k`.
pub fn sweep_k(
    study: &Study,
    train: &ScenarioSet,
    test: &ScenarioSet,
    k_values: &[usize],
    ro: &Solved,
    deterministic_cost: f64,
) -> Result<SweepTable, EvalError> {
    if k_values.is_empty() {
        return Err(EvalError::Invalid("empty k list".into()));
    }
    let s = train.len();
    if let Some(&k) = k_values.iter().find(|&&k| k == 0 || k > s) {
        return Err(EvalError::Invalid(format!("k = {k} outside 1..={s}")));
    }
    let mut ks = k_values.to_vec();
    ks.sort_unstable_by(|a, b| b.cmp(a));
    ks.dedup();
    let mut rows = Vec::with_capacity(ks.len());
    for k in ks {
        let opt = optimal_epsilon(k, s)?;
        let mut row = SweepRow {
            k,
            epsilon_star: opt.epsilon,
            bound: opt.bound,
            cost: f64::NAN,
            cost_vs_ro: f64::NAN,
            joint_violation: f64::NAN,
            time_s: 0.0,
            status: String::new(),
        };
        match study.solve(train, k) {
            Ok(solved) => {
                row.time_s = solved.wall_time.as_secs_f64();
                row.status = solved.status().as_str().into();
                if solved.status() != SelectionStatus::Infeasible {
                    row.cost = solved.cost;
                    row.cost_vs_ro = solved.cost / ro.cost;
                    row.joint_violation = study.violation_frequency(&solved.dispatch, test)?.joint_rate();
                }
            }
            Err(e) => {
                warn!("k = {k}: {e}");
                row.status = "ERROR".into();
            }
        }
        info!(
            "k = {k}: eps* {:.4}, cost {:.4}, violation {:.4}, {:.3} s",
            row.epsilon_star, row.cost, row.joint_violation, row.time_s
        );
        rows.push(row);
    }
    Ok(SweepTable { rows, ro_cost: ro.cost, deterministic_cost })
}
