//! Exact k-of-S scenario selection.
//!
//! ```text
//! minimize    ½ xᵀHx + gᵀx + c₀
//! subject to  A₀x ≤ b₀,  E₀x = f₀
//!             Aⱼx ≤ bⱼ   for at least k scenarios j
//! ```
//!
//! Solved by branch-and-bound over which scenarios are enforced or relaxed.
//! A node fixes an Enforced set `E` and a Relaxed set `R`; its bound is the
//! QP over the base constraints and every block in `E`. The relaxation
//! budget is `S − k`, so once `|R|` reaches it every undecided scenario is
//! enforced.
//!
//! When all blocks share the same left-hand side (the chance-constrained OPF
//! case) a node's constraints collapse to one row per quantity with the
//! tightest enforced right-hand side. The node bound is then strengthened:
//! with `q = S − k − |R|` relaxations left, any completion enforces all but
//! at most `q` undecided scenarios, so row `i` is at least as tight as the
//! `(q+1)`-th smallest undecided right-hand side.

pub mod qp;

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::{Duration, Instant};

use log::debug;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dc_model::CcSystem;
use crate::scenarios::ScenarioSet;
pub use qp::{qp_solve, LinearSystem, QpError, QpOptions, QpResult, QpStatus, QuadCost};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectionError {
    #[error("invalid selection problem: {0}")]
    Invalid(String),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("search stopped by a limit before any feasible selection was found")]
    NoIncumbent,
}

/// One scenario's constraints `a·x ≤ b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioBlocks {
    /// Every scenario uses `lhs·x ≤ rhs[j]`.
    Shared { lhs: DMatrix<f64>, rhs: Vec<DVector<f64>> },
    Individual(Vec<Block>),
}

impl ScenarioBlocks {
    pub fn len(&self) -> usize {
        match self {
            Self::Shared { rhs, .. } => rhs.len(),
            Self::Individual(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Largest `aᵢx − bᵢ` over the rows of block `j` (`−∞` if it has none).
    pub fn violation(&self, j: usize, x: &DVector<f64>) -> f64 {
        let (a, b) = match self {
            Self::Shared { lhs, rhs } => (lhs, &rhs[j]),
            Self::Individual(blocks) => (&blocks[j].a, &blocks[j].b),
        };
        if a.nrows() == 0 {
            return f64::NEG_INFINITY;
        }
        (a * x - b).max()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionProblem {
    pub cost: QuadCost,
    pub base: LinearSystem,
    pub blocks: ScenarioBlocks,
    pub k: usize,
}

impl SelectionProblem {
    pub fn new(cost: QuadCost, base: LinearSystem, blocks: ScenarioBlocks, k: usize) -> Result<Self, SelectionError> {
        let n = cost.dim();
        let s = blocks.len();
        if s == 0 {
            return Err(SelectionError::Invalid("no scenarios".into()));
        }
        if k == 0 || k > s {
            return Err(SelectionError::Invalid(format!("k = {k} outside 1..={s}")));
        }
        if base.dim() != n || base.e.ncols() != n {
            return Err(SelectionError::Invalid("base constraints do not match the cost dimension".into()));
        }
        let sym = (&cost.h - cost.h.transpose()).amax();
        if sym > 1e-12 * cost.h.amax().max(1.0) {
            return Err(SelectionError::Invalid("H is not symmetric".into()));
        }
        match &blocks {
            ScenarioBlocks::Shared { lhs, rhs } => {
                if lhs.ncols() != n || rhs.iter().any(|r| r.len() != lhs.nrows()) {
                    return Err(SelectionError::Invalid("shared block dimensions are inconsistent".into()));
                }
            }
            ScenarioBlocks::Individual(bl) => {
                if bl.iter().any(|b| b.a.ncols() != n || b.b.len() != b.a.nrows()) {
                    return Err(SelectionError::Invalid("block dimensions are inconsistent".into()));
                }
            }
        }
        Ok(Self { cost, base, blocks, k })
    }

    pub fn n_scenarios(&self) -> usize {
        self.blocks.len()
    }

    pub fn budget(&self) -> usize {
        self.n_scenarios() - self.k
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOptions {
    pub node_limit: usize,
    pub time_limit: Option<Duration>,
    /// Stop once `(incumbent − bound) ≤ rel_gap·|incumbent|`.
    pub rel_gap: f64,
    /// A block is satisfied when its violation is at most this.
    pub feas_tol: f64,
    /// Use the order-statistic bound for shared blocks.
    pub quantile_bound: bool,
    /// Seed the search with [`greedy_incumbent`].
    pub greedy_start: bool,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        Self {
            node_limit: 1_000_000,
            time_limit: None,
            rel_gap: 0.0,
            feas_tol: 1e-7,
            quantile_bound: true,
            greedy_start: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionStatus {
    Optimal,
    Infeasible,
    GapLimit,
}

impl SelectionStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Optimal => "OPTIMAL",
            Self::Infeasible => "INFEASIBLE",
            Self::GapLimit => "GAP_LIMIT",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SelectionStats {
    pub nodes: usize,
    pub qp_solves: usize,
    pub wall_time: Duration,
    /// Relative gap between incumbent and best open bound at exit.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionSolution {
    pub x: DVector<f64>,
    /// `z[j]` is true when scenario `j` is relaxed.
    pub z: Vec<bool>,
    pub objective: f64,
    pub enforced: Vec<usize>,
    pub status: SelectionStatus,
    pub stats: SelectionStats,
}

impl SelectionSolution {
    pub fn relaxed(&self) -> Vec<usize> {
        (0..self.z.len()).filter(|&j| self.z[j]).collect()
    }

    fn infeasible(problem: &SelectionProblem, stats: SelectionStats) -> Self {
        Self {
            x: DVector::zeros(problem.cost.dim()),
            z: vec![false; problem.n_scenarios()],
            objective: f64::INFINITY,
            enforced: Vec::new(),
            status: SelectionStatus::Infeasible,
            stats,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Fix {
    Undecided,
    Enforced,
    Relaxed,
}

#[derive(Clone)]
struct Node {
    fix: Vec<Fix>,
    n_relaxed: usize,
    n_enforced: usize,
    bound: f64,
    warm: Option<DVector<f64>>,
    id: usize,
}

/// Heap order: smallest bound first, then oldest node.
struct Queued(Node);

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.bound.total_cmp(&self.0.bound).then(other.0.id.cmp(&self.0.id))
    }
}

/// Node QP constraints; the second value maps each shared row to the scenario
/// that sets its right-hand side (`None` for base rows and quantile rows).
#[allow(clippy::needless_range_loop)] // `i` indexes rows of `lhs` and of every `brhs[j]`.
fn node_system(
    problem: &SelectionProblem,
    fix: &[Fix],
    n_relaxed: usize,
    quantile: bool,
) -> (LinearSystem, Vec<Option<usize>>) {
    let base = &problem.base;
    let n = problem.cost.dim();
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    let mut owner: Vec<Option<usize>> = Vec::new();
    match &problem.blocks {
        ScenarioBlocks::Shared { lhs, rhs: brhs } => {
            let remaining = problem.budget() - n_relaxed;
            let undecided: Vec<usize> = (0..fix.len()).filter(|&j| fix[j] == Fix::Undecided).collect();
            let mut scratch: Vec<f64> = Vec::with_capacity(undecided.len());
            for i in 0..lhs.nrows() {
                let mut best = f64::INFINITY;
                let mut who = None;
                for (j, f) in fix.iter().enumerate() {
                    if *f == Fix::Enforced && brhs[j][i] < best {
                        best = brhs[j][i];
                        who = Some(j);
                    }
                }
                if quantile && remaining < undecided.len() {
                    scratch.clear();
                    scratch.extend(undecided.iter().map(|&j| brhs[j][i]));
                    let (_, q, _) = scratch.select_nth_unstable_by(remaining, f64::total_cmp);
                    if *q < best {
                        best = *q;
                        who = None;
                    }
                }
                if best < f64::INFINITY {
                    rows.push(lhs.row(i).transpose());
                    rhs.push(best);
                    owner.push(who);
                }
            }
        }
        ScenarioBlocks::Individual(blocks) => {
            for (j, f) in fix.iter().enumerate() {
                if *f == Fix::Enforced {
                    for i in 0..blocks[j].a.nrows() {
                        rows.push(blocks[j].a.row(i).transpose());
                        rhs.push(blocks[j].b[i]);
                        owner.push(Some(j));
                    }
                }
            }
        }
    }
    let m0 = base.a.nrows();
    let mut a = DMatrix::zeros(m0 + rows.len(), n);
    a.view_mut((0, 0), (m0, n)).copy_from(&base.a);
    let mut b = DVector::zeros(m0 + rows.len());
    b.rows_mut(0, m0).copy_from(&base.b);
    for (r, row) in rows.iter().enumerate() {
        a.set_row(m0 + r, &row.transpose());
        b[m0 + r] = rhs[r];
    }
    let mut full_owner = vec![None; m0];
    full_owner.extend(owner);
    (LinearSystem::new(a, b, base.e.clone(), base.f.clone()), full_owner)
}

fn solve_node(
    problem: &SelectionProblem,
    fix: &[Fix],
    n_relaxed: usize,
    quantile: bool,
    warm: Option<&DVector<f64>>,
) -> Result<(QpResult, Vec<Option<usize>>), QpError> {
    let (sys, owner) = node_system(problem, fix, n_relaxed, quantile);
    let opts = QpOptions { warm_start: warm.cloned(), ..QpOptions::default() };
    Ok((qp_solve(&problem.cost, &sys, &opts)?, owner))
}

fn finish(
    problem: &SelectionProblem,
    x: DVector<f64>,
    objective: f64,
    status: SelectionStatus,
    stats: SelectionStats,
    tol: f64,
) -> SelectionSolution {
    let s = problem.n_scenarios();
    let z: Vec<bool> = (0..s).map(|j| problem.blocks.violation(j, &x) > tol).collect();
    let enforced = (0..s).filter(|&j| !z[j]).collect();
    SelectionSolution { x, z, objective, enforced, status, stats }
}

/// Dispatch, relaxation flags and objective of a feasible point.
pub type Incumbent = (DVector<f64>, Vec<bool>, f64);

/// Incumbent by repeatedly relaxing the scenario carrying the most dual weight.
///
/// Returns `None` when the all-enforced problem has no solution.
pub fn greedy_incumbent(problem: &SelectionProblem) -> Result<Option<Incumbent>, QpError> {
    let s = problem.n_scenarios();
    let mut fix = vec![Fix::Enforced; s];
    let (first, owner) = solve_node(problem, &fix, 0, false, None)?;
    if first.status != QpStatus::Optimal {
        return Ok(None);
    }
    let mut best = (first.x.clone(), first.value);
    let mut last = (first, owner);
    for round in 0..problem.budget() {
        let mut weight = vec![0.0; s];
        for (r, who) in last.1.iter().enumerate() {
            if let Some(j) = who {
                weight[*j] += last.0.duals[r];
            }
        }
        let pick = (0..s)
            .filter(|&j| fix[j] == Fix::Enforced)
            .max_by(|&a, &b| weight[a].total_cmp(&weight[b]).then(b.cmp(&a)));
        let Some(j) = pick else { break };
        if weight[j] <= 0.0 {
            break;
        }
        fix[j] = Fix::Relaxed;
        match solve_node(problem, &fix, round + 1, false, Some(&best.0)) {
            Ok((res, owner)) if res.status == QpStatus::Optimal => {
                if res.value <= best.1 {
                    best = (res.x.clone(), res.value);
                }
                last = (res, owner);
            }
            _ => break,
        }
    }
    let z = (0..s).map(|j| problem.blocks.violation(j, &best.0) > 1e-7).collect();
    Ok(Some((best.0, z, best.1)))
}

/// Globally optimal k-of-S selection.
pub fn solve_selection(problem: &SelectionProblem, opts: &SelectionOptions) -> Result<SelectionSolution, SelectionError> {
    let start = Instant::now();
    let s = problem.n_scenarios();
    let budget = problem.budget();
    let quantile = opts.quantile_bound && matches!(problem.blocks, ScenarioBlocks::Shared { .. });
    let mut stats = SelectionStats::default();

    let base_check = qp_solve(&problem.cost, &problem.base, &QpOptions::default())?;
    stats.qp_solves += 1;
    if base_check.status == QpStatus::Infeasible {
        stats.wall_time = start.elapsed();
        return Ok(SelectionSolution::infeasible(problem, stats));
    }

    let mut incumbent: Option<(DVector<f64>, f64)> = None;
    if opts.greedy_start {
        if let Some((x, _, v)) = greedy_incumbent(problem)? {
            stats.qp_solves += budget + 1;
            incumbent = Some((x, v));
        }
    }

    let gap_of = |inc: f64, bound: f64| (inc - bound).max(0.0) / inc.abs().max(1.0);
    let prunes = |bound: f64, inc: &Option<(DVector<f64>, f64)>| match inc {
        None => false,
        Some((_, v)) => bound >= v - (1e-9 * v.abs().max(1.0)).max(opts.rel_gap * v.abs()),
    };

    let mut root_fix = vec![Fix::Undecided; s];
    let mut root_enf = 0;
    if budget == 0 {
        root_fix.fill(Fix::Enforced);
        root_enf = s;
    }
    let mut next_id = 1;
    let root = Node { fix: root_fix, n_relaxed: 0, n_enforced: root_enf, bound: f64::NEG_INFINITY, warm: Some(base_check.x), id: 0 };
    let mut stack: Vec<Node> = vec![root];
    let mut heap: BinaryHeap<Queued> = BinaryHeap::new();
    let mut hit_limit = false;

    loop {
        let node = if incumbent.is_none() {
            match stack.pop() {
                Some(n) => n,
                None => break,
            }
        } else {
            heap.extend(stack.drain(..).map(Queued));
            match heap.pop() {
                Some(Queued(n)) => n,
                None => break,
            }
        };
        if prunes(node.bound, &incumbent) {
            continue;
        }
        if stats.nodes >= opts.node_limit || opts.time_limit.is_some_and(|t| start.elapsed() >= t) {
            hit_limit = true;
            heap.push(Queued(node));
            break;
        }
        stats.nodes += 1;
        let (res, _) = solve_node(problem, &node.fix, node.n_relaxed, quantile, node.warm.as_ref())?;
        stats.qp_solves += 1;
        if res.status == QpStatus::Infeasible {
            continue;
        }
        let bound = res.value.max(node.bound);
        if prunes(bound, &incumbent) {
            continue;
        }

        let mut satisfied = 0;
        let mut branch: Option<(usize, f64)> = None;
        for j in 0..s {
            if node.fix[j] != Fix::Undecided {
                continue;
            }
            let v = problem.blocks.violation(j, &res.x);
            if v <= opts.feas_tol {
                satisfied += 1;
            } else if branch.is_none_or(|(_, best)| v > best) {
                branch = Some((j, v));
            }
        }
        if node.n_enforced + satisfied >= problem.k {
            if incumbent.as_ref().is_none_or(|(_, v)| res.value < *v) {
                debug!("incumbent {:.10} at node {}", res.value, stats.nodes);
                incumbent = Some((res.x.clone(), res.value));
            }
            continue;
        }
        let Some((j, _)) = branch else { continue };

        let mut enforce = node.fix.clone();
        enforce[j] = Fix::Enforced;
        let enforce_child = Node {
            fix: enforce,
            n_relaxed: node.n_relaxed,
            n_enforced: node.n_enforced + 1,
            bound,
            warm: Some(res.x.clone()),
            id: next_id,
        };
        next_id += 1;
        let mut children = vec![enforce_child];
        if node.n_relaxed < budget {
            let mut relax = node.fix.clone();
            relax[j] = Fix::Relaxed;
            let mut n_enf = node.n_enforced;
            if node.n_relaxed + 1 == budget {
                for f in relax.iter_mut().filter(|f| **f == Fix::Undecided) {
                    *f = Fix::Enforced;
                    n_enf += 1;
                }
            }
            children.push(Node {
                fix: relax,
                n_relaxed: node.n_relaxed + 1,
                n_enforced: n_enf,
                bound,
                warm: Some(res.x),
                id: next_id,
            });
            next_id += 1;
        }
        if incumbent.is_none() {
            // Plunge: the relax child is popped first.
            stack.extend(children);
        } else {
            heap.extend(children.into_iter().map(Queued));
        }
    }

    stats.wall_time = start.elapsed();
    let Some((x, value)) = incumbent else {
        if hit_limit {
            return Err(SelectionError::NoIncumbent);
        }
        return Ok(SelectionSolution::infeasible(problem, stats));
    };
    let open_bound = heap.iter().map(|q| q.0.bound).chain(stack.iter().map(|n| n.bound)).fold(f64::INFINITY, f64::min);
    let status = if hit_limit && !prunes(open_bound, &Some((x.clone(), value))) {
        stats.gap = gap_of(value, open_bound.max(f64::MIN));
        SelectionStatus::GapLimit
    } else {
        SelectionStatus::Optimal
    };
    Ok(finish(problem, x, value, status, stats, opts.feas_tol))
}

/// Scenario-selection instance for a chance-constrained dispatch problem.
///
/// Block `j` is `base_lin·x ≤ rhs − base_const − sens·ξʲ` over the rows with a
/// finite bound; the deterministic system is always enforced.
pub fn build_selection_from_ccopf(
    cc: &CcSystem,
    scenarios: &ScenarioSet,
    cost: QuadCost,
    k: usize,
) -> Result<SelectionProblem, SelectionError> {
    if scenarios.dim() != cc.sens.ncols() {
        return Err(SelectionError::Invalid(format!(
            "scenarios have {} components, the system expects {}",
            scenarios.dim(),
            cc.sens.ncols()
        )));
    }
    let rows = cc.finite_rows();
    let lhs = cc.base_lin.select_rows(rows.iter());
    let offset = DVector::from_iterator(rows.len(), rows.iter().map(|&i| cc.rhs[i] - cc.base_const[i]));
    let sens = cc.sens.select_rows(rows.iter());
    let rhs = (0..scenarios.len())
        .map(|j| &offset - &sens * scenarios.scenario(j))
        .collect();
    SelectionProblem::new(cost, cc.deterministic.clone(), ScenarioBlocks::Shared { lhs, rhs }, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    /// min x  s.t. x ≥ aⱼ for at least k of the aⱼ.
    fn toy(a: &[f64], k: usize) -> SelectionProblem {
        let blocks = a
            .iter()
            .map(|&aj| Block { a: DMatrix::from_element(1, 1, -1.0), b: dv(&[-aj]) })
            .collect();
        let base = LinearSystem::inequalities(DMatrix::from_element(1, 1, -1.0), dv(&[100.0]));
        SelectionProblem::new(QuadCost::linear(dv(&[1.0])), base, ScenarioBlocks::Individual(blocks), k).unwrap()
    }

    #[test]
    fn toy_relaxes_largest() {
        let sol = solve_selection(&toy(&[1.0, 5.0, 9.0], 2), &SelectionOptions::default()).unwrap();
        assert_eq!(sol.status, SelectionStatus::Optimal);
        assert!((sol.objective - 5.0).abs() < 1e-9);
        assert_eq!(sol.z, vec![false, false, true]);
        assert_eq!(sol.enforced, vec![0, 1]);
    }

    #[test]
    fn greedy_on_toy() {
        let (x, z, v) = greedy_incumbent(&toy(&[1.0, 5.0, 9.0], 2)).unwrap().unwrap();
        assert!((x[0] - 5.0).abs() < 1e-9 && (v - 5.0).abs() < 1e-9);
        assert_eq!(z, vec![false, false, true]);
    }

    #[test]
    fn no_budget_enforces_everything() {
        let p = toy(&[1.0, 5.0, 9.0], 3);
        let sol = solve_selection(&p, &SelectionOptions::default()).unwrap();
        assert!((sol.objective - 9.0).abs() < 1e-9);
        let (_, _, v) = greedy_incumbent(&p).unwrap().unwrap();
        assert!((v - 9.0).abs() < 1e-9);
    }

    #[test]
    fn infeasible_base() {
        let mut p = toy(&[1.0], 1);
        p.base = LinearSystem::inequalities(DMatrix::from_column_slice(2, 1, &[1.0, -1.0]), dv(&[0.0, -1.0]));
        let sol = solve_selection(&p, &SelectionOptions::default()).unwrap();
        assert_eq!(sol.status, SelectionStatus::Infeasible);
    }

    #[test]
    fn shared_blocks_with_and_without_quantile_bound() {
        // x ≤ 10 + 0.1tⱼ and x ≥ tⱼ; the best five enforce t ≤ 3, so x = 3.
        let t = [3.0, -2.0, 7.5, 0.5, 4.0, -6.0, 1.0];
        let lhs = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let rhs = t.iter().map(|&tj| dv(&[10.0 + 0.1 * tj, -tj])).collect();
        let base = LinearSystem::inequalities(DMatrix::zeros(0, 1), DVector::zeros(0));
        let cost = QuadCost::new(DMatrix::from_element(1, 1, 2.0), dv(&[-4.0]), 0.0);
        let p = SelectionProblem::new(cost, base, ScenarioBlocks::Shared { lhs, rhs }, 5).unwrap();
        let a = solve_selection(&p, &SelectionOptions::default()).unwrap();
        let b = solve_selection(&p, &SelectionOptions { quantile_bound: false, greedy_start: false, ..Default::default() }).unwrap();
        assert!((a.objective + 3.0).abs() < 1e-9, "{} {}", a.objective, b.objective);
        assert!((b.objective + 3.0).abs() < 1e-9);
        assert!(a.enforced.len() >= 5);
    }
}
