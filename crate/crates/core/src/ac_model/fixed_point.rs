//! Chance-constrained AC dispatch by fixed-point iteration on the response
//! Jacobian.
//!
//! Each outer step freezes the sensitivity `G` of the constrained rows at the
//! previous operating point and solves
//!
//! ```text
//! minimize c(P)  s.t.  power flow,  w(u) + G·ξʲ ≤ b  for at least k scenarios
//! ```
//!
//! by sequential linearization: the rows `w(u)` are linearized around the
//! latest power-flow solution, the resulting k-of-S QP is solved exactly, and
//! the step is accepted by a trust-region test on the exact penalty
//! `c(P) + ρ·max(deterministic violation, k-th smallest scenario violation)`.
//! A single shared elastic column keeps every linearized step feasible.

use std::fmt::Write as _;

use log::{debug, info};
use nalgebra::{DMatrix, DVector};

use super::network::{pf_solve, pf_solve_warm, AcControls, AcNetwork, AcState, PfOptions};
use super::response::{control_gradients, response_jacobian, AcRows, ControlLayout, ResponseJacobian};
use super::AcError;
use crate::ambiguity::AmbiguityParams;
use crate::case_io::VreFleet;
use crate::dc_model::{CcOptions, CcSystem};
use crate::scenario_mip::{
    solve_selection, LinearSystem, QuadCost, ScenarioBlocks, SelectionOptions, SelectionProblem, SelectionSolution,
    SelectionStatus,
};
use crate::scenarios::{fmt_f64, ScenarioSet};

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointOptions {
    /// Outer stop when the distance between successive points is at most this.
    pub eta: f64,
    pub max_outer: usize,
    /// Inner stop when `‖Δu‖∞` is at most this.
    pub step_tol: f64,
    pub max_inner: usize,
    /// Price of the elastic violation ($ per p.u.).
    pub penalty: f64,
    /// Initial trust radius as a fraction of each control's range.
    pub trust_radius: f64,
    /// Largest elastic violation accepted at an inner solution (p.u.).
    pub feas_tol: f64,
    pub selection: SelectionOptions,
    pub pf: PfOptions,
    pub cc: CcOptions,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self {
            eta: 1e-4,
            max_outer: 10,
            step_tol: 1e-6,
            max_inner: 100,
            penalty: 1e6,
            trust_radius: 0.25,
            feas_tol: 1e-6,
            selection: SelectionOptions::default(),
            pf: PfOptions::default(),
            cc: CcOptions::default(),
        }
    }
}

/// One outer iteration; `t = 0` is the deterministic start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    /// Distance to the previous point; NaN at `t = 0`.
    pub distance: f64,
    pub objective: f64,
    pub inner_iterations: usize,
}

pub fn trace_csv(trace: &[TraceRow], digest_line: &str) -> String {
    let mut out = format!("{digest_line}\nt,distance,objective,inner_iterations\n");
    for r in trace {
        let _ = writeln!(out, "{},{},{},{}", r.t, fmt_f64(r.distance), fmt_f64(r.objective), r.inner_iterations);
    }
    out
}

/// Result of a sequential-linearization solve.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchOutcome {
    pub state: AcState,
    /// `x` holds the controls in [`ControlLayout`] order; `objective` is the
    /// generation cost at the power-flow solution.
    pub selection: SelectionSolution,
    pub inner_iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointResult {
    pub state: AcState,
    pub selection: SelectionSolution,
    /// Outer iterations after the deterministic start.
    pub iterations: usize,
    pub trace: Vec<TraceRow>,
    /// Sensitivity frozen in the final outer iteration.
    pub jacobian: ResponseJacobian,
    pub rows: AcRows,
    pub layout: ControlLayout,
}

impl FixedPointResult {
    pub fn distances(&self) -> Vec<f64> {
        self.trace.iter().skip(1).map(|r| r.distance).collect()
    }
}

/// Total generation cost of a state.
pub fn generation_cost(net: &AcNetwork, state: &AcState) -> f64 {
    net.case
        .gens
        .iter()
        .zip(state.p_gen.iter())
        .map(|(g, &p)| g.c0 + g.c1 * p + g.c2 * p * p)
        .sum()
}

/// 2-norm of the change in `[v at slack and PV buses, P at PV buses]`.
pub fn fixed_point_distance(net: &AcNetwork, a: &AcState, b: &AcState) -> f64 {
    let (va, vb) = (a.v(), b.v());
    let volt = net.fixed_v.iter().map(|&i| (va[i] - vb[i]).powi(2));
    let power = net.pv().map(|i| (a.p[i] - b.p[i]).powi(2));
    volt.chain(power).sum::<f64>().sqrt()
}

/// Controls clamped into their box.
fn clamp_controls(net: &AcNetwork, layout: &ControlLayout, c: &AcControls) -> AcControls {
    let (lo, hi) = layout.bounds(net);
    let u = layout.vector(c);
    let u = DVector::from_fn(u.len(), |i, _| u[i].clamp(lo[i], hi[i]));
    layout.apply(c, &u)
}

struct Subproblem<'a> {
    net: &'a AcNetwork,
    fleet: &'a VreFleet,
    rows: &'a AcRows,
    layout: &'a ControlLayout,
    finite: Vec<usize>,
    /// `G·ξʲ` over the finite rows.
    shifts: Vec<DVector<f64>>,
    k: usize,
    opts: &'a FixedPointOptions,
}

impl Subproblem<'_> {
    fn balancing_bounds(&self) -> (f64, f64) {
        let g = &self.net.case.gens[self.net.balancing];
        (g.p_min, g.p_max)
    }

    /// Violation of the zero-error rows and of the k best scenarios.
    fn violation(&self, state: &AcState) -> f64 {
        let w = self.rows.values(state);
        let gap = DVector::from_iterator(self.finite.len(), self.finite.iter().map(|&r| w[r] - self.rows.rhs[r]));
        let (pmin, pmax) = self.balancing_bounds();
        let pb = state.p_gen[self.net.balancing];
        let det = gap.iter().copied().chain([pb - pmax, pmin - pb, 0.0]).fold(f64::NEG_INFINITY, f64::max);
        let mut per: Vec<f64> =
            self.shifts.iter().map(|s| (&gap + s).iter().copied().fold(0.0, f64::max)).collect();
        per.sort_by(f64::total_cmp);
        det.max(per[self.k - 1])
    }

    fn merit(&self, state: &AcState) -> f64 {
        generation_cost(self.net, state) + self.opts.penalty * self.violation(state)
    }

    /// Linearized k-of-S step problem in `x = [Δu; σ]`.
    fn step_problem(&self, state: &AcState, radius: f64) -> Result<SelectionProblem, AcError> {
        let (net, layout) = (self.net, self.layout);
        let nu = layout.len();
        let (grad, gbal) = control_gradients(net, state, self.rows, layout)?;
        let u = layout.vector(&state.controls);
        let (lo, hi) = layout.bounds(net);
        let w = self.rows.values(state);

        let mut h = DMatrix::zeros(nu + 1, nu + 1);
        let mut g = DVector::zeros(nu + 1);
        let mut c0 = 0.0;
        for (r, &gi) in layout.gens.iter().enumerate() {
            let gen = &net.case.gens[gi];
            h[(r, r)] += 2.0 * gen.c2;
            g[r] += 2.0 * gen.c2 * u[r] + gen.c1;
            c0 += gen.c0 + gen.c1 * u[r] + gen.c2 * u[r] * u[r];
        }
        let bal = &net.case.gens[net.balancing];
        let pb = state.p_gen[net.balancing];
        let slope = 2.0 * bal.c2 * pb + bal.c1;
        for i in 0..nu {
            g[i] += slope * gbal[i];
            for j in 0..nu {
                h[(i, j)] += 2.0 * bal.c2 * gbal[i] * gbal[j];
            }
        }
        c0 += bal.c0 + bal.c1 * pb + bal.c2 * pb * pb;
        g[nu] = self.opts.penalty;

        let nf = self.finite.len();
        let m = 4 * nu + nf + 3;
        let mut a = DMatrix::zeros(m, nu + 1);
        let mut b = DVector::zeros(m);
        let mut r = 0;
        let scale = (&hi - &lo).map(|d| d.max(1e-3));
        for i in 0..nu {
            let step = (radius * scale[i]).min(f64::MAX);
            a[(r, i)] = 1.0;
            b[r] = step.min(hi[i] - u[i]);
            a[(r + 1, i)] = -1.0;
            b[r + 1] = step.min(u[i] - lo[i]);
            r += 2;
        }
        // Keep the box rows distinct from the trust rows so degenerate
        // vertices stay well conditioned.
        for i in 0..nu {
            a[(r, i)] = 1.0;
            b[r] = hi[i] - u[i];
            a[(r + 1, i)] = -1.0;
            b[r + 1] = u[i] - lo[i];
            r += 2;
        }
        let mut lhs = DMatrix::zeros(nf, nu + 1);
        for (q, &row) in self.finite.iter().enumerate() {
            lhs.view_mut((q, 0), (1, nu)).copy_from(&grad.row(row));
            lhs[(q, nu)] = -1.0;
            a.set_row(r, &lhs.row(q));
            b[r] = self.rows.rhs[row] - w[row];
            r += 1;
        }
        let (pmin, pmax) = self.balancing_bounds();
        for i in 0..nu {
            a[(r, i)] = gbal[i];
            a[(r + 1, i)] = -gbal[i];
        }
        a[(r, nu)] = -1.0;
        a[(r + 1, nu)] = -1.0;
        b[r] = pmax - pb;
        b[r + 1] = pb - pmin;
        a[(r + 2, nu)] = -1.0;
        b[r + 2] = 0.0;

        let offset = DVector::from_iterator(nf, self.finite.iter().map(|&row| self.rows.rhs[row] - w[row]));
        let rhs = self.shifts.iter().map(|s| &offset - s).collect();
        let base = LinearSystem::inequalities(a, b);
        Ok(SelectionProblem::new(QuadCost::new(h, g, c0), base, ScenarioBlocks::Shared { lhs, rhs }, self.k)?)
    }

    fn solve(&self, start: &AcState) -> Result<DispatchOutcome, AcError> {
        let (net, layout, opts) = (self.net, self.layout, self.opts);
        let nu = layout.len();
        let mut state = start.clone();
        let mut phi = self.merit(&state);
        let mut radius = opts.trust_radius;
        for iter in 1..=opts.max_inner {
            let problem = self.step_problem(&state, radius)?;
            let sol = solve_selection(&problem, &opts.selection)?;
            if sol.status == SelectionStatus::Infeasible {
                return Err(AcError::Slp("linearized step problem is infeasible".into()));
            }
            let du = sol.x.rows(0, nu).into_owned();
            let step = du.amax();
            if step <= opts.step_tol {
                let sigma = sol.x[nu];
                if sigma > opts.feas_tol {
                    return Err(AcError::Infeasible(sigma));
                }
                let u = layout.vector(&state.controls);
                let cost = generation_cost(net, &state);
                let selection = SelectionSolution { x: u, objective: cost, ..sol };
                return Ok(DispatchOutcome { state, selection, inner_iterations: iter });
            }
            let pred = phi - sol.objective;
            let (lo, hi) = layout.bounds(net);
            let u_new = layout.vector(&state.controls) + &du;
            let u_new = DVector::from_fn(nu, |i, _| u_new[i].clamp(lo[i], hi[i]));
            let trial = pf_solve_warm(net, &layout.apply(&state.controls, &u_new), self.fleet, &state, &opts.pf);
            let tol = 1e-10 * (1.0 + phi.abs());
            match trial {
                Ok(next) => {
                    let phi_next = self.merit(&next);
                    let ared = phi - phi_next;
                    debug!("slp {iter}: step {step:.3e} pred {pred:.3e} ared {ared:.3e} radius {radius:.3e}");
                    if ared >= 0.1 * pred || (pred <= tol && ared >= -tol) {
                        if ared >= 0.75 * pred {
                            radius = (2.0 * radius).min(1.0);
                        }
                        state = next;
                        phi = phi_next;
                    } else {
                        radius *= 0.5;
                    }
                }
                Err(e) => {
                    debug!("slp {iter}: power flow failed at trial point ({e}); shrinking");
                    radius *= 0.5;
                }
            }
            if radius < 1e-12 {
                return Err(AcError::Slp(format!("trust region collapsed after {iter} iterations")));
            }
        }
        Err(AcError::Slp(format!("no convergence in {} iterations", opts.max_inner)))
    }
}

/// Linearized dispatch with `G` frozen, started from `start`.
#[allow(clippy::too_many_arguments)]
pub fn solve_linearized_dispatch(
    net: &AcNetwork,
    fleet: &VreFleet,
    rows: &AcRows,
    g: &DMatrix<f64>,
    scenarios: &ScenarioSet,
    k: usize,
    start: &AcState,
    opts: &FixedPointOptions,
) -> Result<DispatchOutcome, AcError> {
    if g.nrows() != rows.len() || g.ncols() != scenarios.dim() || scenarios.dim() != fleet.len() {
        return Err(AcError::Dimension(format!(
            "sensitivity {}x{}, {} rows, {} VRE units, scenarios of dimension {}",
            g.nrows(),
            g.ncols(),
            rows.len(),
            fleet.len(),
            scenarios.dim()
        )));
    }
    if k == 0 || k > scenarios.len() {
        return Err(AcError::Dimension(format!("k = {k} with {} scenarios", scenarios.len())));
    }
    let finite = rows.finite_rows();
    let gf = g.select_rows(finite.iter());
    let shifts = (0..scenarios.len()).map(|j| &gf * scenarios.scenario(j)).collect();
    let layout = ControlLayout::new(net);
    let sub = Subproblem { net, fleet, rows, layout: &layout, finite, shifts, k, opts };
    sub.solve(start)
}

/// Deterministic AC dispatch: every row enforced at zero forecast error.
pub fn solve_deterministic_ac(
    net: &AcNetwork,
    fleet: &VreFleet,
    start: &AcControls,
    opts: &FixedPointOptions,
) -> Result<DispatchOutcome, AcError> {
    let rows = AcRows::new(net, opts.cc);
    let layout = ControlLayout::new(net);
    let state = pf_solve(net, &clamp_controls(net, &layout, start), fleet, &opts.pf)?;
    let zero = ScenarioSet::new(
        (0..fleet.len()).map(|i| format!("vre{i}")).collect(),
        DMatrix::zeros(1, fleet.len()),
    )
    .map_err(|e| AcError::Dimension(e.to_string()))?;
    let g = DMatrix::zeros(rows.len(), fleet.len());
    solve_linearized_dispatch(net, fleet, &rows, &g, &zero, 1, &state, opts)
}

/// Fixed-point iteration: deterministic start, then repeated dispatches with
/// the response sensitivity frozen at the previous point.
pub fn fixed_point_solve(
    net: &AcNetwork,
    fleet: &VreFleet,
    scenarios: &ScenarioSet,
    params: &AmbiguityParams,
    start: &AcControls,
    opts: &FixedPointOptions,
) -> Result<FixedPointResult, AcError> {
    if params.s != scenarios.len() {
        return Err(AcError::Dimension(format!(
            "ambiguity parameters for S = {} but {} scenarios",
            params.s,
            scenarios.len()
        )));
    }
    let rows = AcRows::new(net, opts.cc);
    let layout = ControlLayout::new(net);
    let det = solve_deterministic_ac(net, fleet, start, opts)?;
    let mut trace = vec![TraceRow {
        t: 0,
        distance: f64::NAN,
        objective: det.selection.objective,
        inner_iterations: det.inner_iterations,
    }];
    info!("fixed point t=0: deterministic cost {:.6}", det.selection.objective);
    let mut current = det.state;
    for t in 1..=opts.max_outer {
        let jacobian = response_jacobian(net, &current, fleet, &rows)?;
        let out =
            solve_linearized_dispatch(net, fleet, &rows, &jacobian.j_matrix, scenarios, params.k, &current, opts)?;
        let distance = fixed_point_distance(net, &out.state, &current);
        trace.push(TraceRow {
            t,
            distance,
            objective: out.selection.objective,
            inner_iterations: out.inner_iterations,
        });
        info!("fixed point t={t}: cost {:.6}, distance {distance:.3e}", out.selection.objective);
        if distance <= opts.eta {
            return Ok(FixedPointResult {
                state: out.state,
                selection: out.selection,
                iterations: t,
                trace,
                jacobian,
                rows,
                layout,
            });
        }
        current = out.state;
    }
    Err(AcError::FixedPoint(trace.iter().skip(1).map(|r| r.distance).collect()))
}

/// Rows linearized in the controls at `state`, with sensitivity `g`.
///
/// The decision vector is the control vector of [`ControlLayout`]; the
/// deterministic part holds the control box and the balancing unit's limits.
pub fn linearized_cc_system(
    net: &AcNetwork,
    state: &AcState,
    rows: &AcRows,
    g: &DMatrix<f64>,
) -> Result<CcSystem, AcError> {
    let layout = ControlLayout::new(net);
    let nu = layout.len();
    let (grad, gbal) = control_gradients(net, state, rows, &layout)?;
    let u = layout.vector(&state.controls);
    let base_const = rows.values(state) - &grad * &u;
    let (lo, hi) = layout.bounds(net);
    let bal = &net.case.gens[net.balancing];
    let pb0 = state.p_gen[net.balancing] - gbal.dot(&u);
    let mut a = DMatrix::zeros(2 * nu + 2, nu);
    let mut b = DVector::zeros(2 * nu + 2);
    for i in 0..nu {
        a[(2 * i, i)] = 1.0;
        b[2 * i] = hi[i];
        a[(2 * i + 1, i)] = -1.0;
        b[2 * i + 1] = -lo[i];
    }
    a.set_row(2 * nu, &gbal.transpose());
    b[2 * nu] = bal.p_max - pb0;
    a.set_row(2 * nu + 1, &(-gbal.transpose()));
    b[2 * nu + 1] = pb0 - bal.p_min;
    Ok(CcSystem {
        names: rows.names.clone(),
        base_lin: grad,
        base_const,
        sens: g.clone(),
        rhs: rows.rhs.clone(),
        deterministic: LinearSystem::inequalities(a, b),
    })
}
