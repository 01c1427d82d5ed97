//! DC power flow through power transfer distribution factors.
//!
//! Decision variables are the outputs `P_G` of the in-service generators.
//! Forecast errors `ξ` are absorbed by AGC: generator `g` moves by
//! `−α_g Σξ`, so net injections move by `Mξ` with `M = I − Ω1ᵀ` restricted
//! to the VRE columns, and flows by `ΦMξ`.
//!
//! Chance-constrained rows come in the order
//! gen upper, gen lower (negated), flow upper, flow lower (negated).

use std::collections::VecDeque;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::case_io::{NetworkCase, VreFleet};
use crate::scenario_mip::qp::{qp_solve, LinearSystem, QpError, QpOptions, QpStatus, QuadCost};
use crate::scenarios::fmt_f64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DcError {
    #[error("network is disconnected: bus {0} cannot reach the slack")]
    Disconnected(i64),
    #[error("reduced susceptance matrix is singular")]
    Singular,
    #[error("deterministic DC OPF is infeasible: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Qp(#[from] QpError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PtdfMatrix {
    /// `L × n`; column `slack` is zero.
    pub phi: DMatrix<f64>,
    pub slack: usize,
}

/// Bus-to-branch incidence (`+1` at from, `−1` at to) and series susceptances.
fn incidence(case: &NetworkCase) -> (DMatrix<f64>, DVector<f64>) {
    let (l, n) = (case.n_branch(), case.n_bus());
    let mut a = DMatrix::zeros(l, n);
    let mut b = DVector::zeros(l);
    for (k, br) in case.branches.iter().enumerate() {
        a[(k, br.from)] += 1.0;
        a[(k, br.to)] -= 1.0;
        b[k] = 1.0 / br.x;
    }
    (a, b)
}

fn check_connected(case: &NetworkCase) -> Result<(), DcError> {
    let n = case.n_bus();
    let mut adj = vec![Vec::new(); n];
    for br in &case.branches {
        adj[br.from].push(br.to);
        adj[br.to].push(br.from);
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([case.slack]);
    seen[case.slack] = true;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    match seen.iter().position(|s| !s) {
        Some(i) => Err(DcError::Disconnected(case.buses[i].id)),
        None => Ok(()),
    }
}

/// PTDF from a single LU factorization of the slack-reduced susceptance matrix.
pub fn build_ptdf(case: &NetworkCase) -> Result<PtdfMatrix, DcError> {
    check_connected(case)?;
    let (l, n) = (case.n_branch(), case.n_bus());
    let (a, b) = incidence(case);
    let keep: Vec<usize> = (0..n).filter(|&i| i != case.slack).collect();
    let bf = DMatrix::from_fn(l, n, |k, i| b[k] * a[(k, i)]);
    let bbus = a.transpose() * &bf;
    let b_red = bbus.select_rows(keep.iter()).select_columns(keep.iter());
    let bf_red = bf.select_columns(keep.iter());
    let lu = b_red.lu();
    // B_red is symmetric, so Φ_redᵀ = B_red⁻¹ Bf_redᵀ.
    let sol = lu.solve(&bf_red.transpose()).ok_or(DcError::Singular)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(DcError::Singular);
    }
    let mut phi = DMatrix::zeros(l, n);
    for (c, &i) in keep.iter().enumerate() {
        phi.set_column(i, &sol.row(c).transpose());
    }
    Ok(PtdfMatrix { phi, slack: case.slack })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DcResponse {
    /// `n × n_vre` columns of `I − Ω1ᵀ` at the VRE buses.
    pub m_matrix: DMatrix<f64>,
    /// `Φ·M`.
    pub flow_sens: DMatrix<f64>,
}

pub fn dc_response(case: &NetworkCase, fleet: &VreFleet, ptdf: &PtdfMatrix) -> DcResponse {
    let n = case.n_bus();
    let mut m = DMatrix::zeros(n, fleet.len());
    for (v, &bus) in fleet.buses.iter().enumerate() {
        m.set_column(v, &(-&fleet.omega));
        m[(bus, v)] += 1.0;
    }
    let flow_sens = &ptdf.phi * &m;
    DcResponse { m_matrix: m, flow_sens }
}

/// Chance-constrained rows `base_lin·x + base_const + sens·ξ ≤ rhs`, plus the
/// constraints that must hold at `ξ = 0` regardless of scenario selection.
#[derive(Debug, Clone, PartialEq)]
pub struct CcSystem {
    pub names: Vec<String>,
    pub base_lin: DMatrix<f64>,
    pub base_const: DVector<f64>,
    pub sens: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub deterministic: LinearSystem,
}

impl CcSystem {
    pub fn n_rows(&self) -> usize {
        self.rhs.len()
    }

    /// Row values at decision `x` without forecast error.
    pub fn base(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.base_lin * x + &self.base_const
    }

    pub fn values(&self, x: &DVector<f64>, xi: &DVector<f64>) -> DVector<f64> {
        self.base(x) + &self.sens * xi
    }

    /// Per-row excess over the bound (positive when violated).
    pub fn excess(&self, x: &DVector<f64>, xi: &DVector<f64>) -> DVector<f64> {
        self.values(x, xi) - &self.rhs
    }

    /// Indices of rows with a finite bound.
    pub fn finite_rows(&self) -> Vec<usize> {
        (0..self.n_rows()).filter(|&i| self.rhs[i].is_finite()).collect()
    }

    /// CSV text `name,base,<sens columns>,rhs` at decision `x`.
    pub fn to_csv(&self, x: &DVector<f64>, vre_labels: &[String], digest_line: &str) -> String {
        let base = self.base(x);
        let mut out = String::new();
        let _ = writeln!(out, "{digest_line}");
        let mut header = vec!["name".to_string(), "base".to_string()];
        header.extend(vre_labels.iter().map(|l| format!("d_{l}")));
        header.push("rhs".into());
        let _ = writeln!(out, "{}", header.join(","));
        for i in 0..self.n_rows() {
            let mut cells = vec![self.names[i].clone(), fmt_f64(base[i])];
            cells.extend(self.sens.row(i).iter().map(|&v| fmt_f64(v)));
            cells.push(fmt_f64(self.rhs[i]));
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CcOptions {
    /// Keep bound rows for generators at the slack bus (diagnostics only).
    pub include_slack_rows: bool,
}

/// Generator-to-bus incidence, `n × n_gen`.
pub fn gen_incidence(case: &NetworkCase) -> DMatrix<f64> {
    let mut cg = DMatrix::zeros(case.n_bus(), case.n_gen());
    for (g, gen) in case.gens.iter().enumerate() {
        cg[(gen.bus, g)] = 1.0;
    }
    cg
}

/// Generator cost in p.u.: `H = diag(2c₂)`, `g = c₁`, `c₀ = Σc₀`.
pub fn dispatch_cost(case: &NetworkCase) -> QuadCost {
    let n = case.n_gen();
    QuadCost::new(
        DMatrix::from_diagonal(&DVector::from_iterator(n, case.gens.iter().map(|g| 2.0 * g.c2))),
        DVector::from_iterator(n, case.gens.iter().map(|g| g.c1)),
        case.gens.iter().map(|g| g.c0).sum(),
    )
}

/// Balance, all generator bounds, and flow limits, all at `ξ = 0`.
pub fn deterministic_system(case: &NetworkCase, fleet: &VreFleet, ptdf: &PtdfMatrix) -> LinearSystem {
    let (ng, l, n) = (case.n_gen(), case.n_branch(), case.n_bus());
    let cg = gen_incidence(case);
    let fixed = fleet.injection(n) - case.pd();
    let flow_lin = &ptdf.phi * &cg;
    let flow_const = &ptdf.phi * &fixed;
    let mut a = DMatrix::zeros(2 * ng + 2 * l, ng);
    let mut b = DVector::zeros(2 * ng + 2 * l);
    for (g, gen) in case.gens.iter().enumerate() {
        a[(g, g)] = 1.0;
        b[g] = gen.p_max;
        a[(ng + g, g)] = -1.0;
        b[ng + g] = -gen.p_min;
    }
    for k in 0..l {
        let lim = case.branches[k].limit;
        a.set_row(2 * ng + k, &flow_lin.row(k));
        b[2 * ng + k] = lim - flow_const[k];
        a.set_row(2 * ng + l + k, &(-flow_lin.row(k)));
        b[2 * ng + l + k] = lim + flow_const[k];
    }
    let e = DMatrix::from_element(1, ng, 1.0);
    let f = DVector::from_element(1, -fixed.sum());
    LinearSystem::new(a, b, e, f)
}

pub fn assemble_cc_system(case: &NetworkCase, fleet: &VreFleet, ptdf: &PtdfMatrix, opts: CcOptions) -> CcSystem {
    let (ng, l, n, nv) = (case.n_gen(), case.n_branch(), case.n_bus(), fleet.len());
    let resp = dc_response(case, fleet, ptdf);
    let cg = gen_incidence(case);
    let fixed = fleet.injection(n) - case.pd();
    let flow_lin = &ptdf.phi * &cg;
    let flow_const = &ptdf.phi * &fixed;
    let gens: Vec<usize> = (0..ng)
        .filter(|&g| opts.include_slack_rows || case.gens[g].bus != case.slack)
        .collect();
    let rows = 2 * gens.len() + 2 * l;
    let mut names = Vec::with_capacity(rows);
    let mut base_lin = DMatrix::zeros(rows, ng);
    let mut base_const = DVector::zeros(rows);
    let mut sens = DMatrix::zeros(rows, nv);
    let mut rhs = DVector::zeros(rows);
    let mut r = 0;
    for sign in [1.0, -1.0] {
        for &g in &gens {
            let gen = &case.gens[g];
            base_lin[(r, g)] = sign;
            for v in 0..nv {
                sens[(r, v)] = -sign * fleet.alpha[g];
            }
            rhs[r] = if sign > 0.0 { gen.p_max } else { -gen.p_min };
            let side = if sign > 0.0 { "upper" } else { "lower" };
            names.push(format!("pg{}_bus{}_{side}", g, case.buses[gen.bus].id));
            r += 1;
        }
    }
    for sign in [1.0, -1.0] {
        for k in 0..l {
            let br = &case.branches[k];
            base_lin.set_row(r, &(flow_lin.row(k) * sign));
            base_const[r] = sign * flow_const[k];
            sens.set_row(r, &(resp.flow_sens.row(k) * sign));
            rhs[r] = br.limit;
            let side = if sign > 0.0 { "upper" } else { "lower" };
            names.push(format!(
                "flow{}_{}_{}_{side}",
                k,
                case.buses[br.from].id,
                case.buses[br.to].id
            ));
            r += 1;
        }
    }
    CcSystem { names, base_lin, base_const, sens, rhs, deterministic: deterministic_system(case, fleet, ptdf) }
}

/// Result of the deterministic DC OPF.
#[derive(Debug, Clone, PartialEq)]
pub struct DcDispatch {
    pub p_gen: DVector<f64>,
    pub cost: f64,
    pub flows: DVector<f64>,
}

/// Branch flows for a dispatch with forecast VRE output and error `ξ`.
pub fn dc_flows(
    case: &NetworkCase,
    fleet: &VreFleet,
    ptdf: &PtdfMatrix,
    p_gen: &DVector<f64>,
    xi: &DVector<f64>,
) -> DVector<f64> {
    let n = case.n_bus();
    let total: f64 = xi.sum();
    let p = p_gen - &fleet.alpha * total;
    let inj = gen_incidence(case) * p + fleet.incidence(n) * (&fleet.forecasts + xi) - case.pd();
    &ptdf.phi * inj
}

/// Minimize generator cost subject to balance, generator limits and flow limits.
pub fn solve_deterministic_dc(
    case: &NetworkCase,
    fleet: &VreFleet,
    ptdf: &PtdfMatrix,
) -> Result<DcDispatch, DcError> {
    let cost = dispatch_cost(case);
    let sys = deterministic_system(case, fleet, ptdf);
    let res = qp_solve(&cost, &sys, &QpOptions::default())?;
    if res.status == QpStatus::Infeasible {
        return Err(DcError::Infeasible(infeasibility_hint(case, fleet)));
    }
    let flows = dc_flows(case, fleet, ptdf, &res.x, &DVector::zeros(fleet.len()));
    Ok(DcDispatch { p_gen: res.x, cost: res.value, flows })
}

fn infeasibility_hint(case: &NetworkCase, fleet: &VreFleet) -> String {
    let net = case.pd().sum() - fleet.forecasts.sum();
    let pmin: f64 = case.gens.iter().map(|g| g.p_min).sum();
    let pmax: f64 = case.gens.iter().map(|g| g.p_max).sum();
    if net > pmax {
        format!("net load {net:.6} p.u. exceeds total capacity {pmax:.6} p.u.")
    } else if net < pmin {
        format!("net load {net:.6} p.u. is below total minimum output {pmin:.6} p.u.")
    } else {
        "aggregate generation bounds hold; line limits cannot be met".into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case_io::{Branch, Bus, BusKind, Generator};
    use std::collections::HashMap;

    fn bus(id: i64, kind: BusKind, pd: f64) -> Bus {
        Bus { id, kind, pd, qd: 0.0, gs: 0.0, bs: 0.0, v_min: 0.81, v_max: 1.21 }
    }

    fn line(from: usize, to: usize, x: f64, limit: f64) -> Branch {
        Branch { from, to, r: 0.0, x, b: 0.0, limit, tap: 1.0, shift: 0.0 }
    }

    fn gen(bus: usize, p_max: f64, c1: f64) -> Generator {
        Generator { bus, p_min: 0.0, p_max, q_min: -1.0, q_max: 1.0, v_set: 1.0, p0: 0.0, c0: 0.0, c1, c2: 0.0 }
    }

    fn network(buses: Vec<Bus>, gens: Vec<Generator>, branches: Vec<Branch>) -> NetworkCase {
        let slack = buses.iter().position(|b| b.kind == BusKind::Slack).unwrap();
        let index_of: HashMap<i64, usize> = buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
        NetworkCase { base_mva: 100.0, buses, gens, branches, slack, index_of }
    }

    fn triangle(limit: f64) -> NetworkCase {
        network(
            vec![bus(1, BusKind::Pv, 0.0), bus(2, BusKind::Pq, 1.0), bus(3, BusKind::Slack, 0.0)],
            vec![gen(0, 2.0, 10.0), gen(2, 2.0, 20.0)],
            vec![line(0, 1, 0.1, limit), line(0, 2, 0.1, limit), line(1, 2, 0.1, limit)],
        )
    }

    #[test]
    fn two_bus_ptdf() {
        let case = network(
            vec![bus(1, BusKind::Pq, 0.0), bus(2, BusKind::Slack, 0.0)],
            vec![gen(1, 1.0, 1.0)],
            vec![line(0, 1, 0.2, f64::INFINITY)],
        );
        let ptdf = build_ptdf(&case).unwrap();
        assert!((ptdf.phi[(0, 0)] - 1.0).abs() < 1e-14);
        assert_eq!(ptdf.phi[(0, 1)], 0.0);
    }

    #[test]
    fn triangle_ptdf() {
        let ptdf = build_ptdf(&triangle(f64::INFINITY)).unwrap();
        // injection at bus 1, withdrawal at slack bus 3
        assert!((ptdf.phi[(1, 0)] - 2.0 / 3.0).abs() < 1e-14);
        assert!((ptdf.phi[(0, 0)] - 1.0 / 3.0).abs() < 1e-14);
        assert!((ptdf.phi[(2, 0)] - 1.0 / 3.0).abs() < 1e-14);
        assert!(ptdf.phi.column(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn disconnected_network() {
        let mut case = triangle(f64::INFINITY);
        case.branches.retain(|b| b.to != 1 && b.from != 1);
        assert_eq!(build_ptdf(&case), Err(DcError::Disconnected(2)));
    }

    #[test]
    fn response_columns_sum_to_zero() {
        let case = triangle(f64::INFINITY);
        let fleet = crate::case_io::build_fleet(&case, &[1], &[0.3], 0.1).unwrap();
        let resp = dc_response(&case, &fleet, &build_ptdf(&case).unwrap());
        assert!(resp.m_matrix.column(0).sum().abs() < 1e-15);
        assert_eq!(resp.m_matrix[(1, 0)], 1.0);
        assert_eq!(resp.m_matrix[(0, 0)], -0.5);
    }

    #[test]
    fn single_gen_follows_agc() {
        let case = network(
            vec![bus(1, BusKind::Slack, 0.0), bus(2, BusKind::Pq, 0.0)],
            vec![gen(1, 1.0, 1.0)],
            vec![line(0, 1, 0.1, f64::INFINITY)],
        );
        let fleet = crate::case_io::build_fleet(&case, &[0], &[0.5], 0.1).unwrap();
        let cc = assemble_cc_system(&case, &fleet, &build_ptdf(&case).unwrap(), CcOptions::default());
        assert_eq!(cc.sens[(0, 0)], -1.0);
        let x = DVector::from_element(1, 0.5);
        let v = cc.values(&x, &DVector::from_element(1, 0.4));
        assert!((v[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_error_gives_deterministic_rows() {
        let case = triangle(0.5);
        let fleet = crate::case_io::build_fleet(&case, &[1], &[0.3], 0.1).unwrap();
        let ptdf = build_ptdf(&case).unwrap();
        let cc = assemble_cc_system(&case, &fleet, &ptdf, CcOptions::default());
        let x = DVector::from_row_slice(&[0.4, 0.3]);
        let v = cc.values(&x, &DVector::zeros(1));
        let flows = dc_flows(&case, &fleet, &ptdf, &x, &DVector::zeros(1));
        assert_eq!(cc.n_rows(), 2 + 6);
        assert!((v[0] - 0.4).abs() < 1e-15);
        assert!((v[2] - flows[0]).abs() < 1e-14);
        assert!((v[5] + flows[0]).abs() < 1e-14);
    }

    #[test]
    fn cheapest_generator_serves_load() {
        let case = triangle(f64::INFINITY);
        let fleet = crate::case_io::build_fleet(&case, &[1], &[0.2], 0.1).unwrap();
        let d = solve_deterministic_dc(&case, &fleet, &build_ptdf(&case).unwrap()).unwrap();
        assert!((d.p_gen[0] - 0.8).abs() < 1e-9);
        assert!(d.p_gen[1].abs() < 1e-9);
        assert!((d.cost - 8.0).abs() < 1e-8);
    }

    #[test]
    fn binding_line_shifts_dispatch() {
        // Net injections (a, −0.8, 0.8 − a) give f12 = a/3 + 0.8/3, so the
        // limit f12 ≤ 0.5 caps the cheap unit at a = 0.7.
        let case = triangle(0.5);
        let fleet = crate::case_io::build_fleet(&case, &[1], &[0.2], 0.1).unwrap();
        let ptdf = build_ptdf(&case).unwrap();
        let d = solve_deterministic_dc(&case, &fleet, &ptdf).unwrap();
        assert!((d.p_gen[0] - 0.7).abs() < 1e-9, "{}", d.p_gen);
        assert!((d.p_gen[1] - 0.1).abs() < 1e-9);
        assert!((d.flows[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn infeasible_capacity() {
        let mut case = triangle(f64::INFINITY);
        case.buses[1].pd = 10.0;
        let fleet = crate::case_io::build_fleet(&case, &[1], &[0.2], 0.1).unwrap();
        let err = solve_deterministic_dc(&case, &fleet, &build_ptdf(&case).unwrap()).unwrap_err();
        assert!(err.to_string().contains("exceeds total capacity"));
    }
}
