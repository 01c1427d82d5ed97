//! Forecast-error response of a solved state and its first-order sensitivity.
//!
//! Sensitivities come from the implicit function theorem: with the power-flow
//! unknowns `x = [θ_pvpq; |V|_pq]` and mismatch `F(x) − spec(p) = 0`, a
//! parameter change moves the solution by `dx = J⁻¹(dspec − ∂F/∂p·dp)`.

use nalgebra::{DMatrix, DVector, Dyn, LU};

use super::network::{ds_dv, pf_solve_from, reduced_jacobian, AcControls, AcNetwork, AcState, PfOptions, C64};
use super::AcError;
use crate::case_io::{BusKind, VreFleet};
use crate::dc_model::CcOptions;

/// Solve the perturbed power flow, warm-started at `state`.
///
/// Setpoints and regulated magnitudes are those of `state`; `xi` replaces
/// any error already applied to it.
pub fn respond(
    net: &AcNetwork,
    state: &AcState,
    fleet: &VreFleet,
    xi: &DVector<f64>,
    opts: &PfOptions,
) -> Result<AcState, AcError> {
    pf_solve_from(net, &state.controls, fleet, xi, state.vm.clone(), state.va.clone(), opts)
}

/// Linearization of the power flow at a solved state.
pub(crate) struct Linearization<'a> {
    net: &'a AcNetwork,
    vm: DVector<f64>,
    dva: DMatrix<C64>,
    dvm: DMatrix<C64>,
    lu: LU<f64, Dyn, Dyn>,
    dflow_va: DMatrix<f64>,
    dflow_vm: DMatrix<f64>,
}

/// First-order change of every chance-constrained quantity.
#[derive(Debug, Clone)]
pub(crate) struct QuantityChange {
    pub p_gen: DVector<f64>,
    pub flows: DVector<f64>,
    pub q_gen: DVector<f64>,
    pub v: DVector<f64>,
}

impl<'a> Linearization<'a> {
    pub fn new(net: &'a AcNetwork, state: &AcState) -> Result<Self, AcError> {
        let v = AcNetwork::voltages(&state.vm, &state.va);
        let (dva, dvm) = ds_dv(&net.ybus, &v);
        let lu = reduced_jacobian(net, &dva, &dvm).lu();
        if !lu.is_invertible() {
            return Err(AcError::Singular);
        }
        let (n, l) = (net.n_bus(), net.n_branch());
        let j = C64::new(0.0, 1.0);
        let unit = |x: C64| if x.norm() > 0.0 { x / x.norm() } else { C64::new(1.0, 0.0) };
        let mut dflow_va = DMatrix::zeros(2 * l, n);
        let mut dflow_vm = DMatrix::zeros(2 * l, n);
        for (k, br) in net.case.branches.iter().enumerate() {
            let [yff, yft, ytf, ytt] = net.branch_y[k];
            let (f, t) = (br.from, br.to);
            let (vf, vt) = (v[f], v[t]);
            let i_f = yff * vf + yft * vt;
            let i_t = ytf * vf + ytt * vt;
            let cross_f = j * vf * (yft * vt).conj();
            dflow_va[(k, f)] += cross_f.re;
            dflow_va[(k, t)] -= cross_f.re;
            dflow_vm[(k, f)] += (unit(vf) * i_f.conj() + vf * (yff * unit(vf)).conj()).re;
            dflow_vm[(k, t)] += (vf * (yft * unit(vt)).conj()).re;
            let cross_t = j * vt * (ytf * vf).conj();
            dflow_va[(l + k, t)] += cross_t.re;
            dflow_va[(l + k, f)] -= cross_t.re;
            dflow_vm[(l + k, t)] += (unit(vt) * i_t.conj() + vt * (ytt * unit(vt)).conj()).re;
            dflow_vm[(l + k, f)] += (vt * (ytf * unit(vf)).conj()).re;
        }
        Ok(Self { net, vm: state.vm.clone(), dva, dvm, lu, dflow_va, dflow_vm })
    }

    /// Voltage change for specified-injection changes `dp`, `dq` (per bus)
    /// and regulated-magnitude changes `dvm_fixed` (read at PV and slack).
    pub fn voltage_change(
        &self,
        dp: &DVector<f64>,
        dq: &DVector<f64>,
        dvm_fixed: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>) {
        let net = self.net;
        let npvpq = net.pvpq.len();
        let mut rhs = DVector::zeros(net.n_unknowns());
        for (r, &i) in net.pvpq.iter().enumerate() {
            rhs[r] = dp[i] - net.fixed_v.iter().map(|&k| self.dvm[(i, k)].re * dvm_fixed[k]).sum::<f64>();
        }
        for (r, &i) in net.pq.iter().enumerate() {
            rhs[npvpq + r] = dq[i] - net.fixed_v.iter().map(|&k| self.dvm[(i, k)].im * dvm_fixed[k]).sum::<f64>();
        }
        let dx = self.lu.solve(&rhs).expect("invertibility checked at construction");
        let n = net.n_bus();
        let mut dva = DVector::zeros(n);
        let mut dvm = DVector::zeros(n);
        for (r, &i) in net.pvpq.iter().enumerate() {
            dva[i] = dx[r];
        }
        for (r, &i) in net.pq.iter().enumerate() {
            dvm[i] = dx[npvpq + r];
        }
        for &k in &net.fixed_v {
            dvm[k] = dvm_fixed[k];
        }
        (dva, dvm)
    }

    /// Quantity changes given the voltage change and the direct changes of
    /// generator setpoints and VRE output.
    pub fn quantities(
        &self,
        dva: &DVector<f64>,
        dvm: &DVector<f64>,
        dp_gen: &DVector<f64>,
        dvre_p: &DVector<f64>,
        dvre_q: &DVector<f64>,
    ) -> QuantityChange {
        let net = self.net;
        let ds = &self.dva * dva.map(|x| C64::new(x, 0.0)) + &self.dvm * dvm.map(|x| C64::new(x, 0.0));
        let slack = net.slack();
        let mut p_gen = dp_gen.clone();
        let others: f64 = net.gens_at[slack].iter().filter(|&&g| g != net.balancing).map(|&g| dp_gen[g]).sum();
        p_gen[net.balancing] = ds[slack].re - dvre_p[slack] - others;
        let n = net.n_bus();
        let mut q_gen = DVector::zeros(n);
        for i in 0..n {
            if net.kinds[i] != BusKind::Pq {
                q_gen[i] = ds[i].im - dvre_q[i];
            }
        }
        let v = DVector::from_fn(n, |i, _| 2.0 * self.vm[i] * dvm[i]);
        QuantityChange { p_gen, flows: &self.dflow_va * dva + &self.dflow_vm * dvm, q_gen, v }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Quantity {
    PGen(usize),
    Flow(usize),
    QGen(usize),
    Volt(usize),
}

/// Chance-constrained rows `sign·quantity ≤ rhs` of the AC model.
///
/// Order: generator active output (upper, then lower), directed flows,
/// bus reactive generation at PV and slack buses, squared magnitudes at PQ
/// buses. Generators at the slack bus get no active rows unless requested.
#[derive(Debug, Clone, PartialEq)]
pub struct AcRows {
    pub names: Vec<String>,
    pub rhs: DVector<f64>,
    rows: Vec<(Quantity, f64)>,
}

impl AcRows {
    pub fn new(net: &AcNetwork, opts: CcOptions) -> Self {
        let case = &net.case;
        let l = net.n_branch();
        let id = |i: usize| case.buses[i].id;
        let mut names = Vec::new();
        let mut rhs = Vec::new();
        let mut rows = Vec::new();
        let mut push = |q: Quantity, sign: f64, name: String, bound: f64| {
            let side = if sign > 0.0 { "upper" } else { "lower" };
            names.push(format!("{name}_{side}"));
            rhs.push(bound);
            rows.push((q, sign));
        };
        let gens: Vec<usize> =
            (0..case.n_gen()).filter(|&g| opts.include_slack_rows || case.gens[g].bus != case.slack).collect();
        for sign in [1.0, -1.0] {
            for &g in &gens {
                let gen = &case.gens[g];
                let bound = if sign > 0.0 { gen.p_max } else { -gen.p_min };
                push(Quantity::PGen(g), sign, format!("pg{g}_bus{}", id(gen.bus)), bound);
            }
        }
        for sign in [1.0, -1.0] {
            for e in 0..2 * l {
                let br = &case.branches[e % l];
                let end = if e < l { "from" } else { "to" };
                push(
                    Quantity::Flow(e),
                    sign,
                    format!("flow{}_{}_{}_{end}", e % l, id(br.from), id(br.to)),
                    br.limit,
                );
            }
        }
        let gen_buses: Vec<usize> = (0..net.n_bus()).filter(|&i| net.kinds[i] != BusKind::Pq).collect();
        for sign in [1.0, -1.0] {
            for &i in &gen_buses {
                let at = &net.gens_at[i];
                let bound = if sign > 0.0 {
                    at.iter().map(|&g| case.gens[g].q_max).sum::<f64>()
                } else {
                    -at.iter().map(|&g| case.gens[g].q_min).sum::<f64>()
                };
                push(Quantity::QGen(i), sign, format!("qg_bus{}", id(i)), bound);
            }
        }
        for sign in [1.0, -1.0] {
            for &i in &net.pq {
                let bus = &case.buses[i];
                let bound = if sign > 0.0 { bus.v_max } else { -bus.v_min };
                push(Quantity::Volt(i), sign, format!("v_bus{}", id(i)), bound);
            }
        }
        Self { names, rhs: DVector::from_vec(rhs), rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn finite_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.rhs[i].is_finite()).collect()
    }

    fn pick(q: Quantity, p_gen: &DVector<f64>, flows: &DVector<f64>, q_gen: &DVector<f64>, v: &DVector<f64>) -> f64 {
        match q {
            Quantity::PGen(g) => p_gen[g],
            Quantity::Flow(e) => flows[e],
            Quantity::QGen(i) => q_gen[i],
            Quantity::Volt(i) => v[i],
        }
    }

    /// Signed row values at a state.
    pub fn values(&self, state: &AcState) -> DVector<f64> {
        let v = state.v();
        DVector::from_iterator(
            self.len(),
            self.rows.iter().map(|&(q, s)| s * Self::pick(q, &state.p_gen, &state.flows, &state.q_gen, &v)),
        )
    }

    /// `values − rhs`; positive entries are violations.
    pub fn excess(&self, state: &AcState) -> DVector<f64> {
        self.values(state) - &self.rhs
    }

    pub(crate) fn derivative(&self, d: &QuantityChange) -> DVector<f64> {
        DVector::from_iterator(
            self.len(),
            self.rows.iter().map(|&(q, s)| s * Self::pick(q, &d.p_gen, &d.flows, &d.q_gen, &d.v)),
        )
    }
}

/// Sensitivity of the chance-constrained rows to each VRE error, at a state.
///
/// Entries are derivatives of the generator-side quantities, so the direct
/// `ξ` and `γξ` terms that separate net injections from generator output are
/// already included.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseJacobian {
    pub names: Vec<String>,
    /// `rows × n_vre`.
    pub j_matrix: DMatrix<f64>,
}

pub fn response_jacobian(
    net: &AcNetwork,
    state: &AcState,
    fleet: &VreFleet,
    rows: &AcRows,
) -> Result<ResponseJacobian, AcError> {
    let lin = Linearization::new(net, state)?;
    let n = net.n_bus();
    let ng = net.case.n_gen();
    let mut j_matrix = DMatrix::zeros(rows.len(), fleet.len());
    for (u, &b) in fleet.buses.iter().enumerate() {
        let mut dp = -&fleet.omega;
        dp[b] += 1.0;
        let mut dvre_p = DVector::zeros(n);
        dvre_p[b] = 1.0;
        let dvre_q = &dvre_p * fleet.gamma;
        let mut dq = DVector::zeros(n);
        for &i in &net.pq {
            dq[i] = dvre_q[i];
        }
        let (dva, dvm) = lin.voltage_change(&dp, &dq, &DVector::zeros(n));
        let dp_gen = DVector::from_fn(ng, |g, _| -fleet.alpha[g]);
        let change = lin.quantities(&dva, &dvm, &dp_gen, &dvre_p, &dvre_q);
        j_matrix.set_column(u, &rows.derivative(&change));
    }
    Ok(ResponseJacobian { names: rows.names.clone(), j_matrix })
}

/// Free dispatch variables: setpoints of every generator except the
/// balancing unit, then magnitudes at PV and slack buses.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlLayout {
    pub gens: Vec<usize>,
    pub buses: Vec<usize>,
}

impl ControlLayout {
    pub fn new(net: &AcNetwork) -> Self {
        let gens = (0..net.case.n_gen()).filter(|&g| g != net.balancing).collect();
        Self { gens, buses: net.fixed_v.clone() }
    }

    pub fn len(&self) -> usize {
        self.gens.len() + self.buses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self, net: &AcNetwork) -> Vec<String> {
        let case = &net.case;
        self.gens
            .iter()
            .map(|&g| format!("pg{g}_bus{}", case.buses[case.gens[g].bus].id))
            .chain(self.buses.iter().map(|&b| format!("vm_bus{}", case.buses[b].id)))
            .collect()
    }

    pub fn vector(&self, c: &AcControls) -> DVector<f64> {
        DVector::from_iterator(
            self.len(),
            self.gens.iter().map(|&g| c.p_gen[g]).chain(self.buses.iter().map(|&b| c.vm[b])),
        )
    }

    pub fn apply(&self, base: &AcControls, u: &DVector<f64>) -> AcControls {
        let mut c = base.clone();
        for (r, &g) in self.gens.iter().enumerate() {
            c.p_gen[g] = u[r];
        }
        for (r, &b) in self.buses.iter().enumerate() {
            c.vm[b] = u[self.gens.len() + r];
        }
        c
    }

    /// Box bounds: generator limits and magnitude limits.
    pub fn bounds(&self, net: &AcNetwork) -> (DVector<f64>, DVector<f64>) {
        let case = &net.case;
        let lo = self
            .gens
            .iter()
            .map(|&g| case.gens[g].p_min)
            .chain(self.buses.iter().map(|&b| case.buses[b].v_min.sqrt()));
        let hi = self
            .gens
            .iter()
            .map(|&g| case.gens[g].p_max)
            .chain(self.buses.iter().map(|&b| case.buses[b].v_max.sqrt()));
        (DVector::from_iterator(self.len(), lo), DVector::from_iterator(self.len(), hi))
    }
}

/// Row gradients `rows × controls` and the gradient of the balancing unit's
/// output, at a state with zero forecast error.
pub(crate) fn control_gradients(
    net: &AcNetwork,
    state: &AcState,
    rows: &AcRows,
    layout: &ControlLayout,
) -> Result<(DMatrix<f64>, DVector<f64>), AcError> {
    let lin = Linearization::new(net, state)?;
    let n = net.n_bus();
    let ng = net.case.n_gen();
    let zero_n = DVector::zeros(n);
    let mut grad = DMatrix::zeros(rows.len(), layout.len());
    let mut balancing = DVector::zeros(layout.len());
    for c in 0..layout.len() {
        let mut dp = DVector::zeros(n);
        let mut dvm_fixed = DVector::zeros(n);
        let mut dp_gen = DVector::zeros(ng);
        if c < layout.gens.len() {
            let g = layout.gens[c];
            dp_gen[g] = 1.0;
            dp[net.case.gens[g].bus] = 1.0;
        } else {
            dvm_fixed[layout.buses[c - layout.gens.len()]] = 1.0;
        }
        let (dva, dvm) = lin.voltage_change(&dp, &zero_n, &dvm_fixed);
        let change = lin.quantities(&dva, &dvm, &dp_gen, &zero_n, &zero_n);
        balancing[c] = change.p_gen[net.balancing];
        grad.set_column(c, &rows.derivative(&change));
    }
    Ok((grad, balancing))
}
