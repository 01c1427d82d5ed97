//! Bus admittance model, operating state and the Newton power-flow solver.

use std::collections::VecDeque;
use std::fmt::Write as _;

use nalgebra::{Complex, DMatrix, DVector};

use super::AcError;
use crate::case_io::{BusKind, NetworkCase, VreFleet};
use crate::scenarios::fmt_f64;

pub type C64 = Complex<f64>;

/// Admittance data and bus classification of a case.
///
/// Bus kinds are the ones used by the power flow: a PV bus without an
/// in-service generator is treated as PQ.
#[derive(Debug, Clone)]
pub struct AcNetwork {
    pub case: NetworkCase,
    pub ybus: DMatrix<C64>,
    /// `[Yff, Yft, Ytf, Ytt]` per branch.
    pub branch_y: Vec<[C64; 4]>,
    pub kinds: Vec<BusKind>,
    /// Non-slack buses in index order; their angles are unknowns.
    pub pvpq: Vec<usize>,
    /// PQ buses in index order; their magnitudes are unknowns.
    pub pq: Vec<usize>,
    /// PV buses followed by the slack bus; their magnitudes are controls.
    pub fixed_v: Vec<usize>,
    /// First generator at the slack bus; it takes up the power balance.
    pub balancing: usize,
    pub gens_at: Vec<Vec<usize>>,
    theta_pos: Vec<Option<usize>>,
    vm_pos: Vec<Option<usize>>,
}

impl AcNetwork {
    pub fn new(case: &NetworkCase) -> Result<Self, AcError> {
        let n = case.n_bus();
        check_connected(case)?;
        let gens_at = case.gens_at();
        let balancing = *gens_at[case.slack].first().ok_or(AcError::NoSlackGenerator)?;
        let kinds: Vec<BusKind> = (0..n)
            .map(|i| match case.buses[i].kind {
                BusKind::Pv if gens_at[i].is_empty() => BusKind::Pq,
                k => k,
            })
            .collect();
        let pvpq: Vec<usize> = (0..n).filter(|&i| i != case.slack).collect();
        let pq: Vec<usize> = (0..n).filter(|&i| kinds[i] == BusKind::Pq).collect();
        let mut fixed_v: Vec<usize> = (0..n).filter(|&i| kinds[i] == BusKind::Pv).collect();
        fixed_v.push(case.slack);
        let mut theta_pos = vec![None; n];
        for (r, &i) in pvpq.iter().enumerate() {
            theta_pos[i] = Some(r);
        }
        let mut vm_pos = vec![None; n];
        for (r, &i) in pq.iter().enumerate() {
            vm_pos[i] = Some(pvpq.len() + r);
        }

        let mut ybus = DMatrix::from_element(n, n, C64::new(0.0, 0.0));
        let mut branch_y = Vec::with_capacity(case.n_branch());
        for br in &case.branches {
            let ys = C64::new(1.0, 0.0) / C64::new(br.r, br.x);
            let ratio = C64::from_polar(br.tap, br.shift);
            let ytt = ys + C64::new(0.0, br.b / 2.0);
            let yff = ytt / (br.tap * br.tap);
            let yft = -ys / ratio.conj();
            let ytf = -ys / ratio;
            ybus[(br.from, br.from)] += yff;
            ybus[(br.from, br.to)] += yft;
            ybus[(br.to, br.from)] += ytf;
            ybus[(br.to, br.to)] += ytt;
            branch_y.push([yff, yft, ytf, ytt]);
        }
        for (i, bus) in case.buses.iter().enumerate() {
            ybus[(i, i)] += C64::new(bus.gs, bus.bs);
        }
        Ok(Self {
            case: case.clone(),
            ybus,
            branch_y,
            kinds,
            pvpq,
            pq,
            fixed_v,
            balancing,
            gens_at,
            theta_pos,
            vm_pos,
        })
    }

    pub fn n_bus(&self) -> usize {
        self.case.n_bus()
    }

    pub fn n_branch(&self) -> usize {
        self.case.n_branch()
    }

    pub fn slack(&self) -> usize {
        self.case.slack
    }

    /// Number of power-flow unknowns.
    pub fn n_unknowns(&self) -> usize {
        self.pvpq.len() + self.pq.len()
    }

    pub fn theta_pos(&self, bus: usize) -> Option<usize> {
        self.theta_pos[bus]
    }

    pub fn vm_pos(&self, bus: usize) -> Option<usize> {
        self.vm_pos[bus]
    }

    /// PV buses, whose net active injection enters the fixed-point distance.
    pub fn pv(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_bus()).filter(|&i| self.kinds[i] == BusKind::Pv)
    }

    /// Complex bus voltages.
    pub fn voltages(vm: &DVector<f64>, va: &DVector<f64>) -> DVector<C64> {
        DVector::from_iterator(vm.len(), vm.iter().zip(va.iter()).map(|(&m, &a)| C64::from_polar(m, a)))
    }

    /// Net complex injections `V ∘ conj(Y V)`.
    pub fn injections(&self, v: &DVector<C64>) -> DVector<C64> {
        let i = &self.ybus * v;
        v.zip_map(&i, |vk, ik| vk * ik.conj())
    }

    /// Directed active flows: from-end of every branch, then to-end.
    pub fn flows(&self, v: &DVector<C64>) -> DVector<f64> {
        let l = self.n_branch();
        let mut out = DVector::zeros(2 * l);
        for (k, br) in self.case.branches.iter().enumerate() {
            let [yff, yft, ytf, ytt] = self.branch_y[k];
            let (vf, vt) = (v[br.from], v[br.to]);
            out[k] = (vf * (yff * vf + yft * vt).conj()).re;
            out[l + k] = (vt * (ytf * vf + ytt * vt).conj()).re;
        }
        out
    }
}

fn check_connected(case: &NetworkCase) -> Result<(), AcError> {
    let n = case.n_bus();
    let mut adj = vec![Vec::new(); n];
    for br in &case.branches {
        adj[br.from].push(br.to);
        adj[br.to].push(br.from);
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([case.slack]);
    seen[case.slack] = true;
    while let Some(i) = queue.pop_front() {
        for &j in &adj[i] {
            if !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    match seen.iter().position(|&s| !s) {
        Some(i) => Err(AcError::Disconnected(case.buses[i].id)),
        None => Ok(()),
    }
}

/// Dispatch decisions: generator setpoints and regulated voltage magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct AcControls {
    /// Active setpoint per generator (p.u.); the balancing unit's entry is
    /// ignored by the power flow.
    pub p_gen: DVector<f64>,
    /// Voltage magnitude per bus; read only at PV and slack buses.
    pub vm: DVector<f64>,
}

impl AcControls {
    /// Setpoints from the case file (`Pg`, `Vg`).
    pub fn from_case(net: &AcNetwork) -> Self {
        let case = &net.case;
        let p_gen = DVector::from_iterator(case.n_gen(), case.gens.iter().map(|g| g.p0));
        let mut vm = DVector::from_element(case.n_bus(), 1.0);
        for &b in &net.fixed_v {
            vm[b] = case.gens[net.gens_at[b][0]].v_set;
        }
        Self { p_gen, vm }
    }

    /// Setpoints from a DC dispatch with case voltage setpoints.
    pub fn with_dispatch(net: &AcNetwork, p_gen: &DVector<f64>) -> Self {
        let mut c = Self::from_case(net);
        c.p_gen.copy_from(p_gen);
        c
    }
}

/// A solved operating point together with the forecast error that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct AcState {
    /// Voltage magnitudes (p.u.); `v = vm²`.
    pub vm: DVector<f64>,
    /// Voltage angles (rad); zero at the slack bus.
    pub va: DVector<f64>,
    /// Net active injection per bus.
    pub p: DVector<f64>,
    /// Net reactive injection per bus.
    pub q: DVector<f64>,
    /// Directed active flows, from-ends then to-ends.
    pub flows: DVector<f64>,
    /// Active output per generator after AGC.
    pub p_gen: DVector<f64>,
    /// Reactive generation per bus; zero at PQ buses.
    pub q_gen: DVector<f64>,
    /// VRE active and reactive output per bus.
    pub vre_p: DVector<f64>,
    pub vre_q: DVector<f64>,
    /// Forecast error per VRE unit.
    pub xi: DVector<f64>,
    pub controls: AcControls,
    pub iterations: usize,
    pub mismatch: f64,
}

impl AcState {
    pub fn v(&self) -> DVector<f64> {
        self.vm.map(|m| m * m)
    }

    /// Bus table: `bus,vm,va_rad,p,q,vre_p,vre_q,q_gen`.
    pub fn bus_csv(&self, net: &AcNetwork, digest_line: &str) -> String {
        let mut out = format!("{digest_line}\nbus,vm,va_rad,p,q,vre_p,vre_q,q_gen\n");
        for i in 0..net.n_bus() {
            let cells = [self.vm[i], self.va[i], self.p[i], self.q[i], self.vre_p[i], self.vre_q[i], self.q_gen[i]];
            let _ = writeln!(
                out,
                "{},{}",
                net.case.buses[i].id,
                cells.iter().map(|&v| fmt_f64(v)).collect::<Vec<_>>().join(",")
            );
        }
        out
    }

    /// Branch table: `branch,from,to,p_from,p_to`.
    pub fn branch_csv(&self, net: &AcNetwork, digest_line: &str) -> String {
        let l = net.n_branch();
        let mut out = format!("{digest_line}\nbranch,from,to,p_from,p_to\n");
        for (k, br) in net.case.branches.iter().enumerate() {
            let _ = writeln!(
                out,
                "{k},{},{},{},{}",
                net.case.buses[br.from].id,
                net.case.buses[br.to].id,
                fmt_f64(self.flows[k]),
                fmt_f64(self.flows[l + k])
            );
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PfOptions {
    /// Convergence threshold on `‖mismatch‖∞` (p.u.).
    pub tol: f64,
    pub max_iter: usize,
    /// Step halvings allowed when the mismatch grows.
    pub max_halvings: usize,
}

impl Default for PfOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 30, max_halvings: 5 }
    }
}

/// Specified injections for a dispatch and forecast error.
pub(crate) struct Injections {
    pub p: DVector<f64>,
    pub q: DVector<f64>,
    pub vre_p: DVector<f64>,
    pub vre_q: DVector<f64>,
}

/// Non-slack injections follow the AGC rule `Pₖ + ξₖ − Ωₖ·Σξ`; PQ buses see
/// an extra `γξₖ` of reactive injection.
pub(crate) fn specified(net: &AcNetwork, controls: &AcControls, fleet: &VreFleet, xi: &DVector<f64>) -> Injections {
    let n = net.n_bus();
    let case = &net.case;
    let total = xi.sum();
    let inc = fleet.incidence(n);
    let xi_bus = &inc * xi;
    let vre_p = &inc * &fleet.forecasts + &xi_bus;
    let vre_q = &xi_bus * fleet.gamma;
    let mut p = &vre_p - case.pd();
    let mut q = -case.qd();
    for (g, gen) in case.gens.iter().enumerate() {
        p[gen.bus] += controls.p_gen[g] - fleet.alpha[g] * total;
    }
    for i in 0..n {
        if net.kinds[i] == BusKind::Pq {
            q[i] += vre_q[i];
        }
    }
    Injections { p, q, vre_p, vre_q }
}

/// Real Jacobian blocks `∂S/∂θ` and `∂S/∂|V|` at the given voltages.
pub(crate) fn ds_dv(ybus: &DMatrix<C64>, v: &DVector<C64>) -> (DMatrix<C64>, DMatrix<C64>) {
    let n = v.len();
    let ibus = ybus * v;
    let vnorm = v.map(|x| if x.norm() > 0.0 { x / x.norm() } else { C64::new(1.0, 0.0) });
    let j = C64::new(0.0, 1.0);
    let mut dva = DMatrix::from_element(n, n, C64::new(0.0, 0.0));
    let mut dvm = DMatrix::from_element(n, n, C64::new(0.0, 0.0));
    for c in 0..n {
        for r in 0..n {
            let y = ybus[(r, c)];
            if y.re == 0.0 && y.im == 0.0 {
                continue;
            }
            dva[(r, c)] = -j * v[r] * (y * v[c]).conj();
            dvm[(r, c)] = v[r] * (y * vnorm[c]).conj();
        }
    }
    for i in 0..n {
        dva[(i, i)] += j * v[i] * ibus[i].conj();
        dvm[(i, i)] += ibus[i].conj() * vnorm[i];
    }
    (dva, dvm)
}

/// Reduced mismatch Jacobian over the unknowns `[θ_pvpq; |V|_pq]`.
pub(crate) fn reduced_jacobian(net: &AcNetwork, dva: &DMatrix<C64>, dvm: &DMatrix<C64>) -> DMatrix<f64> {
    let (npvpq, m) = (net.pvpq.len(), net.n_unknowns());
    let mut jac = DMatrix::zeros(m, m);
    for (r, &i) in net.pvpq.iter().enumerate() {
        for (c, &k) in net.pvpq.iter().enumerate() {
            jac[(r, c)] = dva[(i, k)].re;
        }
        for (c, &k) in net.pq.iter().enumerate() {
            jac[(r, npvpq + c)] = dvm[(i, k)].re;
        }
    }
    for (r, &i) in net.pq.iter().enumerate() {
        for (c, &k) in net.pvpq.iter().enumerate() {
            jac[(npvpq + r, c)] = dva[(i, k)].im;
        }
        for (c, &k) in net.pq.iter().enumerate() {
            jac[(npvpq + r, npvpq + c)] = dvm[(i, k)].im;
        }
    }
    jac
}

fn mismatch(net: &AcNetwork, s: &DVector<C64>, p: &DVector<f64>, q: &DVector<f64>) -> DVector<f64> {
    let npvpq = net.pvpq.len();
    let mut f = DVector::zeros(net.n_unknowns());
    for (r, &i) in net.pvpq.iter().enumerate() {
        f[r] = s[i].re - p[i];
    }
    for (r, &i) in net.pq.iter().enumerate() {
        f[npvpq + r] = s[i].im - q[i];
    }
    f
}

/// Newton–Raphson from `(vm, va)`; magnitudes at PV and slack buses and the
/// slack angle are left as given.
pub(crate) fn newton(
    net: &AcNetwork,
    mut vm: DVector<f64>,
    mut va: DVector<f64>,
    p: &DVector<f64>,
    q: &DVector<f64>,
    opts: &PfOptions,
) -> Result<(DVector<f64>, DVector<f64>, usize, f64), AcError> {
    let npvpq = net.pvpq.len();
    let mut v = AcNetwork::voltages(&vm, &va);
    let mut f = mismatch(net, &net.injections(&v), p, q);
    let mut norm = f.amax();
    for iter in 0..=opts.max_iter {
        if !norm.is_finite() {
            break;
        }
        if norm <= opts.tol {
            return Ok((vm, va, iter, norm));
        }
        if iter == opts.max_iter {
            break;
        }
        let (dva, dvm) = ds_dv(&net.ybus, &v);
        let jac = reduced_jacobian(net, &dva, &dvm);
        let dx = jac.lu().solve(&(-&f)).ok_or(AcError::Singular)?;
        if dx.iter().any(|x| !x.is_finite()) {
            return Err(AcError::Singular);
        }
        let mut step = 1.0;
        let mut halvings = 0;
        loop {
            let mut vm_t = vm.clone();
            let mut va_t = va.clone();
            for (r, &i) in net.pvpq.iter().enumerate() {
                va_t[i] += step * dx[r];
            }
            for (r, &i) in net.pq.iter().enumerate() {
                vm_t[i] += step * dx[npvpq + r];
            }
            let v_t = AcNetwork::voltages(&vm_t, &va_t);
            let f_t = mismatch(net, &net.injections(&v_t), p, q);
            let norm_t = f_t.amax();
            if (norm_t.is_finite() && norm_t < norm) || halvings == opts.max_halvings {
                (vm, va, v, f, norm) = (vm_t, va_t, v_t, f_t, norm_t);
                break;
            }
            step *= 0.5;
            halvings += 1;
        }
    }
    Err(AcError::NoConvergence { iterations: opts.max_iter, mismatch: norm })
}

/// Assemble the full state from solved voltages.
pub(crate) fn build_state(
    net: &AcNetwork,
    controls: &AcControls,
    fleet: &VreFleet,
    xi: &DVector<f64>,
    inj: Injections,
    solved: (DVector<f64>, DVector<f64>, usize, f64),
) -> AcState {
    let (vm, va, iterations, mismatch) = solved;
    let case = &net.case;
    let v = AcNetwork::voltages(&vm, &va);
    let s = net.injections(&v);
    let p = s.map(|x| x.re);
    let q = s.map(|x| x.im);
    let total = xi.sum();
    let mut p_gen = DVector::from_iterator(
        case.n_gen(),
        (0..case.n_gen()).map(|g| controls.p_gen[g] - fleet.alpha[g] * total),
    );
    let slack = case.slack;
    let others: f64 = net.gens_at[slack].iter().filter(|&&g| g != net.balancing).map(|&g| p_gen[g]).sum();
    p_gen[net.balancing] = p[slack] + case.buses[slack].pd - inj.vre_p[slack] - others;
    let mut q_gen = DVector::zeros(net.n_bus());
    for i in 0..net.n_bus() {
        if net.kinds[i] != BusKind::Pq {
            q_gen[i] = q[i] + case.buses[i].qd - inj.vre_q[i];
        }
    }
    AcState {
        flows: net.flows(&v),
        vm,
        va,
        p,
        q,
        p_gen,
        q_gen,
        vre_p: inj.vre_p,
        vre_q: inj.vre_q,
        xi: xi.clone(),
        controls: controls.clone(),
        iterations,
        mismatch,
    }
}

/// Solve the power flow from a flat start.
pub fn pf_solve(net: &AcNetwork, controls: &AcControls, fleet: &VreFleet, opts: &PfOptions) -> Result<AcState, AcError> {
    let n = net.n_bus();
    let mut vm = DVector::from_element(n, 1.0);
    for &b in &net.fixed_v {
        vm[b] = controls.vm[b];
    }
    pf_solve_from(net, controls, fleet, &DVector::zeros(fleet.len()), vm, DVector::zeros(n), opts)
}

/// Power flow started from the given voltages; magnitudes at PV and slack
/// buses are reset to the controls.
pub(crate) fn pf_solve_from(
    net: &AcNetwork,
    controls: &AcControls,
    fleet: &VreFleet,
    xi: &DVector<f64>,
    mut vm: DVector<f64>,
    mut va: DVector<f64>,
    opts: &PfOptions,
) -> Result<AcState, AcError> {
    if controls.p_gen.len() != net.case.n_gen() || controls.vm.len() != net.n_bus() || xi.len() != fleet.len() {
        return Err(AcError::Dimension(format!(
            "controls ({} gens, {} buses) or error ({}) do not fit the case",
            controls.p_gen.len(),
            controls.vm.len(),
            xi.len()
        )));
    }
    for &b in &net.fixed_v {
        vm[b] = controls.vm[b];
    }
    va[net.slack()] = 0.0;
    let inj = specified(net, controls, fleet, xi);
    let solved = newton(net, vm, va, &inj.p, &inj.q, opts)?;
    Ok(build_state(net, controls, fleet, xi, inj, solved))
}

/// Warm-started power flow at a new dispatch.
pub fn pf_solve_warm(
    net: &AcNetwork,
    controls: &AcControls,
    fleet: &VreFleet,
    start: &AcState,
    opts: &PfOptions,
) -> Result<AcState, AcError> {
    pf_solve_from(net, controls, fleet, &DVector::zeros(fleet.len()), start.vm.clone(), start.va.clone(), opts)
}
