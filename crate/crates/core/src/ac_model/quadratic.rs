//! Power-flow quantities as quadratic forms in rectangular voltages.
//!
//! With `X = [Re V; Im V] = [√v·cosθ; √v·sinθ]`, every injection, squared
//! magnitude and directed flow is `XᵀMX` for a sparse symmetric `M`. For a
//! complex row operator `T` (so that `conj(S) = Vᴴ T V`) with real and
//! imaginary parts `A`, `C`:
//!
//! ```text
//! P = Xᵀ [[A, −C], [C, A]] X        Q = Xᵀ [[−C, −A], [A, −C]] X
//! ```
//!
//! before symmetrization.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use super::network::{AcNetwork, AcState, C64};

/// Sparse symmetric matrix stored as `(row, col, value)` with both triangles.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuadForm {
    pub entries: Vec<(usize, usize, f64)>,
}

impl QuadForm {
    fn from_map(map: BTreeMap<(usize, usize), f64>) -> Self {
        Self { entries: map.into_iter().filter(|(_, v)| *v != 0.0).map(|((i, j), v)| (i, j, v)).collect() }
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        self.entries.iter().map(|&(i, j, v)| v * x[i] * x[j]).sum()
    }

    pub fn to_dense(&self, dim: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(dim, dim);
        for &(i, j, v) in &self.entries {
            m[(i, j)] += v;
        }
        m
    }
}

/// Adds `½(M + Mᵀ)` contributions for a complex operator on row `k`.
struct Builder {
    n: usize,
    p: BTreeMap<(usize, usize), f64>,
    q: BTreeMap<(usize, usize), f64>,
}

impl Builder {
    fn new(n: usize) -> Self {
        Self { n, p: BTreeMap::new(), q: BTreeMap::new() }
    }

    fn sym(map: &mut BTreeMap<(usize, usize), f64>, i: usize, j: usize, v: f64) {
        *map.entry((i, j)).or_default() += 0.5 * v;
        *map.entry((j, i)).or_default() += 0.5 * v;
    }

    /// Operator `T = e_k tᵀ` where `t[j] = y`.
    fn add(&mut self, k: usize, j: usize, y: C64) {
        let (a, c, n) = (y.re, y.im, self.n);
        Self::sym(&mut self.p, k, j, a);
        Self::sym(&mut self.p, k, n + j, -c);
        Self::sym(&mut self.p, n + k, j, c);
        Self::sym(&mut self.p, n + k, n + j, a);
        Self::sym(&mut self.q, k, j, -c);
        Self::sym(&mut self.q, k, n + j, -a);
        Self::sym(&mut self.q, n + k, j, a);
        Self::sym(&mut self.q, n + k, n + j, -c);
    }

    fn finish(self) -> (QuadForm, QuadForm) {
        (QuadForm::from_map(self.p), QuadForm::from_map(self.q))
    }
}

/// Quadratic forms for active and reactive injections, squared magnitudes
/// and directed active flows.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticFormModel {
    pub n: usize,
    /// Active injection per bus.
    pub y: Vec<QuadForm>,
    /// Reactive injection per bus.
    pub y_bar: Vec<QuadForm>,
    /// Active flow per directed branch end, from-ends then to-ends.
    pub y_flow: Vec<QuadForm>,
    /// Squared magnitude per bus.
    pub m: Vec<QuadForm>,
}

impl QuadraticFormModel {
    pub fn new(net: &AcNetwork) -> Self {
        let n = net.n_bus();
        let mut y = Vec::with_capacity(n);
        let mut y_bar = Vec::with_capacity(n);
        let mut m = Vec::with_capacity(n);
        for k in 0..n {
            let mut b = Builder::new(n);
            for j in 0..n {
                let yk = net.ybus[(k, j)];
                if yk.re != 0.0 || yk.im != 0.0 {
                    b.add(k, j, yk);
                }
            }
            let (p, q) = b.finish();
            y.push(p);
            y_bar.push(q);
            m.push(QuadForm { entries: vec![(k, k, 1.0), (n + k, n + k, 1.0)] });
        }
        let l = net.n_branch();
        let mut from_end = Vec::with_capacity(l);
        let mut to_end = Vec::with_capacity(l);
        for (k, br) in net.case.branches.iter().enumerate() {
            let [yff, yft, ytf, ytt] = net.branch_y[k];
            let mut b = Builder::new(n);
            b.add(br.from, br.from, yff);
            b.add(br.from, br.to, yft);
            from_end.push(b.finish().0);
            let mut b = Builder::new(n);
            b.add(br.to, br.from, ytf);
            b.add(br.to, br.to, ytt);
            to_end.push(b.finish().0);
        }
        from_end.extend(to_end);
        Self { n, y, y_bar, y_flow: from_end, m }
    }

    /// `X = [√v·cosθ; √v·sinθ]`.
    pub fn rectangular(vm: &DVector<f64>, va: &DVector<f64>) -> DVector<f64> {
        let n = vm.len();
        DVector::from_fn(2 * n, |i, _| if i < n { vm[i] * va[i].cos() } else { vm[i - n] * va[i - n].sin() })
    }
}

/// Residuals `XᵀMX − w` for the blocks `[P; Q; v; ℓ]` of a state.
pub fn quadratic_residuals(model: &QuadraticFormModel, state: &AcState) -> DVector<f64> {
    let x = QuadraticFormModel::rectangular(&state.vm, &state.va);
    let v = state.v();
    let n = model.n;
    let l2 = model.y_flow.len();
    let mut r = DVector::zeros(3 * n + l2);
    for k in 0..n {
        r[k] = model.y[k].eval(&x) - state.p[k];
        r[n + k] = model.y_bar[k].eval(&x) - state.q[k];
        r[2 * n + k] = model.m[k].eval(&x) - v[k];
    }
    for e in 0..l2 {
        r[3 * n + e] = model.y_flow[e].eval(&x) - state.flows[e];
    }
    r
}
