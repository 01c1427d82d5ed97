//! Dense primal active-set solver for convex quadratic programs
//!
//! ```text
//! minimize    ½ xᵀHx + gᵀx + c₀
//! subject to  Ax ≤ b,  Ex = f
//! ```
//!
//! `H` only needs to be positive semidefinite. Directions of zero curvature
//! are followed as rays until a constraint blocks them, which also makes the
//! routine a (slow but exact) LP solver. Infeasibility is detected by a
//! phase-1 LP whose multipliers form a Farkas certificate.
//!
//! Rows with `b = +∞` are ignored and get a zero multiplier.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("objective is unbounded below on the feasible set")]
    Unbounded,
    #[error("numerical failure: {0}")]
    Numerical(String),
}

/// `½ xᵀHx + gᵀx + c₀`
#[derive(Debug, Clone, PartialEq)]
pub struct QuadCost {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub c0: f64,
}

impl QuadCost {
    pub fn new(h: DMatrix<f64>, g: DVector<f64>, c0: f64) -> Self {
        Self { h, g, c0 }
    }

    pub fn linear(g: DVector<f64>) -> Self {
        let n = g.len();
        Self { h: DMatrix::zeros(n, n), g, c0: 0.0 }
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.g.dot(x) + self.c0
    }
}

/// `Ax ≤ b, Ex = f`
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub e: DMatrix<f64>,
    pub f: DVector<f64>,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, e: DMatrix<f64>, f: DVector<f64>) -> Self {
        Self { a, b, e, f }
    }

    pub fn inequalities(a: DMatrix<f64>, b: DVector<f64>) -> Self {
        let n = a.ncols();
        Self { a, b, e: DMatrix::zeros(0, n), f: DVector::zeros(0) }
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
}

/// Certificate `y ≥ 0, μ` with `Aᵀy + Eᵀμ = 0` and `bᵀy + fᵀμ < 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct FarkasCertificate {
    pub y: DVector<f64>,
    pub mu: DVector<f64>,
}

impl FarkasCertificate {
    /// `(‖Aᵀy + Eᵀμ‖∞, bᵀy + fᵀμ)` over the finite rows.
    pub fn check(&self, sys: &LinearSystem) -> (f64, f64) {
        let mut comb = sys.e.tr_mul(&self.mu);
        let mut value = sys.f.dot(&self.mu);
        for i in 0..sys.a.nrows() {
            if self.y[i] != 0.0 {
                comb += sys.a.row(i).transpose() * self.y[i];
                value += sys.b[i] * self.y[i];
            }
        }
        (comb.amax(), value)
    }
}

/// KKT residuals of an optimal point, all in absolute terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpResult {
    pub status: QpStatus,
    pub x: DVector<f64>,
    pub value: f64,
    /// Multipliers of `Ax ≤ b` (nonnegative).
    pub duals: DVector<f64>,
    /// Multipliers of `Ex = f`.
    pub eq_duals: DVector<f64>,
    pub kkt: KktResiduals,
    pub certificate: Option<FarkasCertificate>,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpOptions {
    /// Starting point; need not be feasible.
    pub warm_start: Option<DVector<f64>>,
    /// Absolute feasibility tolerance on `Ax ≤ b` and `Ex = f`.
    pub feas_tol: f64,
    /// Stationarity must hold to this tolerance relative to the problem scale.
    pub kkt_tol: f64,
    pub max_iter: Option<usize>,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self { warm_start: None, feas_tol: 1e-9, kkt_tol: 1e-7, max_iter: None }
    }
}

/// Solve a convex QP. See the module docs for the problem form.
pub fn qp_solve(cost: &QuadCost, sys: &LinearSystem, opts: &QpOptions) -> Result<QpResult, QpError> {
    let n = cost.dim();
    check_dims(cost, sys)?;
    if sys.b.iter().any(|v| v.is_nan() || *v == f64::NEG_INFINITY) {
        return Err(QpError::Dimension("right-hand side contains NaN or -inf".into()));
    }
    let finite: Vec<usize> = (0..sys.a.nrows()).filter(|&i| sys.b[i] < f64::INFINITY).collect();
    let a = sys.a.select_rows(finite.iter());
    let b = DVector::from_iterator(finite.len(), finite.iter().map(|&i| sys.b[i]));
    let e = &sys.e;
    let f = &sys.f;

    let mut x = opts.warm_start.clone().unwrap_or_else(|| DVector::zeros(n));
    if x.len() != n {
        return Err(QpError::Dimension(format!("warm start has {} entries, expected {n}", x.len())));
    }
    if e.nrows() > 0 {
        let r = f - e * &x;
        if r.amax() > opts.feas_tol {
            let dx = lstsq(e, &r)?;
            x += dx;
            if (f - e * &x).amax() > opts.feas_tol.max(1e-9 * (1.0 + f.amax())) {
                return infeasible_equalities(sys, n);
            }
        }
    }

    let max_viol = max_violation(&a, &b, &x);
    let mut iterations = 0;
    if max_viol > opts.feas_tol {
        let (t_star, x1, y, mu, it) = phase_one(&a, &b, e, &x, opts)?;
        iterations += it;
        if t_star > opts.feas_tol {
            let mut y_full = DVector::zeros(sys.a.nrows());
            for (r, &i) in finite.iter().enumerate() {
                y_full[i] = y[r];
            }
            let cert = FarkasCertificate { y: y_full, mu };
            return Ok(QpResult {
                status: QpStatus::Infeasible,
                x: x1,
                value: f64::INFINITY,
                duals: DVector::zeros(sys.a.nrows()),
                eq_duals: DVector::zeros(e.nrows()),
                kkt: KktResiduals::default(),
                certificate: Some(cert),
                iterations,
            });
        }
        x = x1;
    }

    let core = active_set(&cost.h, &cost.g, &a, &b, e, x, opts)?;
    iterations += core.iterations;
    let mut duals = DVector::zeros(sys.a.nrows());
    for (r, &i) in finite.iter().enumerate() {
        duals[i] = core.lambda[r];
    }
    let kkt = kkt_residuals(cost, &a, &b, e, f, &core.x, &core.lambda, &core.mu);
    let scale = 1.0 + cost.g.amax() + (&cost.h * &core.x).amax();
    if kkt.stationarity > opts.kkt_tol * scale || kkt.primal > opts.kkt_tol * (1.0 + b.amax()) {
        return Err(QpError::Numerical(format!(
            "KKT residuals too large after convergence: {kkt:?}"
        )));
    }
    Ok(QpResult {
        status: QpStatus::Optimal,
        value: cost.eval(&core.x),
        x: core.x,
        duals,
        eq_duals: core.mu,
        kkt,
        certificate: None,
        iterations,
    })
}

fn check_dims(cost: &QuadCost, sys: &LinearSystem) -> Result<(), QpError> {
    let n = cost.dim();
    let ok = cost.h.nrows() == n
        && cost.h.ncols() == n
        && sys.a.ncols() == n
        && sys.b.len() == sys.a.nrows()
        && sys.e.ncols() == n
        && sys.f.len() == sys.e.nrows();
    if ok {
        Ok(())
    } else {
        Err(QpError::Dimension(format!(
            "H {}x{}, g {}, A {}x{}, b {}, E {}x{}, f {}",
            cost.h.nrows(),
            cost.h.ncols(),
            n,
            sys.a.nrows(),
            sys.a.ncols(),
            sys.b.len(),
            sys.e.nrows(),
            sys.e.ncols(),
            sys.f.len()
        )))
    }
}

fn max_violation(a: &DMatrix<f64>, b: &DVector<f64>, x: &DVector<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    (a * x - b).max().max(0.0)
}

fn lstsq(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>, QpError> {
    let svd = SVD::new(m.clone(), true, true);
    let tol = 1e-12 * svd.singular_values.max().max(1.0);
    svd.solve(rhs, tol).map_err(|e| QpError::Numerical(e.to_string()))
}

/// Inconsistent `Ex = f`: the residual direction certifies it.
fn infeasible_equalities(sys: &LinearSystem, n: usize) -> Result<QpResult, QpError> {
    let e = &sys.e;
    let x = lstsq(e, &sys.f)?;
    // r = f − Ex is orthogonal to range(E), so Eᵀr = 0 and fᵀ(−r) = −‖r‖² < 0.
    let r = &sys.f - e * &x;
    Ok(QpResult {
        status: QpStatus::Infeasible,
        x: DVector::zeros(n),
        value: f64::INFINITY,
        duals: DVector::zeros(sys.a.nrows()),
        eq_duals: DVector::zeros(e.nrows()),
        kkt: KktResiduals::default(),
        certificate: Some(FarkasCertificate { y: DVector::zeros(sys.a.nrows()), mu: -r }),
        iterations: 0,
    })
}

/// `min t  s.t.  Ax − t ≤ b, t ≥ 0, Ex = f`, started at the given `x`.
#[allow(clippy::type_complexity)]
fn phase_one(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    e: &DMatrix<f64>,
    x0: &DVector<f64>,
    opts: &QpOptions,
) -> Result<(f64, DVector<f64>, DVector<f64>, DVector<f64>, usize), QpError> {
    let (m, n) = a.shape();
    let mut a1 = DMatrix::zeros(m + 1, n + 1);
    a1.view_mut((0, 0), (m, n)).copy_from(a);
    for i in 0..m {
        a1[(i, n)] = -1.0;
    }
    a1[(m, n)] = -1.0;
    let mut b1 = DVector::zeros(m + 1);
    b1.rows_mut(0, m).copy_from(b);
    let mut e1 = DMatrix::zeros(e.nrows(), n + 1);
    e1.view_mut((0, 0), (e.nrows(), n)).copy_from(e);
    let mut g1 = DVector::zeros(n + 1);
    g1[n] = 1.0;
    let h1 = DMatrix::zeros(n + 1, n + 1);
    let mut start = DVector::zeros(n + 1);
    start.rows_mut(0, n).copy_from(x0);
    start[n] = max_violation(a, b, x0);
    let core = active_set(&h1, &g1, &a1, &b1, &e1, start, opts)?;
    let t = core.x[n];
    let y = core.lambda.rows(0, m).into_owned();
    Ok((t, core.x.rows(0, n).into_owned(), y, core.mu, core.iterations))
}

struct CoreResult {
    x: DVector<f64>,
    lambda: DVector<f64>,
    mu: DVector<f64>,
    iterations: usize,
}

/// Orthonormal basis of the null space of `c` (rows are constraints).
fn null_space(c: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    if c.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    let rows = c.nrows().max(n);
    let mut padded = DMatrix::zeros(rows, n);
    padded.view_mut((0, 0), (c.nrows(), n)).copy_from(c);
    let svd = SVD::new(padded, false, true);
    let v_t = svd.v_t.expect("requested V");
    let smax = svd.singular_values.max();
    let tol = 1e-10 * smax.max(1.0);
    let null: Vec<usize> = (0..n).filter(|&i| svd.singular_values[i] <= tol).collect();
    let mut z = DMatrix::zeros(n, null.len());
    for (col, &i) in null.iter().enumerate() {
        z.set_column(col, &v_t.row(i).transpose());
    }
    z
}

#[allow(clippy::too_many_arguments)]
fn active_set(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    e: &DMatrix<f64>,
    mut x: DVector<f64>,
    opts: &QpOptions,
) -> Result<CoreResult, QpError> {
    let (m, n) = a.shape();
    let me = e.nrows();
    let max_iter = opts.max_iter.unwrap_or(100 * (n + m) + 1000);
    let row_norm: Vec<f64> = (0..m).map(|i| a.row(i).norm().max(1e-300)).collect();
    let hscale = h.amax().max(1.0);
    let mut working: Vec<usize> = Vec::new();
    let mut in_working = vec![false; m];
    let mut degenerate_streak = 0usize;

    for iter in 0..max_iter {
        let bland = degenerate_streak > 2 * (n + 1);
        let q = h * &x + g;
        let mut c = DMatrix::zeros(me + working.len(), n);
        c.view_mut((0, 0), (me, n)).copy_from(e);
        for (r, &i) in working.iter().enumerate() {
            c.set_row(me + r, &a.row(i));
        }
        let z = null_space(&c, n);
        let gscale = 1.0 + q.amax();

        let mut step: Option<(DVector<f64>, f64)> = None;
        if z.ncols() > 0 {
            let gr = z.tr_mul(&q);
            if gr.amax() > 1e-13 * gscale {
                let hr = z.tr_mul(&(h * &z));
                let eig = SymmetricEigen::new(hr);
                let lmax = eig.eigenvalues.amax();
                let flat_tol = 1e-10 * hscale.max(lmax);
                let mut ray = DVector::zeros(z.ncols());
                let mut newton = DVector::zeros(z.ncols());
                for (j, &lam) in eig.eigenvalues.iter().enumerate() {
                    let v = eig.eigenvectors.column(j);
                    let coef = v.dot(&gr);
                    if lam <= flat_tol {
                        ray -= v * coef;
                    } else {
                        newton -= v * (coef / lam);
                    }
                }
                if ray.norm() > 1e-12 * gscale {
                    step = Some((&z * ray, f64::INFINITY));
                } else if newton.amax() > 0.0 {
                    step = Some((&z * newton, 1.0));
                }
            }
        }

        match step {
            Some((p, alpha_max)) if p.amax() > 1e-15 * (1.0 + x.amax()) => {
                let ap = a * &p;
                let slack = b - a * &x;
                let mut alpha = alpha_max;
                let mut blocking: Option<usize> = None;
                let pn = p.norm();
                for i in 0..m {
                    if in_working[i] || ap[i] <= 1e-12 * row_norm[i] * pn {
                        continue;
                    }
                    let ai = (slack[i].max(0.0)) / ap[i];
                    // Strict comparison keeps the lowest index on ties.
                    if ai < alpha {
                        alpha = ai;
                        blocking = Some(i);
                    }
                }
                if alpha.is_infinite() {
                    return Err(QpError::Unbounded);
                }
                if alpha * pn <= 1e-14 * (1.0 + x.amax()) {
                    degenerate_streak += 1;
                } else {
                    degenerate_streak = 0;
                }
                x += &p * alpha;
                if let Some(i) = blocking {
                    working.push(i);
                    in_working[i] = true;
                }
            }
            _ => {
                // Stationary on the working face: inspect multipliers.
                let (mu, lambda) = multipliers(&c, &q, me)?;
                let neg_tol = 1e-10 * gscale;
                let drop = if bland {
                    (0..working.len())
                        .filter(|&r| lambda[r] < -neg_tol)
                        .min_by_key(|&r| working[r])
                } else {
                    (0..working.len())
                        .filter(|&r| lambda[r] < -neg_tol)
                        .min_by(|&r, &s| lambda[r].total_cmp(&lambda[s]).then(working[r].cmp(&working[s])))
                };
                match drop {
                    None => {
                        let mut full = DVector::zeros(m);
                        for (r, &i) in working.iter().enumerate() {
                            full[i] = lambda[r].max(0.0);
                        }
                        return Ok(CoreResult { x, lambda: full, mu, iterations: iter + 1 });
                    }
                    Some(r) => {
                        in_working[working[r]] = false;
                        working.remove(r);
                        degenerate_streak += 1;
                    }
                }
            }
        }
    }
    Err(QpError::Numerical(format!("active-set iteration limit {max_iter} reached")))
}

/// Least-squares multipliers for `Hx + g + Cᵀν = 0`; the first `me` entries
/// of `ν` belong to equalities.
fn multipliers(
    c: &DMatrix<f64>,
    q: &DVector<f64>,
    me: usize,
) -> Result<(DVector<f64>, DVector<f64>), QpError> {
    if c.nrows() == 0 {
        return Ok((DVector::zeros(0), DVector::zeros(0)));
    }
    let nu = lstsq(&c.transpose(), &(-q))?;
    let mu = nu.rows(0, me).into_owned();
    let lambda = nu.rows(me, c.nrows() - me).into_owned();
    Ok((mu, lambda))
}

#[allow(clippy::too_many_arguments)]
fn kkt_residuals(
    cost: &QuadCost,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    e: &DMatrix<f64>,
    f: &DVector<f64>,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
    mu: &DVector<f64>,
) -> KktResiduals {
    let grad = &cost.h * x + &cost.g + a.tr_mul(lambda) + e.tr_mul(mu);
    let slack = b - a * x;
    let mut primal = if e.nrows() > 0 { (f - e * x).amax() } else { 0.0 };
    let mut comp: f64 = 0.0;
    for i in 0..a.nrows() {
        primal = primal.max(-slack[i]);
        comp = comp.max((lambda[i] * slack[i]).abs());
    }
    let dual = lambda.iter().fold(0.0f64, |acc, &l| acc.max(-l));
    KktResiduals { stationarity: grad.amax(), primal: primal.max(0.0), dual, complementarity: comp }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    #[test]
    fn projection_onto_halfline() {
        let cost = QuadCost::new(DMatrix::from_element(1, 1, 2.0), dv(&[0.0]), 0.0);
        let sys = LinearSystem::inequalities(DMatrix::from_element(1, 1, -1.0), dv(&[-3.0]));
        let r = qp_solve(&cost, &sys, &QpOptions::default()).unwrap();
        assert_eq!(r.status, QpStatus::Optimal);
        assert!((r.x[0] - 3.0).abs() < 1e-12);
        assert!((r.value - 9.0).abs() < 1e-10);
        assert!((r.duals[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn contradictory_bounds_are_certified() {
        let cost = QuadCost::linear(dv(&[1.0]));
        let sys = LinearSystem::inequalities(DMatrix::from_column_slice(2, 1, &[-1.0, 1.0]), dv(&[-1.0, 0.0]));
        let r = qp_solve(&cost, &sys, &QpOptions::default()).unwrap();
        assert_eq!(r.status, QpStatus::Infeasible);
        let cert = r.certificate.unwrap();
        assert!(cert.y.iter().all(|&y| y >= 0.0));
        let (comb, value) = cert.check(&sys);
        assert!(comb < 1e-9);
        assert!(value < -1e-6);
    }

    #[test]
    fn unbounded_lp() {
        let cost = QuadCost::linear(dv(&[-1.0, 0.0]));
        let sys = LinearSystem::inequalities(DMatrix::from_row_slice(1, 2, &[0.0, 1.0]), dv(&[1.0]));
        assert_eq!(qp_solve(&cost, &sys, &QpOptions::default()), Err(QpError::Unbounded));
    }

    #[test]
    fn lp_vertex_with_equality() {
        // min x + 2y  s.t. x + y = 1, x, y ≥ 0, x ≤ 0.7
        let cost = QuadCost::linear(dv(&[1.0, 2.0]));
        let a = DMatrix::from_row_slice(3, 2, &[-1.0, 0.0, 0.0, -1.0, 1.0, 0.0]);
        let sys = LinearSystem::new(a, dv(&[0.0, 0.0, 0.7]), DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), dv(&[1.0]));
        let r = qp_solve(&cost, &sys, &QpOptions::default()).unwrap();
        assert!((r.x[0] - 0.7).abs() < 1e-10 && (r.x[1] - 0.3).abs() < 1e-10);
        assert!((r.value - 1.3).abs() < 1e-10);
        assert!(r.kkt.max() < 1e-9);
    }

    #[test]
    fn infinite_rows_are_ignored() {
        let cost = QuadCost::new(DMatrix::identity(1, 1), dv(&[-5.0]), 0.0);
        let sys = LinearSystem::inequalities(DMatrix::from_column_slice(2, 1, &[1.0, 1.0]), dv(&[f64::INFINITY, 2.0]));
        let r = qp_solve(&cost, &sys, &QpOptions::default()).unwrap();
        assert!((r.x[0] - 2.0).abs() < 1e-12);
        assert_eq!(r.duals[0], 0.0);
    }

    #[test]
    fn inconsistent_equalities() {
        let cost = QuadCost::linear(dv(&[0.0]));
        let sys = LinearSystem::new(
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
            DMatrix::from_column_slice(2, 1, &[1.0, 1.0]),
            dv(&[0.0, 1.0]),
        );
        let r = qp_solve(&cost, &sys, &QpOptions::default()).unwrap();
        assert_eq!(r.status, QpStatus::Infeasible);
        let (comb, value) = r.certificate.unwrap().check(&sys);
        assert!(comb < 1e-12 && value < 0.0);
    }
}
