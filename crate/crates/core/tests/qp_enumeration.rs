mod common;

use common::{box_rows, subsets, Rng};
use drcc::scenario_mip::{qp_solve, LinearSystem, QpOptions, QpStatus, QuadCost};
use nalgebra::{DMatrix, DVector};

/// Minimum over all active sets: solve the equality-constrained KKT system
/// for each subset and keep feasible points. Exact for strictly convex
/// objectives and, with `n`-row subsets, for bounded LPs.
fn enumerate(cost: &QuadCost, a: &DMatrix<f64>, b: &DVector<f64>, sizes: std::ops::RangeInclusive<usize>) -> f64 {
    let n = cost.dim();
    let mut best = f64::INFINITY;
    for r in sizes {
        for set in subsets(a.nrows(), r) {
            let m = n + r;
            let mut kkt = DMatrix::zeros(m, m);
            let mut rhs = DVector::zeros(m);
            kkt.view_mut((0, 0), (n, n)).copy_from(&cost.h);
            rhs.rows_mut(0, n).copy_from(&(-&cost.g));
            for (i, &row) in set.iter().enumerate() {
                for j in 0..n {
                    kkt[(n + i, j)] = a[(row, j)];
                    kkt[(j, n + i)] = a[(row, j)];
                }
                rhs[n + i] = b[row];
            }
            let Some(sol) = kkt.lu().solve(&rhs) else { continue };
            let x = sol.rows(0, n).into_owned();
            if (a * &x - b).max() <= 1e-9 {
                best = best.min(cost.eval(&x));
            }
        }
    }
    best
}

fn random_rows(rng: &mut Rng, n: usize, m: usize) -> (DMatrix<f64>, DVector<f64>) {
    let (ba, bb) = box_rows(n, -3.0, 3.0);
    let a = rng.matrix(m, n, -1.0, 1.0);
    // Keep a random interior point feasible.
    let x0 = rng.vector(n, -1.0, 1.0);
    let b = &a * &x0 + rng.vector(m, 0.0, 1.0);
    let mut full_a = DMatrix::zeros(m + 2 * n, n);
    full_a.view_mut((0, 0), (m, n)).copy_from(&a);
    full_a.view_mut((m, 0), (2 * n, n)).copy_from(&ba);
    let mut full_b = DVector::zeros(m + 2 * n);
    full_b.rows_mut(0, m).copy_from(&b);
    full_b.rows_mut(m, 2 * n).copy_from(&bb);
    (full_a, full_b)
}

#[test]
fn strictly_convex_qps_match_active_set_enumeration() {
    let mut rng = Rng::new(2024);
    for case in 0..60 {
        let n = 2 + rng.below(2);
        let m = 2 + rng.below(4);
        let cost = QuadCost::new(rng.spd(n, 0.1), rng.vector(n, -4.0, 4.0), 0.0);
        let (a, b) = random_rows(&mut rng, n, m);
        let sys = LinearSystem::inequalities(a.clone(), b.clone());
        let res = qp_solve(&cost, &sys, &QpOptions::default()).unwrap();
        assert_eq!(res.status, QpStatus::Optimal);
        let oracle = enumerate(&cost, &a, &b, 0..=n);
        assert!(
            (res.value - oracle).abs() <= 1e-7 * oracle.abs().max(1.0),
            "case {case}: solver {} vs enumeration {oracle}",
            res.value
        );
        assert!(res.kkt.max() < 1e-6, "case {case}: kkt {:?}", res.kkt);
    }
}

#[test]
fn bounded_lps_match_vertex_enumeration() {
    let mut rng = Rng::new(77);
    for case in 0..40 {
        let n = 2 + rng.below(2);
        let m = 2 + rng.below(4);
        let cost = QuadCost::linear(rng.vector(n, -2.0, 2.0));
        let (a, b) = random_rows(&mut rng, n, m);
        let sys = LinearSystem::inequalities(a.clone(), b.clone());
        let res = qp_solve(&cost, &sys, &QpOptions::default()).unwrap();
        let oracle = enumerate(&QuadCost::new(DMatrix::zeros(n, n), cost.g.clone(), 0.0), &a, &b, n..=n);
        assert!(
            (res.value - oracle).abs() <= 1e-7 * oracle.abs().max(1.0),
            "case {case}: solver {} vs vertices {oracle}",
            res.value
        );
    }
}

#[test]
fn infeasible_systems_carry_valid_certificates() {
    let mut rng = Rng::new(5);
    for _ in 0..30 {
        let n = 2 + rng.below(3);
        let c = rng.vector(n, -1.0, 1.0);
        // c·x ≤ −1 together with −c·x ≤ −1 cannot both hold.
        let mut a = DMatrix::zeros(2, n);
        a.set_row(0, &c.transpose());
        a.set_row(1, &(-&c).transpose());
        let sys = LinearSystem::inequalities(a, DVector::from_row_slice(&[-1.0, -1.0]));
        let res = qp_solve(&QuadCost::new(rng.spd(n, 0.5), rng.vector(n, -1.0, 1.0), 0.0), &sys, &QpOptions::default())
            .unwrap();
        assert_eq!(res.status, QpStatus::Infeasible);
        let cert = res.certificate.expect("infeasible result carries a certificate");
        assert!(cert.y.iter().all(|&y| y >= 0.0));
        let (comb, value) = cert.check(&sys);
        assert!(comb < 1e-9 && value < 0.0, "residual {comb}, value {value}");
    }
}
