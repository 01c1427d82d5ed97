mod common;

use common::{box_rows, subsets, Rng};
use drcc::scenario_mip::{
    greedy_incumbent, qp_solve, solve_selection, Block, LinearSystem, QpOptions, QpStatus, QuadCost, ScenarioBlocks,
    SelectionOptions, SelectionProblem, SelectionStatus,
};
use nalgebra::{DMatrix, DVector};

/// Best objective over every choice of `S − k` relaxed scenarios. Relaxing
/// more never hurts, so subsets of exactly that size suffice.
fn enumerate(p: &SelectionProblem) -> f64 {
    let s = p.n_scenarios();
    let mut best = f64::INFINITY;
    for relaxed in subsets(s, s - p.k) {
        let mut rows_a: Vec<DVector<f64>> = (0..p.base.a.nrows()).map(|i| p.base.a.row(i).transpose()).collect();
        let mut rows_b: Vec<f64> = p.base.b.iter().copied().collect();
        for j in (0..s).filter(|j| !relaxed.contains(j)) {
            match &p.blocks {
                ScenarioBlocks::Shared { lhs, rhs } => {
                    for (i, &b) in rhs[j].iter().enumerate() {
                        rows_a.push(lhs.row(i).transpose());
                        rows_b.push(b);
                    }
                }
                ScenarioBlocks::Individual(bl) => {
                    for i in 0..bl[j].a.nrows() {
                        rows_a.push(bl[j].a.row(i).transpose());
                        rows_b.push(bl[j].b[i]);
                    }
                }
            }
        }
        let a = DMatrix::from_fn(rows_a.len(), p.cost.dim(), |r, c| rows_a[r][c]);
        let sys = LinearSystem::new(a, DVector::from_vec(rows_b), p.base.e.clone(), p.base.f.clone());
        let res = qp_solve(&p.cost, &sys, &QpOptions::default()).unwrap();
        if res.status == QpStatus::Optimal {
            best = best.min(res.value);
        }
    }
    best
}

fn random_problem(rng: &mut Rng, shared: bool) -> SelectionProblem {
    let n = 2 + rng.below(3);
    let s = 3 + rng.below(10);
    let k = s.saturating_sub(rng.below(5)).max(1);
    let cost = if rng.unit() < 0.3 {
        QuadCost::linear(rng.vector(n, -1.0, 1.0))
    } else {
        QuadCost::new(rng.spd(n, 0.05), rng.vector(n, -2.0, 2.0), 0.0)
    };
    let (a, b) = box_rows(n, -5.0, 5.0);
    let base = LinearSystem::inequalities(a, b);
    let rows = 1 + rng.below(3);
    let blocks = if shared {
        let lhs = rng.matrix(rows, n, -1.0, 1.0);
        let rhs = (0..s).map(|_| rng.vector(rows, -1.5, 1.0)).collect();
        ScenarioBlocks::Shared { lhs, rhs }
    } else {
        ScenarioBlocks::Individual(
            (0..s).map(|_| Block { a: rng.matrix(rows, n, -1.0, 1.0), b: rng.vector(rows, -1.5, 1.0) }).collect(),
        )
    };
    SelectionProblem::new(cost, base, blocks, k).unwrap()
}

fn check(seed: u64, shared: bool, count: usize) {
    let mut rng = Rng::new(seed);
    for case in 0..count {
        let p = random_problem(&mut rng, shared);
        let oracle = enumerate(&p);
        let sol = solve_selection(&p, &SelectionOptions::default()).unwrap();
        if oracle.is_infinite() {
            assert_eq!(sol.status, SelectionStatus::Infeasible, "case {case}");
            continue;
        }
        assert_eq!(sol.status, SelectionStatus::Optimal, "case {case}");
        assert!(
            (sol.objective - oracle).abs() <= 1e-7 * oracle.abs().max(1.0),
            "case {case} (S = {}, k = {}): branch and bound {} vs enumeration {oracle}",
            p.n_scenarios(),
            p.k,
            sol.objective
        );
        assert!(sol.enforced.len() >= p.k, "case {case}: only {} enforced", sol.enforced.len());
    }
}

#[test]
fn individual_blocks_match_subset_enumeration() {
    check(31, false, 40);
}

#[test]
fn shared_blocks_match_subset_enumeration() {
    check(32, true, 40);
}

#[test]
fn quantile_bound_does_not_change_the_optimum() {
    let mut rng = Rng::new(33);
    for _ in 0..20 {
        let p = random_problem(&mut rng, true);
        let with = solve_selection(&p, &SelectionOptions::default()).unwrap();
        let without =
            solve_selection(&p, &SelectionOptions { quantile_bound: false, ..SelectionOptions::default() }).unwrap();
        assert_eq!(with.status, without.status);
        if with.status == SelectionStatus::Optimal {
            assert!((with.objective - without.objective).abs() <= 1e-7 * with.objective.abs().max(1.0));
        }
    }
}

#[test]
fn greedy_incumbent_is_feasible_and_no_better_than_optimal() {
    let mut rng = Rng::new(34);
    for _ in 0..20 {
        let shared = rng.unit() < 0.5;
        let p = random_problem(&mut rng, shared);
        if let Some((x, z, v)) = greedy_incumbent(&p).unwrap() {
            let relaxed = z.iter().filter(|&&r| r).count();
            assert!(relaxed <= p.n_scenarios() - p.k);
            for j in (0..p.n_scenarios()).filter(|&j| !z[j]) {
                assert!(p.blocks.violation(j, &x) <= 1e-7);
            }
            let opt = solve_selection(&p, &SelectionOptions::default()).unwrap();
            assert!(opt.objective <= v + 1e-9 * v.abs().max(1.0));
        }
    }
}
