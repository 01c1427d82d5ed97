//! Relative-entropy ambiguity-set arithmetic.
//!
//! A sample of `S` scenarios, an allowed violation probability `ε` and a
//! relative-entropy radius `r` jointly determine how many of the best-case
//! scenarios (`k`) must be enforced so that the chance constraint holds for
//! every distribution within `r` of the empirical one. The functions here move
//! between the three quantities:
//!
//! * [`radius_for`] – the largest radius for which enforcing `k` scenarios
//!   suffices at level `ε`. It is the Bernoulli relative entropy
//!   `KL(k/S ‖ 1−ε)`.
//! * [`k_for`] – the inverse: smallest `k` whose radius covers `r`.
//! * [`optimal_epsilon`] – for a fixed `k`, the `ε` maximizing the
//!   asymptotic satisfaction bound `1 − ε − exp(−S·r(k, ε))`.
//! * [`min_k_for_target`] – smallest `k` whose optimal `ε` meets a target.
//!
//! Everything is evaluated in log space; `S^S` overflows an `f64` long
//! before the 300-sample experiments.

use thiserror::Error;

/// Slack used when comparing `ε` with the boundary `1 − k/S`.
const BOUNDARY_TOL: f64 = 1e-12;

/// Bisection tolerance on `ε` in [`optimal_epsilon`].
pub const EPSILON_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AmbiguityError {
    #[error("sample count must be positive")]
    EmptySample,
    #[error("k = {k} is outside 1..={s}")]
    KOutOfRange { k: usize, s: usize },
    #[error("epsilon {epsilon} is below 1 - k/S = {min}")]
    EpsilonBelowBoundary { epsilon: f64, min: f64 },
    #[error("epsilon {0} is outside (0, 1]")]
    EpsilonOutOfRange(f64),
    #[error("radius {0} must be finite and nonnegative")]
    InvalidRadius(f64),
    #[error("no k <= {s} reaches epsilon* <= {target}")]
    TargetUnreachable { target: f64, s: usize },
}

/// `x·ln(x/y)` with the convention `0·ln 0 = 0`.
fn xlogx_over(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else if y == 0.0 {
        f64::INFINITY
    } else {
        x * (x / y).ln()
    }
}

fn check_k(k: usize, s: usize) -> Result<(), AmbiguityError> {
    if s == 0 {
        return Err(AmbiguityError::EmptySample);
    }
    if k == 0 || k > s {
        return Err(AmbiguityError::KOutOfRange { k, s });
    }
    Ok(())
}

/// Smallest admissible `ε` for a given `k`, i.e. `1 − k/S`.
pub fn epsilon_floor(k: usize, s: usize) -> f64 {
    1.0 - k as f64 / s as f64
}

/// Largest relative-entropy radius for which enforcing `k` of `s` scenarios
/// guarantees the chance constraint at level `epsilon`.
///
/// Returns `+∞` at `ε = 1` when `k < S`.
pub fn radius_for(k: usize, epsilon: f64, s: usize) -> Result<f64, AmbiguityError> {
    check_k(k, s)?;
    if !(epsilon > 0.0 || k == s) || epsilon > 1.0 || epsilon.is_nan() {
        return Err(AmbiguityError::EpsilonOutOfRange(epsilon));
    }
    let floor = epsilon_floor(k, s);
    if epsilon < floor - BOUNDARY_TOL {
        return Err(AmbiguityError::EpsilonBelowBoundary { epsilon, min: floor });
    }
    let epsilon = epsilon.max(floor);
    let q = k as f64 / s as f64;
    // KL(Bernoulli(k/S) || Bernoulli(1 - ε))
    let r = xlogx_over(q, 1.0 - epsilon) + xlogx_over(1.0 - q, epsilon);
    Ok(r.max(0.0))
}

/// Result of [`k_for`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnforcedCount {
    /// Enforce the `k` best-case scenarios.
    Scenarios(usize),
    /// No `k ≤ S` is enough; the worst case over the whole support would
    /// have to be enforced.
    WorstCaseRequired,
}

/// Smallest `k` with `radius_for(k, ε, S) ≥ r`.
///
/// Ties (`radius_for(k) == r`) resolve to that `k`.
pub fn k_for(epsilon: f64, radius: f64, s: usize) -> Result<EnforcedCount, AmbiguityError> {
    if s == 0 {
        return Err(AmbiguityError::EmptySample);
    }
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(AmbiguityError::EpsilonOutOfRange(epsilon));
    }
    if radius.is_nan() || radius < 0.0 || radius.is_infinite() {
        return Err(AmbiguityError::InvalidRadius(radius));
    }
    let k_min = (((1.0 - epsilon) * s as f64) - 1e-9).ceil().max(1.0) as usize;
    for k in k_min..=s {
        if radius_for(k, epsilon, s)? >= radius {
            return Ok(EnforcedCount::Scenarios(k));
        }
    }
    Ok(EnforcedCount::WorstCaseRequired)
}

/// `ln E(ε)` where `E(ε) = S^S / (k^k (S−k)^{S−k}) · (1−ε)^k ε^{S−k}`.
fn log_tail(k: usize, s: usize, epsilon: f64) -> f64 {
    let (kf, sf) = (k as f64, s as f64);
    let rest = sf - kf;
    let log_coef = sf * sf.ln() - if k == 0 { 0.0 } else { kf * kf.ln() }
        - if k == s { 0.0 } else { rest * rest.ln() };
    let a = if k == 0 { 0.0 } else { kf * (1.0 - epsilon).ln() };
    let b = if k == s { 0.0 } else { rest * epsilon.ln() };
    log_coef + a + b
}

/// The satisfaction bound `φ(ε) = 1 − ε − E(ε)` maximized by [`optimal_epsilon`].
pub fn satisfaction_bound(k: usize, s: usize, epsilon: f64) -> f64 {
    1.0 - epsilon - log_tail(k, s, epsilon).exp()
}

/// `φ′(ε) = −1 − E(ε)·(−k/(1−ε) + (S−k)/ε)`.
fn bound_slope(k: usize, s: usize, epsilon: f64) -> f64 {
    let e = log_tail(k, s, epsilon).exp();
    let dlog = -(k as f64) / (1.0 - epsilon) + (s - k) as f64 / epsilon;
    -1.0 - e * dlog
}

/// Optimal violation level for a fixed `k`, and the bound it attains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimalEpsilon {
    pub epsilon: f64,
    pub bound: f64,
}

/// Maximize `1 − ε − E(ε)` over `ε ∈ [1 − k/S, 1]`.
///
/// The bound first dips and then rises to an interior maximum, so a coarse
/// grid brackets the maximizer and bisection on the slope refines it.
pub fn optimal_epsilon(k: usize, s: usize) -> Result<OptimalEpsilon, AmbiguityError> {
    check_k(k, s)?;
    let lo = epsilon_floor(k, s);
    let hi = 1.0;
    const GRID: usize = 4096;
    let point = |i: usize| lo + (hi - lo) * i as f64 / GRID as f64;
    let value = |eps: f64| {
        if eps >= 1.0 {
            // E(1) = 0 unless k = 0, which check_k excludes.
            0.0
        } else {
            satisfaction_bound(k, s, eps)
        }
    };
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for i in 0..=GRID {
        let v = value(point(i));
        if v > best_val {
            best_val = v;
            best = i;
        }
    }
    if best == GRID {
        return Ok(OptimalEpsilon { epsilon: 1.0, bound: 0.0 });
    }
    let mut a = point(best.saturating_sub(1));
    let mut b = point(best + 1).min(1.0 - f64::EPSILON);
    // φ′(a) ≥ 0 ≥ φ′(b) around a grid maximum; keep that sign pattern.
    if bound_slope(k, s, a.max(lo + f64::MIN_POSITIVE)) < 0.0 {
        a = point(best);
    }
    if bound_slope(k, s, b) > 0.0 {
        b = point(best);
    }
    while b - a > EPSILON_TOL {
        let mid = 0.5 * (a + b);
        if bound_slope(k, s, mid) > 0.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    let epsilon = 0.5 * (a + b);
    Ok(OptimalEpsilon { epsilon, bound: value(epsilon) })
}

/// Smallest `k` whose optimal `ε` does not exceed `target`.
pub fn min_k_for_target(target: f64, s: usize) -> Result<usize, AmbiguityError> {
    if s == 0 {
        return Err(AmbiguityError::EmptySample);
    }
    if !(target > 0.0 && target <= 1.0) {
        return Err(AmbiguityError::EpsilonOutOfRange(target));
    }
    // ε* is nonincreasing in k, so bisect on the predicate.
    let ok = |k: usize| optimal_epsilon(k, s).map(|o| o.epsilon <= target);
    if !ok(s)? {
        return Err(AmbiguityError::TargetUnreachable { target, s });
    }
    let (mut lo, mut hi) = (1usize, s);
    if ok(lo)? {
        return Ok(lo);
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if ok(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// A consistent `(S, k, ε, r)` quadruple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmbiguityParams {
    pub s: usize,
    pub k: usize,
    pub epsilon: f64,
    pub radius: f64,
}

impl AmbiguityParams {
    /// Parameters for a user-chosen `k`, with `ε = ε*` and the matching radius.
    pub fn from_k(k: usize, s: usize) -> Result<Self, AmbiguityError> {
        let opt = optimal_epsilon(k, s)?;
        let radius = radius_for(k, opt.epsilon, s)?;
        Ok(Self { s, k, epsilon: opt.epsilon, radius })
    }

    /// Parameters for the smallest `k` meeting a violation target.
    pub fn from_target(target: f64, s: usize) -> Result<Self, AmbiguityError> {
        Self::from_k(min_k_for_target(target, s)?, s)
    }

    /// Parameters from an explicit `(ε, r)` pair.
    pub fn from_epsilon_radius(
        epsilon: f64,
        radius: f64,
        s: usize,
    ) -> Result<Option<Self>, AmbiguityError> {
        match k_for(epsilon, radius, s)? {
            EnforcedCount::Scenarios(k) => Ok(Some(Self { s, k, epsilon, radius })),
            EnforcedCount::WorstCaseRequired => Ok(None),
        }
    }

    /// Number of scenarios that may be dropped.
    pub fn relax_budget(&self) -> usize {
        self.s - self.k
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radius_at_k_equals_s() {
        let r = radius_for(100, 0.1, 100).unwrap();
        assert!((r - (-(0.9f64).ln())).abs() < 1e-12);
        assert!((r - 0.10536).abs() < 1e-5);
    }

    #[test]
    fn radius_vanishes_on_boundary() {
        assert_eq!(radius_for(90, 0.1, 100).unwrap(), 0.0);
        assert!(radius_for(7, 0.3, 10).unwrap().abs() < 1e-15);
    }

    #[test]
    fn radius_rejects_small_epsilon() {
        assert!(matches!(
            radius_for(90, 0.05, 100),
            Err(AmbiguityError::EpsilonBelowBoundary { .. })
        ));
        assert!(radius_for(0, 0.5, 10).is_err());
        assert!(radius_for(11, 0.5, 10).is_err());
    }

    #[test]
    fn radius_infinite_at_epsilon_one() {
        assert!(radius_for(5, 1.0, 10).unwrap().is_infinite());
    }

    #[test]
    fn zero_radius_is_empirical_quantile() {
        assert_eq!(k_for(0.1, 0.0, 100).unwrap(), EnforcedCount::Scenarios(90));
        assert_eq!(k_for(0.105, 0.0, 100).unwrap(), EnforcedCount::Scenarios(90));
    }

    #[test]
    fn huge_radius_needs_worst_case() {
        assert_eq!(k_for(0.1, 10.0, 100).unwrap(), EnforcedCount::WorstCaseRequired);
    }

    #[test]
    fn k_for_matches_enumeration() {
        let (eps, r, s) = (0.2, 0.05, 20);
        let expected = (16..=20)
            .find(|&k| radius_for(k, eps, s).unwrap() >= r)
            .map(EnforcedCount::Scenarios)
            .unwrap_or(EnforcedCount::WorstCaseRequired);
        assert_eq!(k_for(eps, r, s).unwrap(), expected);
    }

    #[test]
    fn tie_picks_smaller_k() {
        let r = radius_for(95, 0.1, 100).unwrap();
        assert_eq!(k_for(0.1, r, 100).unwrap(), EnforcedCount::Scenarios(95));
    }

    #[test]
    fn tutorial_epsilons() {
        let e97 = optimal_epsilon(97, 100).unwrap().epsilon;
        let e98 = optimal_epsilon(98, 100).unwrap().epsilon;
        assert!((e97 - 0.109).abs() <= 1e-3, "{e97}");
        assert!((e98 - 0.0924).abs() <= 5e-4, "{e98}");
        assert_eq!(min_k_for_target(0.10, 100).unwrap(), 98);
    }

    #[test]
    fn k_equal_s_matches_grid_search() {
        // φ(ε) = 1 − ε − (1−ε)^5 on [0, 1]
        let mut best = (0.0, f64::NEG_INFINITY);
        for i in 0..=1_000_000 {
            let e = i as f64 * 1e-6;
            let v = 1.0 - e - (1.0 - e).powi(5);
            if v > best.1 {
                best = (e, v);
            }
        }
        let opt = optimal_epsilon(5, 5).unwrap();
        assert!((opt.epsilon - best.0).abs() < 2e-6, "{} vs {}", opt.epsilon, best.0);
        assert!((opt.bound - best.1).abs() < 1e-9);
    }

    #[test]
    fn target_one_gives_k_one() {
        assert_eq!(min_k_for_target(1.0, 100).unwrap(), 1);
    }

    #[test]
    fn target_for_three_hundred_samples_is_tight() {
        let k = min_k_for_target(0.10, 300).unwrap();
        assert!(optimal_epsilon(k, 300).unwrap().epsilon <= 0.10);
        assert!(optimal_epsilon(k - 1, 300).unwrap().epsilon > 0.10);
    }

    #[test]
    fn unreachable_target() {
        assert!(matches!(
            min_k_for_target(1e-4, 10),
            Err(AmbiguityError::TargetUnreachable { .. })
        ));
    }

    #[test]
    fn params_are_consistent() {
        let p = AmbiguityParams::from_k(98, 100).unwrap();
        assert!(p.epsilon >= epsilon_floor(98, 100));
        assert!(p.radius <= radius_for(98, p.epsilon, 100).unwrap() + 1e-15);
        assert_eq!(p.relax_budget(), 2);
        let q = AmbiguityParams::from_epsilon_radius(p.epsilon, p.radius, 100).unwrap().unwrap();
        assert_eq!(q.k, 98);
    }
}
