//! Optimal scale factor `t*` for each attack scenario.
//!
//! `u_u` and `t_s` maximize `g(t) = c (1 − p_π1)`; the maximizer is a root of
//! `h(t) = B² − B + c S`, located by bisection. `u_s` and `t_u` have
//! increasing `g`, so `t*` is pushed as far as underflow of `p_πj` allows:
//! `t* = max{1, λ (z_π1 − z_π2) / (z_π1 − z_πj)}`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::analysis::{
    delta_sup_from_g, g_from_sums, g_prime_from_sums, g_value, AttackScenario, RankSums,
    RankedLogits,
};
use crate::error::{Error, Result};
use crate::precision::{PrecisionProfile, ALL_PROFILES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    Bisection,
    ClampedFormula,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleFactorSolution {
    pub scenario: AttackScenario,
    pub t_star: f64,
    pub c_star: f64,
    pub g_at_star: f64,
    /// Keyed by bit width.
    pub delta_sup_at_star: BTreeMap<u32, f64>,
    pub method: SolveMethod,
    pub iterations: usize,
    /// `|g'(t*)|` for bisection, 0 for the closed form.
    pub residual: f64,
    /// Set when the clamp at 1 overrides the underflow bound, i.e. `p_πj`
    /// underflows in the target precision at the returned `t*`.
    pub underflow_at_star: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub t_lo: f64,
    pub t_hi_max: f64,
    /// Bracket width target, relative to `max(1, t)`.
    pub rel_width: f64,
    pub max_iterations: usize,
    /// Log-spaced probes used to find every `+ → −` sign change of `h`.
    pub scan_points: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { t_lo: 1e-6, t_hi_max: 1e6, rel_width: 1e-10, max_iterations: 200, scan_points: 512 }
    }
}

pub fn solve_t_star(
    ranked: &RankedLogits,
    scenario: &AttackScenario,
    profile: &PrecisionProfile,
) -> Result<ScaleFactorSolution> {
    solve_t_star_with(ranked, scenario, profile, &SolverOptions::default())
}

pub fn solve_t_star_with(
    ranked: &RankedLogits,
    scenario: &AttackScenario,
    profile: &PrecisionProfile,
    options: &SolverOptions,
) -> Result<ScaleFactorSolution> {
    // Validates the gap and the scenario/label pairing.
    g_value(ranked, scenario, 1.0)?;
    if scenario.kind.is_stationary() {
        stationary(ranked, scenario, options)
    } else {
        clamped(ranked, scenario, profile)
    }
}

fn finish(
    ranked: &RankedLogits,
    scenario: &AttackScenario,
    t_star: f64,
    method: SolveMethod,
    iterations: usize,
    residual: f64,
    underflow_at_star: bool,
) -> ScaleFactorSolution {
    let sums = RankSums::new(ranked, t_star, ranked.delta());
    let g = g_from_sums(&sums, scenario.kind, scenario.rank);
    let delta_sup_at_star =
        ALL_PROFILES.iter().map(|p| (p.bits, delta_sup_from_g(g, p))).collect();
    ScaleFactorSolution {
        scenario: *scenario,
        t_star,
        c_star: t_star / ranked.delta(),
        g_at_star: g,
        delta_sup_at_star,
        method,
        iterations,
        residual,
        underflow_at_star,
    }
}

fn clamped(
    ranked: &RankedLogits,
    scenario: &AttackScenario,
    profile: &PrecisionProfile,
) -> Result<ScaleFactorSolution> {
    let j = scenario.rank;
    if j < 2 {
        return Err(Error::ScenarioMismatch { scenario: scenario.kind.tag(), rank: j });
    }
    let top = ranked.value_at(1);
    let bound = profile.lambda * (top - ranked.value_at(2)) / (top - ranked.value_at(j));
    let t_star = bound.max(1.0);
    Ok(finish(ranked, scenario, t_star, SolveMethod::ClampedFormula, 0, 0.0, bound < 1.0))
}

fn stationary(
    ranked: &RankedLogits,
    scenario: &AttackScenario,
    options: &SolverOptions,
) -> Result<ScaleFactorSolution> {
    let delta = ranked.delta();
    let h = |t: f64| RankSums::new(ranked, t, delta).h();
    let g = |t: f64| g_from_sums(&RankSums::new(ranked, t, delta), scenario.kind, scenario.rank);

    // h -> K² − K > 0 as t -> 0⁺; double until h turns negative.
    let mut t_hi = 1.0;
    while !(h(t_hi) < 0.0) {
        t_hi *= 2.0;
        if t_hi > options.t_hi_max {
            return Err(Error::NoStationaryPoint(options.t_hi_max));
        }
    }

    // h need not be monotone, so g can have several local maxima. Bisect every
    // + → − crossing found on a log-spaced scan and keep the best one.
    let scan_hi = (4.0 * t_hi).min(options.t_hi_max).max(t_hi);
    let n = options.scan_points.max(2);
    let ratio = (scan_hi / options.t_lo).ln() / (n - 1) as f64;
    let mut probes: Vec<f64> = (0..n).map(|i| options.t_lo * (ratio * i as f64).exp()).collect();
    probes[n - 1] = scan_hi;
    if !probes.contains(&t_hi) {
        let at = probes.partition_point(|&t| t < t_hi);
        probes.insert(at, t_hi);
    }

    let mut best: Option<(f64, f64, usize)> = None;
    let mut h_prev = h(probes[0]);
    for w in probes.windows(2) {
        let h_next = h(w[1]);
        if h_prev > 0.0 && h_next <= 0.0 {
            let (root, iterations) = bisect(&h, w[0], w[1], options);
            let g_root = g(root);
            if best.map_or(true, |(_, g_best, _)| g_root > g_best) {
                best = Some((root, g_root, iterations));
            }
        }
        h_prev = h_next;
    }
    let (t_star, _, iterations) = best.ok_or(Error::NoStationaryPoint(scan_hi))?;
    let residual =
        g_prime_from_sums(&RankSums::new(ranked, t_star, delta), scenario.kind, scenario.rank)
            .abs();
    Ok(finish(ranked, scenario, t_star, SolveMethod::Bisection, iterations, residual, false))
}

/// Bisection on `[lo, hi]` with `f(lo) > 0 >= f(hi)`.
fn bisect(f: &impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, options: &SolverOptions) -> (f64, usize) {
    let mut iterations = 0;
    while iterations < options.max_iterations {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= options.rel_width * mid.max(1.0) || mid <= lo || mid >= hi {
            break;
        }
        iterations += 1;
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0.5 * (lo + hi), iterations)
}

/// Grid argmax of `g` over `n` uniformly spaced points on `[t_lo, t_hi]`.
pub fn brute_force_t_star(
    ranked: &RankedLogits,
    scenario: &AttackScenario,
    t_lo: f64,
    t_hi: f64,
    n: usize,
) -> Result<(f64, f64)> {
    if !(t_lo > 0.0 && t_hi > t_lo) {
        return Err(Error::InvalidGrid("need 0 < t_lo < t_hi"));
    }
    if n < 2 {
        return Err(Error::InvalidGrid("need at least two grid points"));
    }
    let step = (t_hi - t_lo) / (n - 1) as f64;
    let mut best = (t_lo, f64::NEG_INFINITY);
    for i in 0..n {
        let t = if i == n - 1 { t_hi } else { t_lo + step * i as f64 };
        let g = g_value(ranked, scenario, t)?;
        if g > best.1 {
            best = (t, g);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{classify_scenario, rank_logits, AttackMode, ScenarioKind};
    use crate::precision::{DOUBLE, HALF, SINGLE};

    const FIG_A: [f64; 10] = [2.5, -1.3, 0.8, 3.8, -0.9, 1.7, -2.1, 3.6, 0.4, -1.5];
    const FIG_B: [f64; 10] = [1.2, -1.5, 0.5, 1.9, -1.2, 4.2, -2.3, 2.0, 0.1, -1.8];
    const FIG_D: [f64; 10] = [1.0, 4.5, 0.3, 1.2, -1.0, 1.5, -2.5, 2.8, 0.0, -1.8];

    fn fixed_point_root() -> f64 {
        let mut t = 1.0f64;
        for _ in 0..500 {
            t = 1.0 + (-t).exp();
        }
        t
    }

    #[test]
    fn two_class_root() {
        let r = rank_logits(&[1.0, 0.0]).unwrap();
        let s = classify_scenario(&r, 0, AttackMode::Untargeted).unwrap();
        let root = fixed_point_root();
        for p in [HALF, SINGLE, DOUBLE] {
            let sol = solve_t_star(&r, &s, &p).unwrap();
            assert!((sol.t_star - root).abs() < 1e-9, "{}", sol.t_star);
            assert_eq!(sol.method, SolveMethod::Bisection);
            assert!(sol.residual < 1e-9);
        }
    }

    #[test]
    fn brute_force_agrees_on_two_class() {
        let r = rank_logits(&[1.0, 0.0]).unwrap();
        let s = classify_scenario(&r, 0, AttackMode::Untargeted).unwrap();
        let (t, _) = brute_force_t_star(&r, &s, 0.01, 10.0, 100_000).unwrap();
        assert!((t - fixed_point_root()).abs() < 1e-4);
    }

    #[test]
    fn brute_force_two_points() {
        let r = rank_logits(&[1.0, 0.0]).unwrap();
        let s = classify_scenario(&r, 0, AttackMode::Untargeted).unwrap();
        let (t, g) = brute_force_t_star(&r, &s, 0.5, 30.0, 2).unwrap();
        assert_eq!(t, 0.5);
        assert_eq!(g, g_value(&r, &s, 0.5).unwrap());
        assert!(brute_force_t_star(&r, &s, 1.0, 1.0, 10).is_err());
        assert!(brute_force_t_star(&r, &s, 1.0, 2.0, 1).is_err());
    }

    #[test]
    fn figure_a_matches_grid() {
        let r = rank_logits(&FIG_A).unwrap();
        let s = classify_scenario(&r, 3, AttackMode::Untargeted).unwrap();
        let sol = solve_t_star(&r, &s, &SINGLE).unwrap();
        let n = 100_000;
        let step = (50.0 - 1e-3) / (n - 1) as f64;
        let (t, _) = brute_force_t_star(&r, &s, 1e-3, 50.0, n).unwrap();
        assert!((sol.t_star - t).abs() <= step);
        // Fixed-point form of the stationary condition.
        let sums = RankSums::new(&r, sol.t_star, r.delta());
        let fixed = r.delta() * sums.b * sums.b_minus_one / -sums.s;
        assert!((fixed - sol.t_star).abs() <= 1e-6 * sol.t_star);
    }

    #[test]
    fn figure_d_targeted_success() {
        let r = rank_logits(&FIG_D).unwrap();
        let s = classify_scenario(&r, 1, AttackMode::Targeted).unwrap();
        assert_eq!(s.kind, ScenarioKind::TargetedSuccessful);
        let sol = solve_t_star(&r, &s, &SINGLE).unwrap();
        let n = 100_000;
        let (t, _) = brute_force_t_star(&r, &s, 0.01, 50.0, n).unwrap();
        assert!((sol.t_star - t).abs() <= (50.0 - 0.01) / (n - 1) as f64);
    }

    #[test]
    fn figure_b_clamped_formula() {
        let r = rank_logits(&FIG_B).unwrap();
        let s = classify_scenario(&r, 3, AttackMode::Untargeted).unwrap();
        let sol = solve_t_star(&r, &s, &SINGLE).unwrap();
        let expect = (103.2789f64 * 2.2 / 2.3).max(1.0);
        assert!((sol.t_star - expect).abs() < 1e-9);
        assert_eq!(sol.method, SolveMethod::ClampedFormula);
        assert_eq!(sol.residual, 0.0);
        assert!(!sol.underflow_at_star);
    }

    #[test]
    fn clamp_floor_is_flagged() {
        // λ Δ / (z_π1 − z_πj) = 16.6355 * 0.01 / 10 < 1 at 16-bit.
        let r = rank_logits(&[10.0, 9.99, 0.0]).unwrap();
        let s = classify_scenario(&r, 2, AttackMode::Targeted).unwrap();
        let sol = solve_t_star(&r, &s, &HALF).unwrap();
        assert_eq!(sol.t_star, 1.0);
        assert!(sol.underflow_at_star);
    }

    #[test]
    fn clamped_scenario_rejects_rank_one() {
        let r = rank_logits(&FIG_A).unwrap();
        let bogus = AttackScenario { kind: ScenarioKind::UntargetedSuccessful, label: 3, rank: 1 };
        assert!(solve_t_star(&r, &bogus, &SINGLE).is_err());
    }

    #[test]
    fn degenerate_gap_is_rejected() {
        let r = rank_logits(&[1.0, 1.0, 0.0]).unwrap();
        let s = classify_scenario(&r, 0, AttackMode::Untargeted).unwrap();
        assert!(matches!(solve_t_star(&r, &s, &SINGLE), Err(Error::DegenerateGap(_))));
    }

    #[test]
    fn picks_global_maximum_when_g_is_bimodal() {
        // A close runner-up plus a crowd of far classes gives h three roots.
        let mut z = vec![0.0, -0.05];
        z.extend(std::iter::repeat(-1.0).take(98));
        let r = rank_logits(&z).unwrap();
        let s = classify_scenario(&r, 0, AttackMode::Untargeted).unwrap();
        let sol = solve_t_star(&r, &s, &SINGLE).unwrap();
        let (t, g) = brute_force_t_star(&r, &s, 1e-3, 50.0, 100_000).unwrap();
        assert!(sol.g_at_star >= g - 1e-9 * g, "{} vs {} at {t}", sol.g_at_star, g);
    }

    #[test]
    fn invariant_under_affine_logit_maps() {
        let base = rank_logits(&FIG_A).unwrap();
        let s = classify_scenario(&base, 3, AttackMode::Untargeted).unwrap();
        let t0 = solve_t_star(&base, &s, &SINGLE).unwrap().t_star;
        for scale in [0.5, 2.0, 10.0] {
            for shift in [-5.0, 0.0, 5.0] {
                let z: Vec<f64> = FIG_A.iter().map(|v| scale * v + shift).collect();
                let r = rank_logits(&z).unwrap();
                let t = solve_t_star(&r, &s, &SINGLE).unwrap().t_star;
                assert!((t - t0).abs() <= 1e-8 * t0);
            }
        }
    }
}
