//! Relative-error analysis of scaled cross-entropy gradients.
//!
//! Every quantity here is a function of the logit vector `z` and the scale
//! parameter `t`, with `c = t / Δ_value` and `Δ = z_π1 − z_π2`. All arithmetic
//! is done in `f64`; a [`PrecisionProfile`] only contributes `eps_max`.
//!
//! Class indices are zero-based. Ranks are one-based: rank 1 is the argmax.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::precision::PrecisionProfile;

/// Gaps below this are treated as ties when forming `c = t / Δ_value`.
pub const GAP_FLOOR: f64 = 1e-12;

/// Upper clamp on exponent arguments. With max-subtraction every argument is
/// `<= 0` in exact arithmetic, so this never binds on well-formed input.
pub(crate) const EXP_ARG_CLAMP: f64 = 50.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RankedLogits {
    z: Vec<f64>,
    /// `order[r]` is the class at rank `r + 1`.
    order: Vec<usize>,
    /// `rank[i]` is the one-based rank of class `i`.
    rank: Vec<usize>,
    delta: f64,
}

/// Sorts logits descending. Ties keep the lower class index first.
pub fn rank_logits(z: &[f64]) -> Result<RankedLogits> {
    RankedLogits::new(z)
}

impl RankedLogits {
    pub fn new(z: &[f64]) -> Result<Self> {
        if z.len() < 2 {
            return Err(Error::TooFewClasses { needed: 2, got: z.len() });
        }
        if let Some(i) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLogit(i));
        }
        let mut order: Vec<usize> = (0..z.len()).collect();
        // sort_by is stable, so equal logits keep index order.
        order.sort_by(|&a, &b| z[b].partial_cmp(&z[a]).expect("finite"));
        let mut rank = vec![0; z.len()];
        for (r, &class) in order.iter().enumerate() {
            rank[class] = r + 1;
        }
        let delta = z[order[0]] - z[order[1]];
        Ok(Self { z: z.to_vec(), order, rank, delta })
    }

    pub fn from_f32(z: &[f32]) -> Result<Self> {
        let wide: Vec<f64> = z.iter().map(|&v| v as f64).collect();
        Self::new(&wide)
    }

    pub fn logits(&self) -> &[f64] {
        &self.z
    }

    pub fn classes(&self) -> usize {
        self.z.len()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Class at one-based rank `r`.
    pub fn class_at(&self, r: usize) -> usize {
        self.order[r - 1]
    }

    /// One-based rank of `class`.
    pub fn rank_of(&self, class: usize) -> usize {
        self.rank[class]
    }

    pub fn argmax(&self) -> usize {
        self.order[0]
    }

    /// Logit value at one-based rank `r`.
    pub fn value_at(&self, r: usize) -> f64 {
        self.z[self.order[r - 1]]
    }

    /// `z_π1 − z_π2`, always `>= 0`.
    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// The detached gap used in `c = t / Δ_value`, floored at [`GAP_FLOOR`].
    pub fn delta_value(&self) -> f64 {
        self.delta.max(GAP_FLOOR)
    }

    pub fn is_degenerate(&self) -> bool {
        self.delta < GAP_FLOOR
    }

    pub(crate) fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.z.len() {
            Err(Error::LabelOutOfRange { index: class, classes: self.z.len() })
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttackMode {
    #[serde(rename = "untargeted")]
    Untargeted,
    #[serde(rename = "targeted")]
    Targeted,
}

impl fmt::Display for AttackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackMode::Untargeted => "untargeted",
            AttackMode::Targeted => "targeted",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScenarioKind {
    #[serde(rename = "u_u")]
    UntargetedUnsuccessful,
    #[serde(rename = "u_s")]
    UntargetedSuccessful,
    #[serde(rename = "t_u")]
    TargetedUnsuccessful,
    #[serde(rename = "t_s")]
    TargetedSuccessful,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::UntargetedUnsuccessful,
        ScenarioKind::UntargetedSuccessful,
        ScenarioKind::TargetedUnsuccessful,
        ScenarioKind::TargetedSuccessful,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ScenarioKind::UntargetedUnsuccessful => "u_u",
            ScenarioKind::UntargetedSuccessful => "u_s",
            ScenarioKind::TargetedUnsuccessful => "t_u",
            ScenarioKind::TargetedSuccessful => "t_s",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().replace('_', "").as_str() {
            "uu" => Some(ScenarioKind::UntargetedUnsuccessful),
            "us" => Some(ScenarioKind::UntargetedSuccessful),
            "tu" => Some(ScenarioKind::TargetedUnsuccessful),
            "ts" => Some(ScenarioKind::TargetedSuccessful),
            _ => None,
        }
    }

    pub fn mode(self) -> AttackMode {
        match self {
            ScenarioKind::UntargetedUnsuccessful | ScenarioKind::UntargetedSuccessful => {
                AttackMode::Untargeted
            }
            _ => AttackMode::Targeted,
        }
    }

    /// Whether the attacker's goal is currently met.
    pub fn is_successful(self) -> bool {
        matches!(self, ScenarioKind::UntargetedSuccessful | ScenarioKind::TargetedSuccessful)
    }

    /// Scenarios whose optimal `t` is an interior maximum of `g`.
    pub fn is_stationary(self) -> bool {
        matches!(self, ScenarioKind::UntargetedUnsuccessful | ScenarioKind::TargetedSuccessful)
    }

    fn label_is_argmax(self) -> bool {
        self.is_stationary()
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackScenario {
    pub kind: ScenarioKind,
    /// True class for untargeted attacks, target class for targeted ones.
    pub label: usize,
    /// One-based rank of `label`.
    pub rank: usize,
}

impl AttackScenario {
    pub fn new(kind: ScenarioKind, label: usize, rank: usize) -> Result<Self> {
        if (rank == 1) != kind.label_is_argmax() || rank == 0 {
            return Err(Error::ScenarioMismatch { scenario: kind.tag(), rank });
        }
        Ok(Self { kind, label, rank })
    }

    /// Builds a scenario of a given kind for `label`, checking it against `ranked`.
    pub fn for_label(ranked: &RankedLogits, kind: ScenarioKind, label: usize) -> Result<Self> {
        ranked.check_class(label)?;
        Self::new(kind, label, ranked.rank_of(label))
    }

    fn check(&self, ranked: &RankedLogits) -> Result<()> {
        ranked.check_class(self.label)?;
        if ranked.rank_of(self.label) != self.rank {
            return Err(Error::ScenarioMismatch { scenario: self.kind.tag(), rank: self.rank });
        }
        Ok(())
    }
}

pub fn classify_scenario(
    ranked: &RankedLogits,
    label: usize,
    mode: AttackMode,
) -> Result<AttackScenario> {
    ranked.check_class(label)?;
    let rank = ranked.rank_of(label);
    let kind = match (mode, rank == 1) {
        (AttackMode::Untargeted, true) => ScenarioKind::UntargetedUnsuccessful,
        (AttackMode::Untargeted, false) => ScenarioKind::UntargetedSuccessful,
        (AttackMode::Targeted, true) => ScenarioKind::TargetedSuccessful,
        (AttackMode::Targeted, false) => ScenarioKind::TargetedUnsuccessful,
    };
    Ok(AttackScenario { kind, label, rank })
}

/// `p_i^c = exp(c (z_i − z_ref)) / Σ_j exp(c (z_j − z_ref))`, with `z_ref` the
/// logit at `reference_rank` (1 or 2). Falls back to rank 1 if the sum overflows.
pub fn scaled_softmax(ranked: &RankedLogits, c: f64, reference_rank: usize) -> Result<Vec<f64>> {
    if !(c > 0.0) {
        return Err(Error::NonPositiveScale(c));
    }
    if !(1..=2).contains(&reference_rank) {
        return Err(Error::BadReferenceRank(reference_rank));
    }
    let terms = |reference: f64| -> (Vec<f64>, f64) {
        let p: Vec<f64> = ranked.z.iter().map(|&zi| (c * (zi - reference)).exp()).collect();
        let sum = p.iter().sum();
        (p, sum)
    };
    let (mut p, mut sum) = terms(ranked.value_at(reference_rank));
    // Against the runner-up the top term overflows once c·Δ exceeds the
    // exponent range; the top-referenced form is the same quantity and cannot.
    if !sum.is_finite() {
        (p, sum) = terms(ranked.value_at(1));
    }
    p.iter_mut().for_each(|v| *v /= sum);
    Ok(p)
}

/// Sums shared by all four scenarios, taken relative to `z_π1` and listed in
/// rank order.
#[derive(Debug, Clone)]
pub(crate) struct RankSums {
    pub c: f64,
    pub delta: f64,
    /// `Σ_j exp(c (z_j − z_π1))`.
    pub b: f64,
    /// `b − 1`, summed directly so it keeps full relative precision.
    pub b_minus_one: f64,
    /// `Σ_j (z_j − z_π1) exp(c (z_j − z_π1))`, `<= 0`.
    pub s: f64,
    /// `exp(c (z_πr − z_π1))` for r = 1..K.
    pub weights: Vec<f64>,
    /// `z_πr − z_π1` for r = 1..K.
    pub diffs: Vec<f64>,
}

impl RankSums {
    pub fn new(ranked: &RankedLogits, t: f64, delta: f64) -> Self {
        let c = t / delta;
        let top = ranked.value_at(1);
        let diffs: Vec<f64> = ranked.order.iter().map(|&i| ranked.z[i] - top).collect();
        let weights: Vec<f64> =
            diffs.iter().map(|&d| (c * d).min(EXP_ARG_CLAMP).exp()).collect();
        let b_minus_one: f64 = weights[1..].iter().sum();
        let b = weights[0] + b_minus_one;
        let s = diffs.iter().zip(&weights).map(|(d, w)| d * w).sum();
        Self { c, delta, b, b_minus_one, s, weights, diffs }
    }

    /// `h(t) = B² − B + c S`, the numerator of `g'` for the stationary scenarios.
    pub fn h(&self) -> f64 {
        self.b * self.b_minus_one + self.c * self.s
    }
}

fn checked_sums(ranked: &RankedLogits, scenario: &AttackScenario, t: f64) -> Result<RankSums> {
    if !(t > 0.0) {
        return Err(Error::NonPositiveScale(t));
    }
    if ranked.is_degenerate() {
        return Err(Error::DegenerateGap(ranked.delta));
    }
    scenario.check(ranked)?;
    Ok(RankSums::new(ranked, t, ranked.delta))
}

pub(crate) fn g_from_sums(sums: &RankSums, kind: ScenarioKind, rank: usize) -> f64 {
    match kind {
        // c (1 − p_π1)
        ScenarioKind::UntargetedUnsuccessful | ScenarioKind::TargetedSuccessful => {
            sums.c * sums.b_minus_one / sums.b
        }
        // c p_π1. Taking ratios against z_π1 instead of z_π2 leaves p_π1
        // unchanged and keeps exp(t) from overflowing at large t.
        ScenarioKind::UntargetedSuccessful => sums.c / sums.b,
        // c (p_π1 − p_πj)
        ScenarioKind::TargetedUnsuccessful => {
            let one_minus_wj = -(sums.c * sums.diffs[rank - 1]).exp_m1();
            sums.c * one_minus_wj / sums.b
        }
    }
}

pub(crate) fn g_prime_from_sums(sums: &RankSums, kind: ScenarioKind, rank: usize) -> f64 {
    let RankSums { c, delta, b, s, .. } = *sums;
    match kind {
        ScenarioKind::UntargetedUnsuccessful | ScenarioKind::TargetedSuccessful => {
            sums.h() / (delta * b * b)
        }
        ScenarioKind::UntargetedSuccessful => {
            // p_π1 (B₂ + c (Δ B₂ − S₂)) / (Δ B₂) with the π2-referenced sums;
            // dividing through by B₂ leaves only reference-free ratios.
            let p1 = 1.0 / b;
            p1 * (1.0 - c * s / b) / delta
        }
        ScenarioKind::TargetedUnsuccessful => {
            // A = Σ e^{c(z_πi − z_π1)}, B = 1 − e^{c(z_πj − z_π1)},
            // D = −c e^{c(z_πj − z_π1)} (z_πj − z_π1), S = −Σ (z_πi − z_π1) e^{…}.
            let a = b;
            let dj = sums.diffs[rank - 1];
            let wj = sums.weights[rank - 1];
            let bt = -(c * dj).exp_m1();
            let d = -c * wj * dj;
            let st = -s;
            (a * (bt + d) + c * bt * st) / (delta * a * a)
        }
    }
}

/// The gradient coefficient `g(t)` whose magnitude controls the relative-error
/// bound in the given scenario.
pub fn g_value(ranked: &RankedLogits, scenario: &AttackScenario, t: f64) -> Result<f64> {
    let sums = checked_sums(ranked, scenario, t)?;
    Ok(g_from_sums(&sums, scenario.kind, scenario.rank))
}

/// Analytic `dg/dt`.
pub fn g_derivative(ranked: &RankedLogits, scenario: &AttackScenario, t: f64) -> Result<f64> {
    let sums = checked_sums(ranked, scenario, t)?;
    Ok(g_prime_from_sums(&sums, scenario.kind, scenario.rank))
}

/// `h(t) = B² − B + c S` for the stationary scenarios (`u_u`, `t_s`).
pub fn h_value(ranked: &RankedLogits, scenario: &AttackScenario, t: f64) -> Result<f64> {
    if !scenario.kind.is_stationary() {
        return Err(Error::ScenarioMismatch { scenario: scenario.kind.tag(), rank: scenario.rank });
    }
    Ok(checked_sums(ranked, scenario, t)?.h())
}

/// Worst-case relative error `eps_max / g(t)` per unit gradient magnitude.
pub fn delta_sup(
    ranked: &RankedLogits,
    scenario: &AttackScenario,
    t: f64,
    profile: &PrecisionProfile,
) -> Result<f64> {
    let g = g_value(ranked, scenario, t)?;
    Ok(delta_sup_from_g(g, profile))
}

pub(crate) fn delta_sup_from_g(g: f64, profile: &PrecisionProfile) -> f64 {
    if g > 0.0 {
        profile.eps_max / g
    } else {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorCurvePoint {
    pub t: f64,
    pub g: f64,
    pub delta_sup: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorCurve {
    pub profile: PrecisionProfile,
    pub points: Vec<ErrorCurvePoint>,
    /// Optimal `t` for this profile (profile-dependent only for the clamped scenarios).
    pub t_star: f64,
}

#[derive(Debug, Clone)]
pub struct CurveSet {
    pub scenario: AttackScenario,
    pub curves: Vec<ErrorCurve>,
}

/// Evaluates `g` and `δ_sup` over a grid for each profile.
///
/// The optimal `t` of each profile is spliced into the grid so the curves carry
/// an exact marker row.
pub fn emit_curve(
    ranked: &RankedLogits,
    scenario: &AttackScenario,
    t_grid: &[f64],
    profiles: &[PrecisionProfile],
) -> Result<CurveSet> {
    if t_grid.is_empty() {
        return Err(Error::InvalidGrid("empty grid"));
    }
    if t_grid.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
        return Err(Error::InvalidGrid("grid values must be positive and finite"));
    }
    if t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidGrid("grid must be strictly increasing"));
    }
    let mut curves = Vec::with_capacity(profiles.len());
    for profile in profiles {
        let solution = crate::tstar::solve_t_star(ranked, scenario, profile)?;
        let mut ts = t_grid.to_vec();
        if t_grid.len() > 1 && solution.t_star > ts[0] && solution.t_star < ts[ts.len() - 1] {
            let at = ts.partition_point(|&t| t < solution.t_star);
            if ts[at] != solution.t_star {
                ts.insert(at, solution.t_star);
            }
        }
        let points = ts
            .iter()
            .map(|&t| {
                let g = g_value(ranked, scenario, t)?;
                Ok(ErrorCurvePoint { t, g, delta_sup: delta_sup_from_g(g, profile) })
            })
            .collect::<Result<Vec<_>>>()?;
        curves.push(ErrorCurve { profile: *profile, points, t_star: solution.t_star });
    }
    Ok(CurveSet { scenario: *scenario, curves })
}
