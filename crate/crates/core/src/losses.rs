//! Attack surrogate losses and their logit-space gradients.
//!
//! Every loss returns `∂loss/∂z` analytically. Scale factors (`1/Δ_value` for
//! MIFPE, `t*/Δ_value` for T-MIFPE) are computed outside differentiation and
//! enter the gradient as constants.
//!
//! Two evaluation paths exist. The plain functions ([`ce_loss`],
//! [`scaled_ce_loss`], ...) are exact `f64` references. [`evaluate`] is the
//! attack's loss path: it rounds every intermediate of the softmax to the
//! working precision, the way a framework running in that format would.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::{classify_scenario, AttackMode, AttackScenario, RankedLogits, GAP_FLOOR};
use crate::error::{Error, Result};
use crate::precision::{PrecisionProfile, DOUBLE};
use crate::tstar::solve_t_star;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossFamily {
    Ce,
    Cw,
    Dlr,
    Mifpe,
    Tmifpe,
}

impl LossFamily {
    pub const ALL: [LossFamily; 5] =
        [LossFamily::Ce, LossFamily::Cw, LossFamily::Dlr, LossFamily::Mifpe, LossFamily::Tmifpe];

    pub fn name(self) -> &'static str {
        match self {
            LossFamily::Ce => "ce",
            LossFamily::Cw => "cw",
            LossFamily::Dlr => "dlr",
            LossFamily::Mifpe => "mifpe",
            LossFamily::Tmifpe => "tmifpe",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            LossFamily::Ce => "CE",
            LossFamily::Cw => "C&W",
            LossFamily::Dlr => "DLR",
            LossFamily::Mifpe => "MIFPE",
            LossFamily::Tmifpe => "T-MIFPE",
        }
    }

    fn is_ce_family(self) -> bool {
        matches!(self, LossFamily::Ce | LossFamily::Mifpe | LossFamily::Tmifpe)
    }
}

impl fmt::Display for LossFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossFamily::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown loss '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LossKind {
    pub family: LossFamily,
    pub mode: AttackMode,
}

impl LossKind {
    pub fn untargeted(family: LossFamily) -> Self {
        Self { family, mode: AttackMode::Untargeted }
    }

    pub fn targeted(family: LossFamily) -> Self {
        Self { family, mode: AttackMode::Targeted }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossEvaluation {
    pub value: f64,
    pub logit_gradient: Vec<f64>,
    /// Scale applied to the logits; 0 for unscaled losses.
    pub scale_c: f64,
    /// `t*` for T-MIFPE, 1 for MIFPE, 0 for unscaled losses.
    pub t_used: f64,
    pub scenario: Option<AttackScenario>,
    /// The logit gap was below [`GAP_FLOOR`] and the floor was substituted.
    pub degenerate_gap: bool,
}

impl LossEvaluation {
    fn unscaled(value: f64, logit_gradient: Vec<f64>) -> Self {
        Self {
            value,
            logit_gradient,
            scale_c: 0.0,
            t_used: 0.0,
            scenario: None,
            degenerate_gap: false,
        }
    }

    fn negate(mut self) -> Self {
        self.value = -self.value;
        self.logit_gradient.iter_mut().for_each(|g| *g = -*g);
        self
    }
}

/// Stable scaled cross-entropy in `f64`: value `−log p_y^c`, gradient
/// `c (p^c − e_y)` with `1 − p_y^c` summed from the other classes.
fn scaled_ce_exact(ranked: &RankedLogits, y: usize, c: f64) -> (f64, Vec<f64>) {
    let z = ranked.logits();
    let top = ranked.value_at(1);
    let w: Vec<f64> = z.iter().map(|&zi| (c * (zi - top)).exp()).collect();
    let total: f64 = w.iter().sum();
    let value = total.ln() - c * (z[y] - top);
    let mut grad: Vec<f64> = w.iter().map(|&wi| c * wi / total).collect();
    let others: f64 = w.iter().enumerate().filter(|&(i, _)| i != y).map(|(_, &wi)| wi).sum();
    grad[y] = -c * others / total;
    (value, grad)
}

/// Scaled cross-entropy with every intermediate rounded to `profile`.
fn scaled_ce_rounded(
    ranked: &RankedLogits,
    y: usize,
    c: f64,
    profile: &PrecisionProfile,
) -> (f64, Vec<f64>) {
    let r = |x: f64| profile.round(x);
    let c = r(c);
    let scaled: Vec<f64> = ranked.logits().iter().map(|&zi| r(c * zi)).collect();
    let top = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = scaled.iter().map(|&s| r(s - top)).collect();
    let exps: Vec<f64> = shifted.iter().map(|&s| r(s.exp())).collect();
    let total = exps.iter().fold(0.0, |acc, &e| r(acc + e));
    let value = r(r(total.ln()) - shifted[y]);
    let grad = exps
        .iter()
        .enumerate()
        .map(|(i, &e)| {
            let p = r(e / total);
            let onehot = if i == y { 1.0 } else { 0.0 };
            r(c * r(p - onehot))
        })
        .collect();
    (value, grad)
}

pub fn ce_loss(ranked: &RankedLogits, y: usize) -> Result<LossEvaluation> {
    ranked.check_class(y)?;
    let (value, grad) = scaled_ce_exact(ranked, y, 1.0);
    Ok(LossEvaluation::unscaled(value, grad))
}

pub fn scaled_ce_loss(ranked: &RankedLogits, y: usize, c: f64) -> Result<LossEvaluation> {
    ranked.check_class(y)?;
    if !(c > 0.0) {
        return Err(Error::NonPositiveScale(c));
    }
    let (value, grad) = scaled_ce_exact(ranked, y, c);
    Ok(LossEvaluation {
        value,
        logit_gradient: grad,
        scale_c: c,
        t_used: 0.0,
        scenario: None,
        degenerate_gap: false,
    })
}

/// Strongest class other than `y` (ties resolved by rank order).
fn best_other(ranked: &RankedLogits, y: usize) -> usize {
    if ranked.argmax() == y {
        ranked.class_at(2)
    } else {
        ranked.argmax()
    }
}

/// Logit hinge `max_{i≠y} z_i − z_y` (no confidence margin).
pub fn cw_loss(ranked: &RankedLogits, y: usize) -> Result<LossEvaluation> {
    ranked.check_class(y)?;
    let other = best_other(ranked, y);
    let z = ranked.logits();
    let mut grad = vec![0.0; z.len()];
    grad[other] = 1.0;
    grad[y] = -1.0;
    Ok(LossEvaluation::unscaled(z[other] - z[y], grad))
}

/// Difference-of-logits ratio `−(z_y − max_{i≠y} z_i) / (z_π1 − z_π3 + η)`.
/// The denominator is treated as a constant when differentiating.
pub fn dlr_loss(ranked: &RankedLogits, y: usize) -> Result<LossEvaluation> {
    if ranked.classes() < 3 {
        return Err(Error::TooFewClasses { needed: 3, got: ranked.classes() });
    }
    ranked.check_class(y)?;
    let other = best_other(ranked, y);
    let z = ranked.logits();
    let denom = ranked.value_at(1) - ranked.value_at(3) + GAP_FLOOR;
    let mut grad = vec![0.0; z.len()];
    grad[y] = -1.0 / denom;
    grad[other] = 1.0 / denom;
    Ok(LossEvaluation::unscaled(-(z[y] - z[other]) / denom, grad))
}

/// Cross-entropy on `z / Δ_value` (scale factor `T = 1`).
pub fn mifpe_loss(ranked: &RankedLogits, y: usize) -> Result<LossEvaluation> {
    let mut eval = scaled_ce_loss(ranked, y, 1.0 / ranked.delta_value())?;
    eval.t_used = 1.0;
    eval.degenerate_gap = ranked.is_degenerate();
    Ok(eval)
}

struct TmifpeScale {
    scenario: AttackScenario,
    t: f64,
    c: f64,
    degenerate: bool,
}

fn tmifpe_scale(
    ranked: &RankedLogits,
    label: usize,
    mode: AttackMode,
    profile: &PrecisionProfile,
) -> Result<TmifpeScale> {
    let scenario = classify_scenario(ranked, label, mode)?;
    if ranked.is_degenerate() {
        // No usable gap: fall back to T = 1 on the floored gap.
        return Ok(TmifpeScale { scenario, t: 1.0, c: 1.0 / GAP_FLOOR, degenerate: true });
    }
    let t = solve_t_star(ranked, &scenario, profile)?.t_star;
    Ok(TmifpeScale { scenario, t, c: t / ranked.delta(), degenerate: false })
}

/// Cross-entropy on `t* z / Δ_value`, with `t*` solved for the scenario the
/// current logits are in. Targeted mode returns the negated loss at `label`
/// (the target class).
pub fn tmifpe_loss(
    ranked: &RankedLogits,
    label: usize,
    mode: AttackMode,
    profile: &PrecisionProfile,
) -> Result<LossEvaluation> {
    let scale = tmifpe_scale(ranked, label, mode, profile)?;
    let mut eval = scaled_ce_loss(ranked, label, scale.c)?;
    eval.t_used = scale.t;
    eval.scenario = Some(scale.scenario);
    eval.degenerate_gap = scale.degenerate;
    Ok(match mode {
        AttackMode::Untargeted => eval,
        AttackMode::Targeted => eval.negate(),
    })
}

/// Evaluates `kind` at `label` (true class when untargeted, target class when
/// targeted) on the working-precision loss path. The result is the quantity
/// an attacker maximizes.
pub fn evaluate(
    kind: LossKind,
    ranked: &RankedLogits,
    label: usize,
    profile: &PrecisionProfile,
) -> Result<LossEvaluation> {
    ranked.check_class(label)?;
    let targeted = kind.mode == AttackMode::Targeted;
    if kind.family.is_ce_family() {
        let (c, t_used, scenario, degenerate) = match kind.family {
            LossFamily::Ce => (1.0, 0.0, None, false),
            LossFamily::Mifpe => (1.0 / ranked.delta_value(), 1.0, None, ranked.is_degenerate()),
            _ => {
                let s = tmifpe_scale(ranked, label, kind.mode, profile)?;
                (s.c, s.t, Some(s.scenario), s.degenerate)
            }
        };
        let (value, grad) = if profile.bits == DOUBLE.bits {
            scaled_ce_exact(ranked, label, c)
        } else {
            scaled_ce_rounded(ranked, label, c, profile)
        };
        let eval = LossEvaluation {
            value,
            logit_gradient: grad,
            scale_c: if kind.family == LossFamily::Ce { 0.0 } else { c },
            t_used,
            scenario,
            degenerate_gap: degenerate,
        };
        return Ok(if targeted { eval.negate() } else { eval });
    }
    let mut eval = match (kind.family, targeted) {
        (LossFamily::Cw, false) => cw_loss(ranked, label)?,
        // z_t − max_{i≠t} z_i
        (LossFamily::Cw, true) => cw_loss(ranked, label)?.negate(),
        (LossFamily::Dlr, false) => dlr_loss(ranked, label)?,
        (LossFamily::Dlr, true) => {
            return Err(Error::InvalidConfig("targeted DLR is not supported".into()))
        }
        _ => unreachable!(),
    };
    eval.value = profile.round(eval.value);
    Ok(eval)
}

/// Convenience wrapper for raw logits.
pub fn evaluate_logits(
    kind: LossKind,
    logits: &[f64],
    label: usize,
    profile: &PrecisionProfile,
) -> Result<LossEvaluation> {
    evaluate(kind, &RankedLogits::new(logits)?, label, profile)
}
