//! Projected gradient attacks with a random start, cosine step schedule and
//! two-step momentum.
//!
//! Samples are attacked in lockstep batches for speed, but every sample's
//! arithmetic is row-independent and its random start comes from its own
//! stream `(seed, index)`, so results never depend on how samples are batched.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{classify_scenario, AttackMode, RankedLogits, ScenarioKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{evaluate, LossFamily, LossKind};
use crate::nn::{input_gradient_batch, ModelWeights};
use crate::precision::{PrecisionProfile, SINGLE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Linf,
    L2,
}

impl Norm {
    pub fn name(self) -> &'static str {
        match self {
            Norm::Linf => "linf",
            Norm::L2 => "l2",
        }
    }

    /// Norm of `a − b`, accumulated in 64-bit.
    pub fn distance(self, a: &[f32], b: &[f32]) -> f64 {
        let diffs = a.iter().zip(b).map(|(&u, &v)| (u as f64 - v as f64).abs());
        match self {
            Norm::Linf => diffs.fold(0.0, f64::max),
            Norm::L2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linf" => Ok(Norm::Linf),
            "l2" => Ok(Norm::L2),
            _ => Err(Error::InvalidConfig(format!("unknown norm '{s}'"))),
        }
    }
}

/// How a targeted attack picks its target class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetRule {
    /// Highest-scoring class other than the true label on the clean input.
    RunnerUp,
    Fixed(usize),
}

impl fmt::Display for TargetRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetRule::RunnerUp => f.write_str("runner-up"),
            TargetRule::Fixed(k) => write!(f, "fixed:{k}"),
        }
    }
}

impl FromStr for TargetRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "runner-up" {
            return Ok(TargetRule::RunnerUp);
        }
        s.strip_prefix("fixed:")
            .and_then(|k| k.parse().ok())
            .map(TargetRule::Fixed)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown target rule '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub norm: Norm,
    pub eps: f32,
    pub iterations: usize,
    pub momentum: f32,
    pub loss: LossKind,
    pub seed: u64,
    pub profile: PrecisionProfile,
    pub target_rule: TargetRule,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            norm: Norm::Linf,
            eps: 0.3,
            iterations: 100,
            momentum: 0.75,
            loss: LossKind::untargeted(LossFamily::Tmifpe),
            seed: 0,
            profile: SINGLE,
            target_rule: TargetRule::RunnerUp,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidConfig(format!("eps must be finite and non-negative, got {}", self.eps)));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.loss.family == LossFamily::Dlr && self.loss.mode == AttackMode::Targeted {
            return Err(Error::InvalidConfig("targeted DLR is not supported".into()));
        }
        Ok(())
    }
}

/// `ε (1 + cos(π i / I))`: `2ε` at the start, `ε` halfway, `0` at the end.
pub fn step_size(i: usize, iterations: usize, eps: f64) -> f64 {
    eps * (1.0 + (std::f64::consts::PI * i as f64 / iterations as f64).cos())
}

/// Projects `x + delta` onto the `norm` ball of radius `eps` around `x` and
/// then onto the unit box. Returns the projected perturbation.
pub fn project(delta: &[f32], norm: Norm, eps: f32, x: &[f32]) -> Vec<f32> {
    let mut candidate: Vec<f32> = x.iter().zip(delta).map(|(&a, &d)| a + d).collect();
    project_point(&mut candidate, norm, eps, x);
    candidate.iter().zip(x).map(|(&c, &a)| c - a).collect()
}

/// In-place projection of a point onto the feasible set around `x`.
fn project_point(point: &mut [f32], norm: Norm, eps: f32, x: &[f32]) {
    match norm {
        Norm::Linf => {
            for (p, &a) in point.iter_mut().zip(x) {
                let lo = (a - eps).max(0.0);
                let hi = (a + eps).min(1.0);
                *p = p.clamp(lo, hi);
            }
        }
        Norm::L2 => {
            let dist = Norm::L2.distance(point, x);
            if dist > eps as f64 {
                let scale = eps as f64 / dist;
                for (p, &a) in point.iter_mut().zip(x) {
                    *p = (a as f64 + (*p as f64 - a as f64) * scale) as f32;
                }
            }
            for p in point.iter_mut() {
                *p = p.clamp(0.0, 1.0);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub x_best: Vec<f32>,
    pub success: bool,
    /// Index of the first successful iterate; 0 is the random start.
    pub first_success_iteration: Option<usize>,
    /// Surrogate loss at iterates `0..=I`.
    pub loss_trace: Vec<f64>,
    /// Surrogate loss of the retained example after each iterate.
    pub best_loss_trace: Vec<f64>,
    /// Scenario of every iterate.
    pub scenario_trace: Vec<ScenarioKind>,
    /// `t` used by the loss at every iterate (`t*` for T-MIFPE).
    pub t_trace: Vec<f64>,
    pub final_norm: f64,
    pub clean_correct: bool,
    pub target: Option<usize>,
    pub zero_gradient_steps: usize,
}

/// One sample to attack: its stream index, clean input and true label.
#[derive(Debug, Clone, Copy)]
pub struct AttackSample<'a> {
    pub index: u64,
    pub x: &'a [f32],
    pub label: usize,
}

struct State {
    x0: Vec<f32>,
    current: Vec<f32>,
    previous: Vec<f32>,
    label: usize,
    /// Class the loss is evaluated at: the true label or the target.
    loss_label: usize,
    target: Option<usize>,
    clean_correct: bool,
    best: Vec<f32>,
    best_key: (bool, f64),
    outcome: AttackOutcome,
}

impl State {
    fn is_success(&self, predicted: usize) -> bool {
        match self.target {
            None => predicted != self.label,
            Some(t) => predicted == t,
        }
    }
}

/// Attacks one input with stream index 0.
pub fn pgd_attack(model: &ModelWeights, x: &[f32], label: usize, config: &AttackConfig) -> Result<AttackOutcome> {
    pgd_attack_indexed(model, AttackSample { index: 0, x, label }, config)
}

pub fn pgd_attack_indexed(model: &ModelWeights, sample: AttackSample<'_>, config: &AttackConfig) -> Result<AttackOutcome> {
    Ok(attack_batch(model, &[sample], config, &mut |_, _, _| {})?.remove(0))
}

/// Attacks `samples` in lockstep. `observer(sample, iterate, point)` sees
/// every iterate, starting with the random start as iterate 0.
pub fn attack_batch(
    model: &ModelWeights,
    samples: &[AttackSample<'_>],
    config: &AttackConfig,
    observer: &mut dyn FnMut(usize, usize, &[f32]),
) -> Result<Vec<AttackOutcome>> {
    config.validate()?;
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let classes = model.classes();
    let clean_inputs: Vec<&[f32]> = samples.iter().map(|s| s.x).collect();
    let clean_logits = model.forward_batch(&clean_inputs)?;

    let mut states = Vec::with_capacity(samples.len());
    for (s, z) in samples.iter().zip(&clean_logits) {
        if s.label >= classes {
            return Err(Error::LabelOutOfRange { index: s.label, classes });
        }
        let ranked = RankedLogits::from_f32(z)?;
        let target = match config.loss.mode {
            AttackMode::Untargeted => None,
            AttackMode::Targeted => Some(resolve_target(&ranked, s.label, config.target_rule, classes)?),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(s.index);
        let mut start: Vec<f32> = s.x.to_vec();
        if config.eps > 0.0 {
            for v in start.iter_mut() {
                *v += rng.random_range(-config.eps..=config.eps);
            }
        }
        project_point(&mut start, config.norm, config.eps, s.x);
        states.push(State {
            x0: s.x.to_vec(),
            previous: start.clone(),
            best: start.clone(),
            current: start,
            label: s.label,
            loss_label: target.unwrap_or(s.label),
            target,
            clean_correct: ranked.argmax() == s.label,
            best_key: (false, f64::NEG_INFINITY),
            outcome: AttackOutcome {
                x_best: Vec::new(),
                success: false,
                first_success_iteration: None,
                loss_trace: Vec::with_capacity(config.iterations + 1),
                best_loss_trace: Vec::with_capacity(config.iterations + 1),
                scenario_trace: Vec::with_capacity(config.iterations + 1),
                t_trace: Vec::with_capacity(config.iterations + 1),
                final_norm: 0.0,
                clean_correct: false,
                target,
                zero_gradient_steps: 0,
            },
        });
    }

    let nu = config.momentum;
    for k in 0..=config.iterations {
        // Evaluate every current iterate: record it, then (unless this is the
        // last one) take a step from it.
        let points: Vec<&[f32]> = states.iter().map(|s| s.current.as_slice()).collect();
        let labels: Vec<usize> = states.iter().map(|s| s.loss_label).collect();
        let evals = input_gradient_batch(model, &points, |r, z| {
            evaluate(config.loss, &RankedLogits::new(z)?, labels[r], &config.profile)
        })?;

        for (r, (state, eval)) in states.iter_mut().zip(evals).enumerate() {
            observer(r, k, &state.current);
            let ranked = RankedLogits::from_f32(&eval.logits)?;
            let success = state.is_success(ranked.argmax());
            let scenario = classify_scenario(&ranked, state.loss_label, config.loss.mode)?;
            let value = eval.loss.value;
            let out = &mut state.outcome;
            out.loss_trace.push(value);
            out.scenario_trace.push(scenario.kind);
            out.t_trace.push(eval.loss.t_used);
            if success && out.first_success_iteration.is_none() {
                out.first_success_iteration = Some(k);
            }
            // Successful iterates outrank unsuccessful ones, then higher loss wins.
            let key = (success, value);
            if key.0 > state.best_key.0 || (key.0 == state.best_key.0 && key.1 > state.best_key.1) {
                state.best_key = key;
                state.best.clone_from(&state.current);
            }
            out.best_loss_trace.push(state.best_key.1);

            if k == config.iterations {
                continue;
            }
            let grad = &eval.gradient;
            let direction: Option<Vec<f32>> = match config.norm {
                Norm::Linf => grad
                    .iter()
                    .any(|&g| g != 0.0)
                    .then(|| grad.iter().map(|&g| if g == 0.0 { 0.0 } else { g.signum() }).collect()),
                Norm::L2 => {
                    let n = grad.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
                    (n > 0.0 && n.is_finite()).then(|| grad.iter().map(|&g| (g as f64 / n) as f32).collect())
                }
            };
            let Some(direction) = direction else {
                out.zero_gradient_steps += 1;
                state.previous.clone_from(&state.current);
                continue;
            };
            let alpha = step_size(k, config.iterations, config.eps as f64) as f32;
            let mut z: Vec<f32> = state.current.iter().zip(&direction).map(|(&c, &d)| c + alpha * d).collect();
            project_point(&mut z, config.norm, config.eps, &state.x0);
            let mut next: Vec<f32> = state
                .current
                .iter()
                .zip(&z)
                .zip(&state.previous)
                .map(|((&c, &zc), &p)| c + nu * (zc - c) + (1.0 - nu) * (c - p))
                .collect();
            project_point(&mut next, config.norm, config.eps, &state.x0);
            state.previous = std::mem::replace(&mut state.current, next);
        }
    }

    Ok(states
        .into_iter()
        .map(|s| {
            let mut out = s.outcome;
            out.final_norm = config.norm.distance(&s.best, &s.x0);
            out.success = s.best_key.0;
            out.clean_correct = s.clean_correct;
            out.x_best = s.best;
            out
        })
        .collect())
}

fn resolve_target(ranked: &RankedLogits, label: usize, rule: TargetRule, classes: usize) -> Result<usize> {
    match rule {
        TargetRule::RunnerUp => Ok(if ranked.argmax() == label { ranked.class_at(2) } else { ranked.argmax() }),
        TargetRule::Fixed(k) if k >= classes => Err(Error::LabelOutOfRange { index: k, classes }),
        TargetRule::Fixed(k) if k == label => {
            Err(Error::InvalidConfig(format!("target class {k} equals the true label")))
        }
        TargetRule::Fixed(k) => Ok(k),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: u64,
    pub label: usize,
    pub target: Option<usize>,
    pub clean_correct: bool,
    pub success: bool,
    pub first_success_iteration: Option<usize>,
    pub final_norm: f64,
    pub zero_gradient_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub samples: usize,
    pub clean_accuracy: f64,
    /// Clean-correct samples the attack never succeeded on.
    pub robust_accuracy: f64,
    /// Mean first-success iterate over successful samples.
    pub mean_first_success: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub config: AttackConfig,
    pub samples: Vec<SampleRecord>,
    pub aggregate: Aggregate,
}

/// Samples attacked per lockstep batch.
pub const ATTACK_BATCH: usize = 100;

/// Attacks every sample of `data` (sample `i` uses stream `i`).
pub fn robust_accuracy(model: &ModelWeights, data: &Dataset, config: &AttackConfig) -> Result<AttackReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("dataset is empty".into()));
    }
    let mut records = Vec::with_capacity(data.len());
    for start in (0..data.len()).step_by(ATTACK_BATCH) {
        let end = (start + ATTACK_BATCH).min(data.len());
        let batch: Vec<AttackSample> = (start..end)
            .map(|i| AttackSample { index: i as u64, x: &data.images[i], label: data.labels[i] })
            .collect();
        let outcomes = attack_batch(model, &batch, config, &mut |_, _, _| {})?;
        for (s, o) in batch.iter().zip(outcomes) {
            records.push(SampleRecord {
                index: s.index,
                label: s.label,
                target: o.target,
                clean_correct: o.clean_correct,
                success: o.success,
                first_success_iteration: o.first_success_iteration,
                final_norm: o.final_norm,
                zero_gradient_steps: o.zero_gradient_steps,
            });
        }
    }
    let n = records.len() as f64;
    let clean = records.iter().filter(|r| r.clean_correct).count() as f64;
    let robust = records.iter().filter(|r| r.clean_correct && !r.success).count() as f64;
    let firsts: Vec<f64> = records.iter().filter_map(|r| r.first_success_iteration.map(|i| i as f64)).collect();
    let mean_first_success = (!firsts.is_empty()).then(|| firsts.iter().sum::<f64>() / firsts.len() as f64);
    Ok(AttackReport {
        config: *config,
        aggregate: Aggregate { samples: records.len(), clean_accuracy: clean / n, robust_accuracy: robust / n, mean_first_success },
        samples: records,
    })
}

/// Indices where `baseline` succeeded but `candidate` did not.
pub fn paired_regressions(baseline: &AttackReport, candidate: &AttackReport) -> Vec<u64> {
    baseline
        .samples
        .iter()
        .zip(&candidate.samples)
        .filter(|(b, c)| b.success && !c.success)
        .map(|(b, _)| b.index)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::nn::{forward, train, TrainConfig};

    #[test]
    fn step_size_endpoints() {
        assert_eq!(step_size(0, 100, 0.3), 0.6);
        assert!((step_size(50, 100, 0.3) - 0.3).abs() < 1e-16);
        assert!(step_size(100, 100, 0.3).abs() < 1e-16);
    }

    #[test]
    fn linf_projection() {
        let x = [0.5f32, 0.5, 1.0];
        let d = project(&[0.05, -0.9, 0.2], Norm::Linf, 0.1, &x);
        assert!((d[0] - 0.05).abs() < 1e-7);
        assert!((d[1] + 0.1).abs() < 1e-7);
        assert_eq!(d[2], 0.0);
    }

    #[test]
    fn l2_projection_scales_to_radius() {
        let x = [0.5f32; 4];
        let d = project(&[0.2, 0.0, 0.0, 0.0], Norm::L2, 0.1, &x);
        assert!((d[0] - 0.1).abs() < 1e-7);
        let inside = project(&[0.03, 0.04, 0.0, 0.0], Norm::L2, 0.1, &x);
        assert!((inside[0] - 0.03).abs() < 1e-7 && (inside[1] - 0.04).abs() < 1e-7);
    }

    #[test]
    fn box_clamps_positive_delta_at_one() {
        let x = [1.0f32; 3];
        assert_eq!(project(&[0.2, 0.1, 0.05], Norm::Linf, 0.3, &x), vec![0.0; 3]);
    }

    #[test]
    fn parsing() {
        assert_eq!("linf".parse::<Norm>().unwrap(), Norm::Linf);
        assert_eq!("fixed:3".parse::<TargetRule>().unwrap(), TargetRule::Fixed(3));
        assert_eq!("runner-up".parse::<TargetRule>().unwrap(), TargetRule::RunnerUp);
        assert!("fixed:x".parse::<TargetRule>().is_err());
        assert!("l1".parse::<Norm>().is_err());
    }

    fn blob_model() -> (ModelWeights, Dataset) {
        let tr = synth_blobs(0, 3, 60, 4, 3.0).unwrap();
        let cfg = TrainConfig { epochs: 5, batch: 16, learning_rate: 0.1, ..Default::default() };
        let (m, _) = train(&tr, None, &[4, 16, 3], &cfg).unwrap();
        (m, synth_blobs(5, 3, 10, 4, 3.0).unwrap())
    }

    #[test]
    fn zero_eps_keeps_input() {
        let (m, data) = blob_model();
        let cfg = AttackConfig { eps: 0.0, iterations: 5, ..Default::default() };
        for i in 0..data.len() {
            let out = pgd_attack(&m, &data.images[i], data.labels[i], &cfg).unwrap();
            assert_eq!(out.x_best, data.images[i]);
            let pred = crate::nn::predict(&m, &data.images[i]).unwrap();
            assert_eq!(out.success, pred != data.labels[i]);
        }
        let report = robust_accuracy(&m, &data, &cfg).unwrap();
        assert_eq!(report.aggregate.robust_accuracy, report.aggregate.clean_accuracy);
    }

    #[test]
    fn large_eps_breaks_everything() {
        let (m, data) = blob_model();
        let cfg = AttackConfig { eps: 1.0, iterations: 20, ..Default::default() };
        let report = robust_accuracy(&m, &data, &cfg).unwrap();
        assert_eq!(report.aggregate.robust_accuracy, 0.0);
    }

    #[test]
    fn outcome_invariants() {
        let (m, data) = blob_model();
        for loss in [LossKind::untargeted(LossFamily::Tmifpe), LossKind::targeted(LossFamily::Ce)] {
            for norm in [Norm::Linf, Norm::L2] {
                let cfg = AttackConfig { eps: 0.15, iterations: 30, loss, norm, ..Default::default() };
                for i in 0..data.len() {
                    let x = &data.images[i];
                    let out = pgd_attack(&m, x, data.labels[i], &cfg).unwrap();
                    let pred = RankedLogits::from_f32(&forward(&m, &out.x_best).unwrap()).unwrap().argmax();
                    let ok = match out.target {
                        None => pred != data.labels[i],
                        Some(t) => pred == t,
                    };
                    assert_eq!(out.success, ok);
                    assert!(out.final_norm <= 0.15 * (1.0 + 1e-6));
                    assert_eq!(out.loss_trace.len(), 31);
                    // Lexicographic best key never decreases.
                    let mut seen_success = false;
                    for (k, w) in out.best_loss_trace.windows(2).enumerate() {
                        let now_success = out.first_success_iteration.is_some_and(|f| f <= k + 1);
                        if now_success == seen_success {
                            assert!(w[1] >= w[0]);
                        }
                        seen_success = now_success;
                    }
                    if let Some(f) = out.first_success_iteration {
                        assert!(out.scenario_trace[..f].iter().all(|s| !s.is_successful()));
                        assert!(out.scenario_trace[f].is_successful());
                    }
                }
            }
        }
    }

    #[test]
    fn batching_does_not_change_results() {
        let (m, data) = blob_model();
        let cfg = AttackConfig { eps: 0.1, iterations: 10, ..Default::default() };
        let samples: Vec<AttackSample> = (0..data.len())
            .map(|i| AttackSample { index: i as u64, x: &data.images[i], label: data.labels[i] })
            .collect();
        let together = attack_batch(&m, &samples, &cfg, &mut |_, _, _| {}).unwrap();
        for (s, t) in samples.iter().zip(&together) {
            assert_eq!(&pgd_attack_indexed(&m, *s, &cfg).unwrap(), t);
        }
    }

    #[test]
    fn fixed_target_equal_to_label_is_rejected() {
        let (m, data) = blob_model();
        let cfg = AttackConfig {
            loss: LossKind::targeted(LossFamily::Ce),
            target_rule: TargetRule::Fixed(data.labels[0]),
            ..Default::default()
        };
        assert!(pgd_attack(&m, &data.images[0], data.labels[0], &cfg).is_err());
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            AttackConfig { eps: -1.0, ..Default::default() },
            AttackConfig { iterations: 0, ..Default::default() },
            AttackConfig { momentum: 1.0, ..Default::default() },
            AttackConfig { loss: LossKind::targeted(LossFamily::Dlr), ..Default::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
