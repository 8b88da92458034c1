//! C ABI for the tmifpe library.
//!
//! Every fallible function returns a [`TmifpeStatus`]; on failure a message is
//! kept per thread and can be read with [`tmifpe_last_error`]. Models are
//! opaque handles created by `tmifpe_model_*` constructors and released with
//! [`tmifpe_model_free`]. Enumerated inputs are plain integers validated on
//! entry (see the `TMIFPE_*` constants).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use tmifpe::analysis::{g_derivative, g_value, AttackMode, AttackScenario, RankedLogits, ScenarioKind};
use tmifpe::attack::{pgd_attack_indexed, step_size, AttackConfig, AttackSample, Norm, TargetRule};
use tmifpe::data::{load_weights, save_weights, WeightsMeta};
use tmifpe::losses::{evaluate, LossFamily, LossKind};
use tmifpe::nn::{forward, ModelWeights};
use tmifpe::precision::profile_for;
use tmifpe::tstar::{solve_t_star, SolveMethod};
use tmifpe::Error;

pub const TMIFPE_SCENARIO_UU: u32 = 0;
pub const TMIFPE_SCENARIO_US: u32 = 1;
pub const TMIFPE_SCENARIO_TU: u32 = 2;
pub const TMIFPE_SCENARIO_TS: u32 = 3;

pub const TMIFPE_LOSS_CE: u32 = 0;
pub const TMIFPE_LOSS_CW: u32 = 1;
pub const TMIFPE_LOSS_DLR: u32 = 2;
pub const TMIFPE_LOSS_MIFPE: u32 = 3;
pub const TMIFPE_LOSS_TMIFPE: u32 = 4;

pub const TMIFPE_MODE_UNTARGETED: u32 = 0;
pub const TMIFPE_MODE_TARGETED: u32 = 1;

pub const TMIFPE_NORM_LINF: u32 = 0;
pub const TMIFPE_NORM_L2: u32 = 1;

/// `target` value in [`TmifpeAttackConfig`] selecting the runner-up rule.
pub const TMIFPE_TARGET_RUNNER_UP: i64 = -1;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TmifpeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    UnsupportedPrecision = 3,
    DegenerateGap = 4,
    ScenarioMismatch = 5,
    ShapeMismatch = 6,
    Io = 7,
    Format = 8,
    BufferTooSmall = 9,
    Internal = 10,
}

/// Opaque model handle.
pub struct TmifpeModel {
    inner: ModelWeights,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct TmifpeSolution {
    pub t_star: f64,
    pub c_star: f64,
    pub g_at_star: f64,
    /// `δ_sup(t*)` in the requested precision.
    pub delta_sup: f64,
    pub residual: f64,
    pub iterations: u32,
    /// 1 when the clamp at `t = 1` overrides the underflow bound.
    pub underflow_at_star: u8,
    /// 0 for bisection, 1 for the clamped formula.
    pub method: u8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct TmifpeAttackConfig {
    pub norm: u32,
    pub eps: f32,
    pub iterations: u32,
    pub momentum: f32,
    pub loss: u32,
    pub mode: u32,
    pub seed: u64,
    /// Random-start stream; use the sample index for dataset runs.
    pub stream: u64,
    pub precision: u32,
    /// A class index, or `TMIFPE_TARGET_RUNNER_UP`.
    pub target: i64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct TmifpeAttackResult {
    pub success: u8,
    pub clean_correct: u8,
    /// −1 when no iterate succeeded.
    pub first_success_iteration: i64,
    pub final_norm: f64,
    pub zero_gradient_steps: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let clean = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = clean);
}

fn status_of(err: &Error) -> TmifpeStatus {
    match err {
        Error::UnsupportedPrecision(_) => TmifpeStatus::UnsupportedPrecision,
        Error::DegenerateGap(_) => TmifpeStatus::DegenerateGap,
        Error::ScenarioMismatch { .. } => TmifpeStatus::ScenarioMismatch,
        Error::ShapeMismatch { .. } | Error::CountMismatch { .. } => TmifpeStatus::ShapeMismatch,
        Error::Io { .. } => TmifpeStatus::Io,
        Error::BadMagic { .. } | Error::Truncated { .. } | Error::Manifest { .. } | Error::Json { .. } => {
            TmifpeStatus::Format
        }
        _ => TmifpeStatus::InvalidArgument,
    }
}

struct Failure(TmifpeStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(TmifpeStatus::InvalidArgument, msg.into())
}

fn null(what: &str) -> Failure {
    Failure(TmifpeStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TmifpeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            TmifpeStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            TmifpeStatus::Internal
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(Path::new(s))
}

fn scenario_kind(code: u32) -> Result<ScenarioKind, Failure> {
    ScenarioKind::ALL.get(code as usize).copied().ok_or_else(|| invalid(format!("unknown scenario code {code}")))
}

fn loss_family(code: u32) -> Result<LossFamily, Failure> {
    LossFamily::ALL.get(code as usize).copied().ok_or_else(|| invalid(format!("unknown loss code {code}")))
}

fn attack_mode(code: u32) -> Result<AttackMode, Failure> {
    match code {
        TMIFPE_MODE_UNTARGETED => Ok(AttackMode::Untargeted),
        TMIFPE_MODE_TARGETED => Ok(AttackMode::Targeted),
        _ => Err(invalid(format!("unknown mode code {code}"))),
    }
}

fn scenario_for(logits: &[f64], code: u32, label: usize) -> Result<(RankedLogits, AttackScenario), Failure> {
    let ranked = RankedLogits::new(logits)?;
    let scenario = AttackScenario::for_label(&ranked, scenario_kind(code)?, label)?;
    Ok((ranked, scenario))
}

/// Message for the last failed call on this thread (empty after a success).
/// The pointer stays valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn tmifpe_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Machine epsilon and underflow exponent of a 16, 32 or 64-bit format.
///
/// # Safety
/// `eps_max` and `lambda` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tmifpe_profile(bits: u32, eps_max: *mut f64, lambda: *mut f64) -> TmifpeStatus {
    guard(|| {
        let p = profile_for(bits)?;
        *out(eps_max, "eps_max")? = p.eps_max;
        *out(lambda, "lambda")? = p.lambda;
        Ok(())
    })
}

/// Rounds `x` to the given precision and back.
///
/// # Safety
/// `result` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tmifpe_round(x: f64, bits: u32, result: *mut f64) -> TmifpeStatus {
    guard(|| {
        *out(result, "result")? = profile_for(bits)?.round(x);
        Ok(())
    })
}

/// `g(t)` for the scenario `scenario` with `label` (true label or target).
///
/// # Safety
/// `logits` must point to `classes` doubles; `result` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tmifpe_g_value(
    logits: *const f64,
    classes: usize,
    scenario: u32,
    label: usize,
    t: f64,
    result: *mut f64,
) -> TmifpeStatus {
    guard(|| {
        let (ranked, s) = scenario_for(slice(logits, classes, "logits")?, scenario, label)?;
        *out(result, "result")? = g_value(&ranked, &s, t)?;
        Ok(())
    })
}

/// `g'(t)`, arguments as for [`tmifpe_g_value`].
///
/// # Safety
/// As for [`tmifpe_g_value`].
#[no_mangle]
pub unsafe extern "C" fn tmifpe_g_derivative(
    logits: *const f64,
    classes: usize,
    scenario: u32,
    label: usize,
    t: f64,
    result: *mut f64,
) -> TmifpeStatus {
    guard(|| {
        let (ranked, s) = scenario_for(slice(logits, classes, "logits")?, scenario, label)?;
        *out(result, "result")? = g_derivative(&ranked, &s, t)?;
        Ok(())
    })
}

/// Optimal scale `t*` for the scenario in the given precision.
///
/// # Safety
/// `logits` must point to `classes` doubles; `solution` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tmifpe_solve_t_star(
    logits: *const f64,
    classes: usize,
    scenario: u32,
    label: usize,
    bits: u32,
    solution: *mut TmifpeSolution,
) -> TmifpeStatus {
    guard(|| {
        let (ranked, s) = scenario_for(slice(logits, classes, "logits")?, scenario, label)?;
        let profile = profile_for(bits)?;
        let sol = solve_t_star(&ranked, &s, &profile)?;
        *out(solution, "solution")? = TmifpeSolution {
            t_star: sol.t_star,
            c_star: sol.c_star,
            g_at_star: sol.g_at_star,
            delta_sup: sol.delta_sup_at_star[&bits],
            residual: sol.residual,
            iterations: sol.iterations as u32,
            underflow_at_star: sol.underflow_at_star as u8,
            method: match sol.method {
                SolveMethod::Bisection => 0,
                SolveMethod::ClampedFormula => 1,
            },
        };
        Ok(())
    })
}

/// Cosine step size `ε (1 + cos(π i / I))`. Returns NaN when `iterations` is 0.
#[no_mangle]
pub extern "C" fn tmifpe_step_size(i: u32, iterations: u32, eps: f64) -> f64 {
    if iterations == 0 {
        return f64::NAN;
    }
    step_size(i as usize, iterations as usize, eps)
}

/// Attack surrogate value and its logit gradient (`gradient` holds `classes`
/// doubles).
///
/// # Safety
/// `logits` and `gradient` must point to `classes` doubles; `value` must be
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tmifpe_loss_evaluate(
    loss: u32,
    mode: u32,
    logits: *const f64,
    classes: usize,
    label: usize,
    bits: u32,
    value: *mut f64,
    gradient: *mut f64,
) -> TmifpeStatus {
    guard(|| {
        let kind = LossKind { family: loss_family(loss)?, mode: attack_mode(mode)? };
        let z = slice(logits, classes, "logits")?;
        let eval = evaluate(kind, &RankedLogits::new(z)?, label, &profile_for(bits)?)?;
        *out(value, "value")? = eval.value;
        slice_mut(gradient, classes, "gradient")?.copy_from_slice(&eval.logit_gradient);
        Ok(())
    })
}

/// Seeded He-initialized dense model with rectified hidden layers.
///
/// # Safety
/// `widths` must point to `count` values; `model` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tmifpe_model_init(
    widths: *const usize,
    count: usize,
    seed: u64,
    model: *mut *mut TmifpeModel,
) -> TmifpeStatus {
    guard(|| {
        let slot = out(model, "model")?;
        *slot = ptr::null_mut();
        let inner = ModelWeights::init(slice(widths, count, "widths")?, seed)?;
        *slot = Box::into_raw(Box::new(TmifpeModel { inner }));
        Ok(())
    })
}

/// Loads a weights manifest written by `tmifpe train` or [`tmifpe_model_save`].
///
/// # Safety
/// `path` must be a NUL-terminated string; `model` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn tmifpe_model_load(path: *const c_char, model: *mut *mut TmifpeModel) -> TmifpeStatus {
    guard(|| {
        let slot = out(model, "model")?;
        *slot = ptr::null_mut();
        let (inner, _) = load_weights(path_arg(path)?)?;
        *slot = Box::into_raw(Box::new(TmifpeModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tmifpe_model_save(model: *const TmifpeModel, path: *const c_char, seed: u64) -> TmifpeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        save_weights(path_arg(path)?, &m.inner, &WeightsMeta { seed, precision: 32 })?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tmifpe_model_free(model: *mut TmifpeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input width of the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tmifpe_model_input_width(model: *const TmifpeModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.input_width())
}

/// Number of classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tmifpe_model_classes(model: *const TmifpeModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.classes())
}

/// # Safety
/// `x` must point to `width` floats and `logits` to `classes` floats.
#[no_mangle]
pub unsafe extern "C" fn tmifpe_model_forward(
    model: *const TmifpeModel,
    x: *const f32,
    width: usize,
    logits: *mut f32,
    classes: usize,
) -> TmifpeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let z = forward(&m.inner, slice(x, width, "x")?)?;
        let dst = slice_mut(logits, classes, "logits")?;
        if dst.len() != z.len() {
            return Err(Failure(TmifpeStatus::BufferTooSmall, format!("need {} logits", z.len())));
        }
        dst.copy_from_slice(&z);
        Ok(())
    })
}

/// Default attack settings: ℓ∞, ε = 0.3, 100 iterations, momentum 0.75,
/// untargeted T-MIFPE, seed 0, 32-bit.
#[no_mangle]
pub extern "C" fn tmifpe_attack_config_default() -> TmifpeAttackConfig {
    let d = AttackConfig::default();
    TmifpeAttackConfig {
        norm: TMIFPE_NORM_LINF,
        eps: d.eps,
        iterations: d.iterations as u32,
        momentum: d.momentum,
        loss: TMIFPE_LOSS_TMIFPE,
        mode: TMIFPE_MODE_UNTARGETED,
        seed: d.seed,
        stream: 0,
        precision: d.profile.bits,
        target: TMIFPE_TARGET_RUNNER_UP,
    }
}

fn attack_config(c: &TmifpeAttackConfig) -> Result<AttackConfig, Failure> {
    let norm = match c.norm {
        TMIFPE_NORM_LINF => Norm::Linf,
        TMIFPE_NORM_L2 => Norm::L2,
        n => return Err(invalid(format!("unknown norm code {n}"))),
    };
    let target_rule = match c.target {
        TMIFPE_TARGET_RUNNER_UP => TargetRule::RunnerUp,
        k if k >= 0 => TargetRule::Fixed(k as usize),
        k => return Err(invalid(format!("invalid target {k}"))),
    };
    let config = AttackConfig {
        norm,
        eps: c.eps,
        iterations: c.iterations as usize,
        momentum: c.momentum,
        loss: LossKind { family: loss_family(c.loss)?, mode: attack_mode(c.mode)? },
        seed: c.seed,
        profile: profile_for(c.precision)?,
        target_rule,
    };
    config.validate()?;
    Ok(config)
}

/// Runs PGD on one input. `x_best` (`width` floats) receives the retained
/// adversarial example.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn tmifpe_attack(
    model: *const TmifpeModel,
    x: *const f32,
    width: usize,
    label: usize,
    config: *const TmifpeAttackConfig,
    x_best: *mut f32,
    result: *mut TmifpeAttackResult,
) -> TmifpeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let cfg = attack_config(config.as_ref().ok_or_else(|| null("config"))?)?;
        let x = slice(x, width, "x")?;
        let dst = slice_mut(x_best, width, "x_best")?;
        let res = out(result, "result")?;
        let stream = config.as_ref().map_or(0, |c| c.stream);
        let o = pgd_attack_indexed(&m.inner, AttackSample { index: stream, x, label }, &cfg)?;
        dst.copy_from_slice(&o.x_best);
        *res = TmifpeAttackResult {
            success: o.success as u8,
            clean_correct: o.clean_correct as u8,
            first_success_iteration: o.first_success_iteration.map_or(-1, |i| i as i64),
            final_norm: o.final_norm,
            zero_gradient_steps: o.zero_gradient_steps as u32,
        };
        Ok(())
    })
}
