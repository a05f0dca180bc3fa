//! C ABI over `grda-core`: an opaque optimizer handle, the proximal maps,
//! tuning schedules and the experiment runner.
//!
//! Every function returns a [`GrdaStatus`]. On failure a message is kept per
//! thread and can be read with [`grda_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use grda_core::experiment::{emit_report, run_experiment, ExperimentConfig};
use grda_core::optimizer::{OptimizerState, Penalty, TuningSchedule};
use grda_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrdaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Numeric = 3,
    Io = 4,
    Config = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrdaScheduleKind {
    Zero = 0,
    Rda = 1,
    PowerLaw = 2,
    SimPowerLaw = 3,
}

/// Tuning schedule `g(n, γ)`. Fields not used by `kind` are ignored.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct GrdaSchedule {
    pub kind: GrdaScheduleKind,
    pub c0: f64,
    pub c: f64,
    pub mu: f64,
    pub t0: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrdaPenaltyKind {
    None = 0,
    L1 = 1,
    ElasticNet = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct GrdaPenalty {
    pub kind: GrdaPenaltyKind,
    pub kappa: f64,
}

/// Opaque optimizer state.
pub struct GrdaOptimizer {
    state: OptimizerState,
    schedule: TuningSchedule,
    penalty: Penalty,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> GrdaStatus {
    match err {
        Error::Config(_) | Error::Json(_) => GrdaStatus::Config,
        Error::Io { .. } => GrdaStatus::Io,
        Error::InvalidArgument(_) | Error::DimensionMismatch { .. } => GrdaStatus::InvalidArgument,
        _ => GrdaStatus::Numeric,
    }
}

fn fail(err: Error) -> GrdaStatus {
    let status = status_of(&err);
    set_error(err.to_string());
    status
}

fn null(what: &str) -> GrdaStatus {
    set_error(format!("null pointer: {what}"));
    GrdaStatus::NullPointer
}

fn guard(f: impl FnOnce() -> GrdaStatus) -> GrdaStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            GrdaStatus::Panic
        }
    }
}

impl GrdaSchedule {
    fn to_core(self) -> TuningSchedule {
        match self.kind {
            GrdaScheduleKind::Zero => TuningSchedule::Zero,
            GrdaScheduleKind::Rda => TuningSchedule::Rda { c0: self.c0 },
            GrdaScheduleKind::PowerLaw => TuningSchedule::PowerLaw {
                c: self.c,
                mu: self.mu,
                t0: self.t0,
            },
            GrdaScheduleKind::SimPowerLaw => TuningSchedule::SimPowerLaw { mu: self.mu },
        }
    }
}

impl GrdaPenalty {
    fn to_core(self) -> Penalty {
        match self.kind {
            GrdaPenaltyKind::None => Penalty::None,
            GrdaPenaltyKind::L1 => Penalty::L1,
            GrdaPenaltyKind::ElasticNet => Penalty::ElasticNet { kappa: self.kappa },
        }
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize) -> &'a [f64] {
    if len == 0 {
        &[]
    } else {
        std::slice::from_raw_parts(p, len)
    }
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize) -> &'a mut [f64] {
    if len == 0 {
        &mut []
    } else {
        std::slice::from_raw_parts_mut(p, len)
    }
}

/// Message of the last failed call on this thread, or NULL.
///
/// The pointer stays valid until the next `grda_*` call on the same thread.
#[no_mangle]
pub extern "C" fn grda_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn grda_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates an optimizer at `w0` (length `d`).
///
/// # Safety
/// `w0` must point to `d` readable doubles; `schedule`, `penalty` and `out`
/// must be valid pointers. Release the handle with [`grda_optimizer_free`].
#[no_mangle]
pub unsafe extern "C" fn grda_optimizer_new(
    w0: *const f64,
    d: usize,
    gamma: f64,
    schedule: *const GrdaSchedule,
    penalty: *const GrdaPenalty,
    out: *mut *mut GrdaOptimizer,
) -> GrdaStatus {
    guard(|| {
        if out.is_null() {
            return null("out");
        }
        if schedule.is_null() || penalty.is_null() || (w0.is_null() && d > 0) {
            return null("w0, schedule or penalty");
        }
        let schedule = (*schedule).to_core();
        let penalty = (*penalty).to_core();
        if let Err(e) = schedule.validate() {
            return fail(e);
        }
        if let Err(e) = penalty.validate(d) {
            return fail(e);
        }
        match OptimizerState::new(slice(w0, d).to_vec(), gamma) {
            Ok(state) => {
                *out = Box::into_raw(Box::new(GrdaOptimizer {
                    state,
                    schedule,
                    penalty,
                }));
                GrdaStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// One step with stochastic gradient `grad` (length `d`).
///
/// # Safety
/// `opt` must come from [`grda_optimizer_new`]; `grad` must point to `d` doubles.
#[no_mangle]
pub unsafe extern "C" fn grda_optimizer_step(opt: *mut GrdaOptimizer, grad: *const f64, d: usize) -> GrdaStatus {
    guard(|| {
        if opt.is_null() || (grad.is_null() && d > 0) {
            return null("optimizer or gradient");
        }
        let opt = &mut *opt;
        match opt.state.step(slice(grad, d), &opt.schedule, &opt.penalty) {
            Ok(()) => GrdaStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// Copies the primal iterate into `out` (length `d`).
///
/// # Safety
/// `opt` must be a live handle; `out` must point to `d` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn grda_optimizer_weights(opt: *const GrdaOptimizer, out: *mut f64, d: usize) -> GrdaStatus {
    guard(|| {
        if opt.is_null() || (out.is_null() && d > 0) {
            return null("optimizer or out");
        }
        let w = &(*opt).state.w;
        if w.len() != d {
            return fail(Error::DimensionMismatch { expected: w.len(), got: d });
        }
        slice_mut(out, d).copy_from_slice(w);
        GrdaStatus::Ok
    })
}

/// Copies the dual accumulator into `out` (length `d`).
///
/// # Safety
/// Same as [`grda_optimizer_weights`].
#[no_mangle]
pub unsafe extern "C" fn grda_optimizer_dual(opt: *const GrdaOptimizer, out: *mut f64, d: usize) -> GrdaStatus {
    guard(|| {
        if opt.is_null() || (out.is_null() && d > 0) {
            return null("optimizer or out");
        }
        let v = &(*opt).state.v;
        if v.len() != d {
            return fail(Error::DimensionMismatch { expected: v.len(), got: d });
        }
        slice_mut(out, d).copy_from_slice(v);
        GrdaStatus::Ok
    })
}

/// Number of steps taken so far.
///
/// # Safety
/// `opt` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn grda_optimizer_steps(opt: *const GrdaOptimizer, out: *mut u64) -> GrdaStatus {
    guard(|| {
        if opt.is_null() || out.is_null() {
            return null("optimizer or out");
        }
        *out = (*opt).state.n;
        GrdaStatus::Ok
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `opt` must come from [`grda_optimizer_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn grda_optimizer_free(opt: *mut GrdaOptimizer) {
    if !opt.is_null() {
        drop(Box::from_raw(opt));
    }
}

/// `g(n, γ)` for the given schedule.
///
/// # Safety
/// `schedule` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn grda_tuning_value(schedule: *const GrdaSchedule, n: u64, gamma: f64, out: *mut f64) -> GrdaStatus {
    guard(|| {
        if schedule.is_null() || out.is_null() {
            return null("schedule or out");
        }
        let s = (*schedule).to_core();
        if let Err(e) = s.validate() {
            return fail(e);
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return fail(Error::InvalidArgument(format!("gamma must be > 0, got {gamma}")));
        }
        *out = s.value(n, gamma);
        GrdaStatus::Ok
    })
}

unsafe fn prox_common(v: *const f64, d: usize, lambda: f64, out: *mut f64, penalty: Penalty) -> GrdaStatus {
    if (v.is_null() || out.is_null()) && d > 0 {
        return null("v or out");
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return fail(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    if let Err(e) = penalty.validate(d) {
        return fail(e);
    }
    let result = penalty.prox(slice(v, d), lambda);
    slice_mut(out, d).copy_from_slice(&result);
    GrdaStatus::Ok
}

/// Soft threshold `sgn(v)(|v| − λ)₊`.
///
/// # Safety
/// `v` and `out` must point to `d` doubles; they may alias.
#[no_mangle]
pub unsafe extern "C" fn grda_prox_l1(v: *const f64, d: usize, lambda: f64, out: *mut f64) -> GrdaStatus {
    guard(|| prox_common(v, d, lambda, out, Penalty::L1))
}

/// `(1 + κλ)⁻¹ sgn(v)(|v| − λ)₊`.
///
/// # Safety
/// As [`grda_prox_l1`].
#[no_mangle]
pub unsafe extern "C" fn grda_prox_elastic_net(v: *const f64, d: usize, lambda: f64, kappa: f64, out: *mut f64) -> GrdaStatus {
    guard(|| prox_common(v, d, lambda, out, Penalty::ElasticNet { kappa }))
}

/// Group shrinkage `(1 − λ/‖v_a‖)₊ v_a`; `group_of[j]` is the group label of
/// coordinate `j`. Labels need not be contiguous.
///
/// # Safety
/// `v`, `out` must point to `d` doubles and `group_of` to `d` labels.
#[no_mangle]
pub unsafe extern "C" fn grda_prox_group_lasso(
    v: *const f64,
    d: usize,
    lambda: f64,
    group_of: *const usize,
    out: *mut f64,
) -> GrdaStatus {
    guard(|| {
        if group_of.is_null() && d > 0 {
            return null("group_of");
        }
        let labels = if d == 0 { &[][..] } else { std::slice::from_raw_parts(group_of, d) };
        let mut keys: Vec<usize> = labels.to_vec();
        keys.sort_unstable();
        keys.dedup();
        let mut groups = vec![Vec::new(); keys.len()];
        for (j, l) in labels.iter().enumerate() {
            groups[keys.binary_search(l).unwrap()].push(j);
        }
        prox_common(v, d, lambda, out, Penalty::GroupLasso { groups })
    })
}

/// Runs the experiment described by `config_json` and writes its CSV and
/// JSON reports into `out_dir` (created if missing).
///
/// # Safety
/// Both arguments must be NUL-terminated UTF-8 strings.
#[no_mangle]
pub unsafe extern "C" fn grda_run_experiment(config_json: *const c_char, out_dir: *const c_char) -> GrdaStatus {
    guard(|| {
        if config_json.is_null() || out_dir.is_null() {
            return null("config_json or out_dir");
        }
        let (Ok(text), Ok(dir)) = (CStr::from_ptr(config_json).to_str(), CStr::from_ptr(out_dir).to_str()) else {
            return fail(Error::InvalidArgument("arguments must be UTF-8".into()));
        };
        let result = ExperimentConfig::from_json(text)
            .and_then(|cfg| run_experiment(&cfg))
            .and_then(|report| emit_report(&report, Path::new(dir)));
        match result {
            Ok(()) => GrdaStatus::Ok,
            Err(e) => fail(e),
        }
    })
}
