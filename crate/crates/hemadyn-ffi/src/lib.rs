//! C ABI over the core simulation and evaluation entry points.
//!
//! Conventions:
//! - every fallible call returns an error code (`HEMADYN_OK` = 0) and
//!   writes results through out-pointers,
//! - objects cross the boundary as opaque handles, freed with the matching
//!   `*_free` function,
//! - the last error message is kept per thread and readable with
//!   [`hemadyn_last_error_message`].
//!
//! The matching header is `include/hemadyn.h`, maintained by hand and kept
//! in sync with the `extern "C"` items here.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::slice;

use hemadyn::data::TreatmentSchedule;
use hemadyn::error::Error;
use hemadyn::mech::{simulate, MechModel, MechParams};
use hemadyn::objective::{smse, SmseWeights};
use hemadyn::ode::Trajectory;

pub const HEMADYN_OK: i32 = 0;
pub const HEMADYN_ERR_NULL: i32 = 1;
pub const HEMADYN_ERR_UTF8: i32 = 2;
pub const HEMADYN_ERR_INVALID: i32 = 3;
pub const HEMADYN_ERR_NUMERIC: i32 = 4;
pub const HEMADYN_ERR_BUFFER: i32 = 5;

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn code_of(err: &Error) -> i32 {
    match err {
        Error::Integration { .. } | Error::Domain(_) | Error::NonFiniteGradient { .. } => {
            HEMADYN_ERR_NUMERIC
        }
        _ => HEMADYN_ERR_INVALID,
    }
}

fn fail(err: Error) -> i32 {
    let code = code_of(&err);
    set_error(err.to_string());
    code
}

/// Opaque treatment schedule handle.
pub struct HemadynSchedule(TreatmentSchedule);

/// Opaque daily trajectory handle.
pub struct HemadynTrajectory(Trajectory);

/// Copies the last error message of this thread into `buf` (NUL
/// terminated, truncated to `len` bytes). Returns the full message length.
///
/// # Safety
/// `buf` must point to `len` writable bytes, or be null (query mode).
#[no_mangle]
pub unsafe extern "C" fn hemadyn_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            unsafe {
                std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast(), n);
                *buf.add(n) = 0;
            }
        }
        msg.len()
    })
}

/// Builds a treatment schedule from parallel event arrays and cycle starts.
///
/// # Safety
/// `event_days`/`event_doses` must hold `n_events` elements,
/// `cycle_starts` must hold `n_cycles` elements and `out` must be a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn hemadyn_schedule_new(
    event_days: *const i64,
    event_doses: *const f64,
    n_events: usize,
    cycle_starts: *const i64,
    n_cycles: usize,
    cycle_length: i64,
    out: *mut *mut HemadynSchedule,
) -> i32 {
    if out.is_null()
        || (n_events > 0 && (event_days.is_null() || event_doses.is_null()))
        || (n_cycles > 0 && cycle_starts.is_null())
    {
        set_error("null pointer argument");
        return HEMADYN_ERR_NULL;
    }
    let days = unsafe { slice::from_raw_parts(event_days, n_events) };
    let doses = unsafe { slice::from_raw_parts(event_doses, n_events) };
    let starts = unsafe { slice::from_raw_parts(cycle_starts, n_cycles) };
    let events = days.iter().copied().zip(doses.iter().copied()).collect();
    match TreatmentSchedule::new(events, starts.to_vec(), cycle_length) {
        Ok(s) => {
            unsafe { *out = Box::into_raw(Box::new(HemadynSchedule(s))) };
            HEMADYN_OK
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `handle` must come from [`hemadyn_schedule_new`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn hemadyn_schedule_free(handle: *mut HemadynSchedule) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}

/// Simulates a mechanistic model ("friberg", "henrich", "ms", "ms-rev") at
/// population parameters and returns the daily trajectory.
///
/// # Safety
/// `model_id` must be a NUL-terminated string, `schedule` a live handle and
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hemadyn_simulate(
    model_id: *const c_char,
    schedule: *const HemadynSchedule,
    days: i64,
    out: *mut *mut HemadynTrajectory,
) -> i32 {
    if model_id.is_null() || schedule.is_null() || out.is_null() {
        set_error("null pointer argument");
        return HEMADYN_ERR_NULL;
    }
    let Ok(id) = unsafe { CStr::from_ptr(model_id) }.to_str() else {
        set_error("model id is not valid UTF-8");
        return HEMADYN_ERR_UTF8;
    };
    let Some(model) = MechModel::from_id(id) else {
        set_error(format!("unknown model id {id}"));
        return HEMADYN_ERR_INVALID;
    };
    let schedule = unsafe { &(*schedule).0 };
    match simulate(model, &MechParams::population(model), schedule, days, None) {
        Ok(t) => {
            unsafe { *out = Box::into_raw(Box::new(HemadynTrajectory(t))) };
            HEMADYN_OK
        }
        Err(e) => fail(e),
    }
}

/// Number of daily rows in the trajectory.
///
/// # Safety
/// `handle` must be a live trajectory handle.
#[no_mangle]
pub unsafe extern "C" fn hemadyn_trajectory_len(handle: *const HemadynTrajectory) -> usize {
    if handle.is_null() {
        return 0;
    }
    unsafe { &(*handle).0 }.states.len()
}

/// Copies the observable platelet series (counts per liter, one value per
/// day) into `out`, which must hold at least `len` elements equal to
/// [`hemadyn_trajectory_len`].
///
/// # Safety
/// `handle` must be live; `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn hemadyn_trajectory_observable(
    handle: *const HemadynTrajectory,
    out: *mut f64,
    len: usize,
) -> i32 {
    if handle.is_null() || out.is_null() {
        set_error("null pointer argument");
        return HEMADYN_ERR_NULL;
    }
    let series = unsafe { &(*handle).0 }.observable();
    if len < series.len() {
        set_error(format!("buffer holds {len} values, need {}", series.len()));
        return HEMADYN_ERR_BUFFER;
    }
    unsafe { std::ptr::copy_nonoverlapping(series.as_ptr(), out, series.len()) };
    HEMADYN_OK
}

/// # Safety
/// `handle` must come from [`hemadyn_simulate`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn hemadyn_trajectory_free(handle: *mut HemadynTrajectory) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}

/// Smoothed MSE of observations `(obs_days[i], obs_values[i])` against
/// daily predictions starting at day `pred_t0`.
///
/// # Safety
/// `obs_days`/`obs_values` must hold `n_obs` elements, `pred` must hold
/// `pred_len` elements and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hemadyn_smse(
    obs_days: *const i64,
    obs_values: *const f64,
    n_obs: usize,
    pred_t0: i64,
    pred: *const f64,
    pred_len: usize,
    neighbor_weight: f64,
    out: *mut f64,
) -> i32 {
    if obs_days.is_null() || obs_values.is_null() || pred.is_null() || out.is_null() {
        set_error("null pointer argument");
        return HEMADYN_ERR_NULL;
    }
    let days = unsafe { slice::from_raw_parts(obs_days, n_obs) };
    let values = unsafe { slice::from_raw_parts(obs_values, n_obs) };
    let pred = unsafe { slice::from_raw_parts(pred, pred_len) };
    let obs: Vec<(i64, f64)> = days.iter().copied().zip(values.iter().copied()).collect();
    match smse(&obs, pred_t0, pred, &SmseWeights { neighbor_weight }) {
        Ok(v) => {
            unsafe { *out = v };
            HEMADYN_OK
        }
        Err(e) => fail(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;
    use std::ptr;

    fn chop14_handle() -> *mut HemadynSchedule {
        let days: Vec<i64> = (0..6).flat_map(|c| [14 * c, 14 * c + 1, 14 * c + 2]).collect();
        let doses = vec![1.0; days.len()];
        let starts: Vec<i64> = (0..6).map(|c| 14 * c).collect();
        let mut handle = ptr::null_mut();
        let code = unsafe {
            hemadyn_schedule_new(
                days.as_ptr(),
                doses.as_ptr(),
                days.len(),
                starts.as_ptr(),
                starts.len(),
                14,
                &mut handle,
            )
        };
        assert_eq!(code, HEMADYN_OK);
        handle
    }

    #[test]
    fn simulate_round_trip() {
        let schedule = chop14_handle();
        let model = CString::new("friberg").unwrap();
        let mut traj = ptr::null_mut();
        let code = unsafe { hemadyn_simulate(model.as_ptr(), schedule, 120, &mut traj) };
        assert_eq!(code, HEMADYN_OK);
        let len = unsafe { hemadyn_trajectory_len(traj) };
        assert_eq!(len, 121);
        let mut series = vec![0.0; len];
        let code = unsafe { hemadyn_trajectory_observable(traj, series.as_mut_ptr(), len) };
        assert_eq!(code, HEMADYN_OK);
        assert!((series[0] - 270e9).abs() / 270e9 < 1e-9);
        assert!(series.iter().all(|v| *v > 0.0));
        unsafe {
            hemadyn_trajectory_free(traj);
            hemadyn_schedule_free(schedule);
        }
    }

    #[test]
    fn errors_set_codes_and_messages() {
        let schedule = chop14_handle();
        let model = CString::new("plasma").unwrap();
        let mut traj = ptr::null_mut();
        let code = unsafe { hemadyn_simulate(model.as_ptr(), schedule, 120, &mut traj) };
        assert_eq!(code, HEMADYN_ERR_INVALID);
        let mut buf = vec![0u8; 128];
        let n = unsafe { hemadyn_last_error_message(buf.as_mut_ptr().cast(), buf.len()) };
        let msg = std::str::from_utf8(&buf[..n]).unwrap();
        assert!(msg.contains("plasma"), "{msg}");

        // horizon before the last treatment event
        let good = CString::new("ms").unwrap();
        let code = unsafe { hemadyn_simulate(good.as_ptr(), schedule, 10, &mut traj) };
        assert_ne!(code, HEMADYN_OK);

        let code = unsafe { hemadyn_simulate(ptr::null(), schedule, 10, &mut traj) };
        assert_eq!(code, HEMADYN_ERR_NULL);
        unsafe { hemadyn_schedule_free(schedule) };
    }

    #[test]
    fn smse_matches_hand_value() {
        let days = [1i64];
        let values = [1.0];
        let pred = [1.0, 2.0, 1.0];
        let mut out = 0.0;
        let code = unsafe {
            hemadyn_smse(days.as_ptr(), values.as_ptr(), 1, 0, pred.as_ptr(), 3, 0.3, &mut out)
        };
        assert_eq!(code, HEMADYN_OK);
        assert!((out - 1.0).abs() < 1e-15);
    }

    #[test]
    fn header_declares_every_export() {
        let header = include_str!("../include/hemadyn.h");
        for name in [
            "hemadyn_last_error_message",
            "hemadyn_schedule_new",
            "hemadyn_schedule_free",
            "hemadyn_simulate",
            "hemadyn_trajectory_len",
            "hemadyn_trajectory_observable",
            "hemadyn_trajectory_free",
            "hemadyn_smse",
        ] {
            assert!(header.contains(name), "header is missing {name}");
        }
    }
}
