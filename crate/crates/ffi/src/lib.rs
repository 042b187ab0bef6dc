//! C interface over opaque handles.
//!
//! Every fallible call returns a [`TsaStatus`]; on failure the message is available
//! from [`tsa_last_error`] on the same thread. Angles cross the boundary in degrees.
//! Handles must be released with their `_free` function.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use nalgebra::DVector;
use tsa_core::am::{run_am_with_gain, AmConfig};
use tsa_core::error::{Error, ErrorClass};
use tsa_core::estimation::{estimate_ml, GainMatrix};
use tsa_core::netcase::{
    build_admittance, load_case, solve_power_flow, AdmittanceModel, NetworkCase, PowerFlowOptions, VoltageProfile,
};
use tsa_core::pmu::{build_pmu_model, simulate_measurements, AttackScenario, MeasurementSet, PmuModel, PmuPlacement};
use tsa_core::vulnerability::{find_vulnerable_optimal, uniform_bounds, AscentOptions, BiasLandscape};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TsaStatus {
    Ok = 0,
    ConfigError = 2,
    NumericalError = 3,
    IoError = 4,
    NullPointer = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// A loaded network case.
pub struct TsaCase {
    case: NetworkCase,
    adm: AdmittanceModel,
}

/// A full bus voltage profile `[v_r; v_i]`.
pub struct TsaProfile {
    profile: VoltageProfile,
}

/// PMU measurement model, optionally with the slack angle fixed.
pub struct TsaPmuModel {
    model: PmuModel,
    bus_ids: Vec<u32>,
}

pub struct TsaMeasurements {
    z: MeasurementSet,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(e: Error) -> TsaStatus {
    let status = match e.class() {
        ErrorClass::Config => TsaStatus::ConfigError,
        ErrorClass::Numerical => TsaStatus::NumericalError,
        ErrorClass::Io => TsaStatus::IoError,
    };
    set_error(e.to_string());
    status
}

fn guard(f: impl FnOnce() -> Result<(), TsaStatus>) -> TsaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            TsaStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic".into());
            TsaStatus::Panic
        }
    }
}

fn nonnull<'a, T>(p: *const T, what: &str) -> Result<&'a T, TsaStatus> {
    if p.is_null() {
        set_error(format!("{what} is null"));
        return Err(TsaStatus::NullPointer);
    }
    Ok(unsafe { &*p })
}

unsafe fn input<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], TsaStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    nonnull(p, what)?;
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, need: usize, what: &str) -> Result<&'a mut [T], TsaStatus> {
    if len < need {
        set_error(format!("{what} holds {len} values, {need} needed"));
        return Err(TsaStatus::BufferTooSmall);
    }
    if need == 0 {
        return Ok(&mut []);
    }
    nonnull(p as *const T, what)?;
    Ok(slice::from_raw_parts_mut(p, len))
}

fn put<T>(out: *mut *mut T, value: T) -> Result<(), TsaStatus> {
    if out.is_null() {
        set_error("output handle pointer is null".into());
        return Err(TsaStatus::NullPointer);
    }
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

fn bus_index(ids: &[u32], id: u32) -> Result<usize, TsaStatus> {
    ids.iter()
        .position(|&b| b == id)
        .ok_or_else(|| fail(Error::InvalidArgument(format!("unknown bus {id}"))))
}

/// Message of the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn tsa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a case file (either supported text format, chosen by content).
#[no_mangle]
pub unsafe extern "C" fn tsa_case_load(path: *const c_char, out: *mut *mut TsaCase) -> TsaStatus {
    guard(|| {
        let path = nonnull(path, "path")?;
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(Error::InvalidArgument("path is not UTF-8".into())))?;
        let case = load_case(path).map_err(fail)?;
        let adm = build_admittance(&case).map_err(fail)?;
        put(out, TsaCase { case, adm })
    })
}

#[no_mangle]
pub unsafe extern "C" fn tsa_case_free(net: *mut TsaCase) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

#[no_mangle]
pub unsafe extern "C" fn tsa_case_n_bus(net: *const TsaCase) -> usize {
    net.as_ref().map_or(0, |c| c.case.n_bus())
}

/// Copies the external bus ids, in internal order, into `ids`.
#[no_mangle]
pub unsafe extern "C" fn tsa_case_bus_ids(net: *const TsaCase, ids: *mut u32, len: usize) -> TsaStatus {
    guard(|| {
        let c = nonnull(net, "case")?;
        let src = c.case.bus_ids();
        output(ids, len, src.len(), "ids")?[..src.len()].copy_from_slice(&src);
        Ok(())
    })
}

/// AC power flow with every load scaled by `load_scale`.
#[no_mangle]
pub unsafe extern "C" fn tsa_power_flow(
    net: *const TsaCase,
    load_scale: f64,
    out: *mut *mut TsaProfile,
) -> TsaStatus {
    guard(|| {
        let c = nonnull(net, "case")?;
        let pf = solve_power_flow(&c.case, load_scale, &PowerFlowOptions::default()).map_err(fail)?;
        put(out, TsaProfile { profile: pf.profile })
    })
}

#[no_mangle]
pub unsafe extern "C" fn tsa_profile_free(profile: *mut TsaProfile) {
    if !profile.is_null() {
        drop(Box::from_raw(profile));
    }
}

/// Writes `[v_r; v_i]` (length 2·n_bus). With `zero_slack`, rotated so the slack angle is 0.
#[no_mangle]
pub unsafe extern "C" fn tsa_profile_get(
    net: *const TsaCase,
    profile: *const TsaProfile,
    zero_slack: bool,
    v: *mut f64,
    len: usize,
) -> TsaStatus {
    guard(|| {
        let c = nonnull(net, "case")?;
        let p = &nonnull(profile, "profile")?.profile;
        let p = if zero_slack {
            p.rotated(-p.phasor(c.case.slack_index()).arg())
        } else {
            p.clone()
        };
        output(v, len, p.v.len(), "v")?[..p.v.len()].copy_from_slice(p.v.as_slice());
        Ok(())
    })
}

/// PMU model for the listed bus ids. With `fix_slack`, the state omits the slack imaginary part.
#[no_mangle]
pub unsafe extern "C" fn tsa_pmu_model_new(
    net: *const TsaCase,
    pmu_bus_ids: *const u32,
    n_pmu: usize,
    sigma_v: f64,
    sigma_i: f64,
    fix_slack: bool,
    out: *mut *mut TsaPmuModel,
) -> TsaStatus {
    guard(|| {
        let c = nonnull(net, "case")?;
        let ids = input(pmu_bus_ids, n_pmu, "pmu_bus_ids")?;
        let placement = PmuPlacement::from_bus_ids(&c.case, ids).map_err(fail)?;
        let mut model = build_pmu_model(&c.adm, &placement, sigma_v, sigma_i).map_err(fail)?;
        if fix_slack {
            model = model.reduced(c.case.slack_index()).map_err(fail)?;
        }
        put(
            out,
            TsaPmuModel {
                model,
                bus_ids: c.case.bus_ids(),
            },
        )
    })
}

#[no_mangle]
pub unsafe extern "C" fn tsa_pmu_model_free(model: *mut TsaPmuModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Length of the state vectors this model takes and returns.
#[no_mangle]
pub unsafe extern "C" fn tsa_pmu_model_n_state(model: *const TsaPmuModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.n_state())
}

#[no_mangle]
pub unsafe extern "C" fn tsa_pmu_model_n_pmu(model: *const TsaPmuModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.units.len())
}

/// Maps a full `[v_r; v_i]` vector into the model's state.
#[no_mangle]
pub unsafe extern "C" fn tsa_pmu_model_reduce_state(
    model: *const TsaPmuModel,
    v_full: *const f64,
    len: usize,
    x: *mut f64,
    x_len: usize,
) -> TsaStatus {
    guard(|| {
        let m = &nonnull(model, "model")?.model;
        let v = input(v_full, len, "v_full")?;
        if v.len() != 2 * m.n_bus {
            return Err(fail(Error::dims("full state", 2 * m.n_bus, v.len())));
        }
        let r = m.reduce_state(&DVector::from_column_slice(v));
        output(x, x_len, r.len(), "x")?[..r.len()].copy_from_slice(r.as_slice());
        Ok(())
    })
}

/// Simulates noisy PMU data for state `x`, with offsets (degrees) at the given buses.
#[no_mangle]
pub unsafe extern "C" fn tsa_simulate(
    model: *const TsaPmuModel,
    x: *const f64,
    x_len: usize,
    attack_bus_ids: *const u32,
    attack_deg: *const f64,
    n_attack: usize,
    seed: u64,
    out: *mut *mut TsaMeasurements,
) -> TsaStatus {
    guard(|| {
        let h = nonnull(model, "model")?;
        let x = input(x, x_len, "x")?;
        let ids = input(attack_bus_ids, n_attack, "attack_bus_ids")?;
        let deg = input(attack_deg, n_attack, "attack_deg")?;
        let list = ids
            .iter()
            .zip(deg)
            .map(|(&b, &d)| Ok((bus_index(&h.bus_ids, b)?, d.to_radians())))
            .collect::<Result<Vec<_>, TsaStatus>>()?;
        let attack = AttackScenario::from_angles(h.model.n_bus, &list).map_err(fail)?;
        let z = simulate_measurements(&h.model, &DVector::from_column_slice(x), &attack, seed).map_err(fail)?;
        put(out, TsaMeasurements { z })
    })
}

/// Parses a measurement set from its JSON form.
#[no_mangle]
pub unsafe extern "C" fn tsa_measurements_from_json(json: *const c_char, out: *mut *mut TsaMeasurements) -> TsaStatus {
    guard(|| {
        let s = CStr::from_ptr(nonnull(json, "json")?)
            .to_str()
            .map_err(|_| fail(Error::InvalidArgument("JSON is not UTF-8".into())))?;
        let z = MeasurementSet::from_json(s).map_err(fail)?;
        put(out, TsaMeasurements { z })
    })
}

#[no_mangle]
pub unsafe extern "C" fn tsa_measurements_free(z: *mut TsaMeasurements) {
    if !z.is_null() {
        drop(Box::from_raw(z));
    }
}

/// Attack-unaware weighted least squares; writes `n_state` values.
#[no_mangle]
pub unsafe extern "C" fn tsa_estimate_ml(
    model: *const TsaPmuModel,
    z: *const TsaMeasurements,
    x_hat: *mut f64,
    len: usize,
) -> TsaStatus {
    guard(|| {
        let m = &nonnull(model, "model")?.model;
        let z = &nonnull(z, "measurements")?.z;
        let gain = GainMatrix::new(m).map_err(fail)?;
        let x = estimate_ml(m, &gain, z).map_err(fail)?;
        output(x_hat, len, x.len(), "x_hat")?[..x.len()].copy_from_slice(x.as_slice());
        Ok(())
    })
}

/// Alternating minimization. Writes the state and one offset per PMU (degrees, PMU bus order).
#[no_mangle]
pub unsafe extern "C" fn tsa_run_am(
    model: *const TsaPmuModel,
    z: *const TsaMeasurements,
    tolerance: f64,
    max_iterations: usize,
    x_hat: *mut f64,
    x_len: usize,
    delta_theta_deg: *mut f64,
    n_pmu: usize,
    iterations: *mut usize,
) -> TsaStatus {
    guard(|| {
        let m = &nonnull(model, "model")?.model;
        let z = &nonnull(z, "measurements")?.z;
        let cfg = AmConfig {
            tolerance,
            max_iterations,
            ..AmConfig::default()
        };
        let gain = GainMatrix::new(m).map_err(fail)?;
        let r = run_am_with_gain(m, &gain, z, &cfg).map_err(fail)?;
        output(x_hat, x_len, r.v_hat.len(), "x_hat")?[..r.v_hat.len()].copy_from_slice(r.v_hat.as_slice());
        let out = output(delta_theta_deg, n_pmu, r.delta_theta_hat.len(), "delta_theta_deg")?;
        for (o, t) in out.iter_mut().zip(&r.delta_theta_hat) {
            *o = t.to_degrees();
        }
        if !iterations.is_null() {
            *iterations = r.iterations;
        }
        Ok(())
    })
}

/// Exhaustive search for the `n_p` PMUs whose spoofing (within ±`bound_deg`) biases
/// the estimate most. `profile` is the operating point; the model must not fix the slack.
#[no_mangle]
pub unsafe extern "C" fn tsa_vuln_optimal(
    model: *const TsaPmuModel,
    profile: *const TsaProfile,
    n_p: usize,
    bound_deg: f64,
    bus_ids: *mut u32,
    delta_theta_deg: *mut f64,
    len: usize,
    objective: *mut f64,
) -> TsaStatus {
    guard(|| {
        let m = &nonnull(model, "model")?.model;
        let v = &nonnull(profile, "profile")?.profile.v;
        if m.dropped_column.is_some() {
            return Err(fail(Error::InvalidArgument(
                "vulnerability search needs a model without a fixed slack".into(),
            )));
        }
        let gain = GainMatrix::new(m).map_err(fail)?;
        let land = BiasLandscape::new(m, &gain, v).map_err(fail)?;
        let bounds = uniform_bounds(m.n_bus, bound_deg);
        let r = find_vulnerable_optimal(
            &land,
            m.n_bus,
            n_p,
            &bounds,
            tsa_core::vulnerability::DEFAULT_SUBSET_CAP,
            &AscentOptions::default(),
        )
        .map_err(fail)?;
        let k = r.attacked_buses.len();
        output(bus_ids, len, k, "bus_ids")?[..k].copy_from_slice(&r.attacked_buses);
        let out = output(delta_theta_deg, len, k, "delta_theta_deg")?;
        for (o, t) in out.iter_mut().zip(&r.delta_theta_star) {
            *o = t.to_degrees();
        }
        if !objective.is_null() {
            *objective = r.objective;
        }
        Ok(())
    })
}
