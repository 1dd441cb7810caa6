//! C ABI over the zerofield pipeline so other languages can bind.
//!
//! Conventions:
//! - Every fallible call returns a [`ZfStatus`]; `ZF_OK` is 0.
//! - Results live behind opaque handles (`zf_field_map_t`,
//!   `zf_parameter_maps_t`) freed with the matching `_free` function.
//! - Raster data is copied out into caller-owned flat buffers, row-major,
//!   the same layout the core crate uses. Masked pixels are NaN.
//! - On failure, `zf_last_error_message` returns a human-readable reason
//!   for the most recent error on the calling thread.
//!
//! The matching header is `include/zerofield.h`, kept in sync by hand and
//! exercised by the smoke tests.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use zerofield::analysis::{sensitivity, SensitivityInputs, SensitivityMode};
use zerofield::config::MaskSection;
use zerofield::fitstack::{bin, fit_all, quality_mask, FitOptions, ParameterMaps};
use zerofield::magnetostatics::{
    build_cross, field_on_grid, CrossPattern, FieldMap, GridSpec, Route, Vec3,
};
use zerofield::synth::read_stack;

/// Call outcome. Matches `zf_status_t` in the header.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Runtime = 4,
    Panic = 5,
}

/// Field components addressable through the ABI.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZfFieldComponent {
    Bx = 0,
    By = 1,
    Bz = 2,
}

/// Fitted-map channels addressable through the ABI.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZfMapChannel {
    /// Reported field shift (tesla).
    Shift = 0,
    /// 1-sigma error of the shift (tesla).
    ShiftStderr = 1,
    /// Fractional dip depth in percent.
    ContrastPct = 2,
    /// Full width at half maximum (tesla).
    Fwhm = 3,
    /// Fitted offset (counts).
    Y0 = 4,
}

/// Opaque: a simulated vector field map.
pub struct ZfFieldMap(FieldMap);

/// Opaque: fitted parameter maps plus their quality mask.
pub struct ZfParameterMaps {
    maps: ParameterMaps,
    mask: Vec<bool>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_for(err: &zerofield::Error) -> ZfStatus {
    match err {
        zerofield::Error::Config(_) | zerofield::Error::InvalidArgument(_) => {
            ZfStatus::InvalidArgument
        }
        zerofield::Error::Io { .. } => ZfStatus::Io,
        _ => ZfStatus::Runtime,
    }
}

fn fail(err: &zerofield::Error) -> ZfStatus {
    set_last_error(&err.to_string());
    status_for(err)
}

/// Runs `f` with panics converted to `ZfStatus::Panic`.
fn guarded<F: FnOnce() -> ZfStatus>(f: F) -> ZfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_last_error("internal panic");
            ZfStatus::Panic
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn zf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `cap > 0`). Returns the full message length
/// in bytes, excluding the NUL.
///
/// # Safety
/// `buf` must point to at least `cap` writable bytes, or be null (then only
/// the length is returned).
#[no_mangle]
pub unsafe extern "C" fn zf_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            unsafe {
                std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
                *buf.add(n) = 0;
            }
        }
        bytes.len()
    })
}

unsafe fn parse_route(route: *const c_char) -> Result<Route, ZfStatus> {
    if route.is_null() {
        set_last_error("route is null");
        return Err(ZfStatus::NullPointer);
    }
    let s = match unsafe { CStr::from_ptr(route) }.to_str() {
        Ok(s) => s,
        Err(_) => {
            set_last_error("route is not valid UTF-8");
            return Err(ZfStatus::InvalidArgument);
        }
    };
    s.parse::<Route>().map_err(|e| fail(&e))
}

/// Simulates the cross pattern's field on a raster grid.
///
/// `route` is one of "P34", "P14", "P12", "P13", "P23", "P24". Pass 0 for
/// `arm_length_m`, `wire_width_m`, or `n_filaments` to use the defaults
/// (4 mm, 65 um, 9 filaments). On success `*out` owns the new map; free it
/// with [`zf_field_map_free`].
///
/// # Safety
/// `route` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn zf_simulate_cross(
    route: *const c_char,
    current_a: f64,
    arm_length_m: f64,
    wire_width_m: f64,
    n_filaments: u32,
    nx: u32,
    ny: u32,
    pitch_m: f64,
    standoff_m: f64,
    out: *mut *mut ZfFieldMap,
) -> ZfStatus {
    guarded(|| {
        if out.is_null() {
            set_last_error("out is null");
            return ZfStatus::NullPointer;
        }
        let route = match unsafe { parse_route(route) } {
            Ok(r) => r,
            Err(status) => return status,
        };
        let defaults = CrossPattern::default();
        let pattern = CrossPattern {
            arm_length_m: if arm_length_m > 0.0 { arm_length_m } else { defaults.arm_length_m },
            wire_width_m: if wire_width_m > 0.0 { wire_width_m } else { defaults.wire_width_m },
            n_filaments: if n_filaments > 0 { n_filaments as usize } else { defaults.n_filaments },
            center: Vec3::ZERO,
        };
        let grid = GridSpec {
            nx: nx as usize,
            ny: ny as usize,
            pitch_m,
            standoff_m,
            origin: Vec3::ZERO,
        };
        let paths = match build_cross(&pattern, route, current_a) {
            Ok(p) => p,
            Err(e) => return fail(&e),
        };
        match field_on_grid(&paths, &grid) {
            Ok(map) => {
                unsafe { *out = Box::into_raw(Box::new(ZfFieldMap(map))) };
                ZfStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// # Safety
/// `map`, `nx`, and `ny` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn zf_field_map_dims(
    map: *const ZfFieldMap,
    nx: *mut u32,
    ny: *mut u32,
) -> ZfStatus {
    guarded(|| {
        if map.is_null() || nx.is_null() || ny.is_null() {
            set_last_error("null pointer");
            return ZfStatus::NullPointer;
        }
        let map = unsafe { &*map };
        unsafe {
            *nx = map.0.grid.nx as u32;
            *ny = map.0.grid.ny as u32;
        }
        ZfStatus::Ok
    })
}

/// Copies one field component (tesla, row-major) into `out`; `len` must be
/// exactly nx*ny.
///
/// # Safety
/// `map` must be a live handle and `out` must point to `len` f64 slots.
#[no_mangle]
pub unsafe extern "C" fn zf_field_map_component(
    map: *const ZfFieldMap,
    component: ZfFieldComponent,
    out: *mut f64,
    len: usize,
) -> ZfStatus {
    guarded(|| {
        if map.is_null() || out.is_null() {
            set_last_error("null pointer");
            return ZfStatus::NullPointer;
        }
        let map = unsafe { &*map };
        let data = match component {
            ZfFieldComponent::Bx => &map.0.bx,
            ZfFieldComponent::By => &map.0.by,
            ZfFieldComponent::Bz => &map.0.bz,
        };
        if len != data.len() {
            set_last_error(&format!("buffer holds {len} values, raster needs {}", data.len()));
            return ZfStatus::InvalidArgument;
        }
        unsafe { std::ptr::copy_nonoverlapping(data.as_ptr(), out, len) };
        ZfStatus::Ok
    })
}

/// # Safety
/// `map` must be a handle from this library or null.
#[no_mangle]
pub unsafe extern "C" fn zf_field_map_free(map: *mut ZfFieldMap) {
    if !map.is_null() {
        drop(unsafe { Box::from_raw(map) });
    }
}

/// Loads a stack directory (as written by the `zerofield synth` command or
/// the core crate), bins it by `bin_factor`, fits every superpixel, and
/// applies the default quality thresholds. On success `*out` owns the maps;
/// free with [`zf_maps_free`].
///
/// # Safety
/// `stack_dir` must be a NUL-terminated path and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn zf_fit_stack(
    stack_dir: *const c_char,
    bin_factor: u32,
    out: *mut *mut ZfParameterMaps,
) -> ZfStatus {
    guarded(|| {
        if stack_dir.is_null() || out.is_null() {
            set_last_error("null pointer");
            return ZfStatus::NullPointer;
        }
        let dir = match unsafe { CStr::from_ptr(stack_dir) }.to_str() {
            Ok(s) => s,
            Err(_) => {
                set_last_error("stack_dir is not valid UTF-8");
                return ZfStatus::InvalidArgument;
            }
        };
        let stack = match read_stack(Path::new(dir)) {
            Ok(s) => s,
            Err(e) => return fail(&e),
        };
        let binned = match bin(&stack, bin_factor as usize) {
            Ok(b) => b,
            Err(e) => return fail(&e),
        };
        let maps = fit_all(&binned, &FitOptions::default());
        let thresholds = MaskSection::default();
        let mask = quality_mask(
            &maps,
            thresholds.min_contrast_pct,
            thresholds.max_fwhm_t,
            thresholds.max_center_err_t,
        );
        unsafe { *out = Box::into_raw(Box::new(ZfParameterMaps { maps, mask })) };
        ZfStatus::Ok
    })
}

/// # Safety
/// `maps`, `nx`, and `ny` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn zf_maps_dims(
    maps: *const ZfParameterMaps,
    nx: *mut u32,
    ny: *mut u32,
) -> ZfStatus {
    guarded(|| {
        if maps.is_null() || nx.is_null() || ny.is_null() {
            set_last_error("null pointer");
            return ZfStatus::NullPointer;
        }
        let m = unsafe { &*maps };
        unsafe {
            *nx = m.maps.nx as u32;
            *ny = m.maps.ny as u32;
        }
        ZfStatus::Ok
    })
}

/// Copies one fitted channel (row-major, NaN where rejected) into `out`;
/// `len` must be exactly nx*ny.
///
/// # Safety
/// `maps` must be a live handle and `out` must point to `len` f64 slots.
#[no_mangle]
pub unsafe extern "C" fn zf_maps_channel(
    maps: *const ZfParameterMaps,
    channel: ZfMapChannel,
    out: *mut f64,
    len: usize,
) -> ZfStatus {
    guarded(|| {
        if maps.is_null() || out.is_null() {
            set_last_error("null pointer");
            return ZfStatus::NullPointer;
        }
        let m = unsafe { &*maps };
        let data = match channel {
            ZfMapChannel::Shift => &m.maps.shift_t,
            ZfMapChannel::ShiftStderr => &m.maps.shift_stderr_t,
            ZfMapChannel::ContrastPct => &m.maps.contrast_pct,
            ZfMapChannel::Fwhm => &m.maps.fwhm_t,
            ZfMapChannel::Y0 => &m.maps.y0_counts,
        };
        if len != data.len() {
            set_last_error(&format!("buffer holds {len} values, map needs {}", data.len()));
            return ZfStatus::InvalidArgument;
        }
        unsafe { std::ptr::copy_nonoverlapping(data.as_ptr(), out, len) };
        ZfStatus::Ok
    })
}

/// Copies the quality mask: 1 where the pixel was rejected (unconverged or
/// outside the default thresholds), 0 where kept.
///
/// # Safety
/// `maps` must be a live handle and `out` must point to `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn zf_maps_mask(
    maps: *const ZfParameterMaps,
    out: *mut u8,
    len: usize,
) -> ZfStatus {
    guarded(|| {
        if maps.is_null() || out.is_null() {
            set_last_error("null pointer");
            return ZfStatus::NullPointer;
        }
        let m = unsafe { &*maps };
        if len != m.mask.len() {
            set_last_error(&format!("buffer holds {len} values, mask needs {}", m.mask.len()));
            return ZfStatus::InvalidArgument;
        }
        for (i, &masked) in m.mask.iter().enumerate() {
            unsafe { *out.add(i) = masked as u8 };
        }
        ZfStatus::Ok
    })
}

/// # Safety
/// `maps` must be a handle from this library or null.
#[no_mangle]
pub unsafe extern "C" fn zf_maps_free(maps: *mut ZfParameterMaps) {
    if !maps.is_null() {
        drop(unsafe { Box::from_raw(maps) });
    }
}

/// Photon shot-noise limited sensitivity in field units:
/// dB = p_f * gamma_fwhm_T / (contrast * sqrt(photon_rate_hz)), written to
/// `*out` in T/sqrt(Hz).
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn zf_sensitivity_field_units(
    p_f: f64,
    gamma_fwhm_t: f64,
    contrast: f64,
    photon_rate_hz: f64,
    out: *mut f64,
) -> ZfStatus {
    guarded(|| {
        if out.is_null() {
            set_last_error("out is null");
            return ZfStatus::NullPointer;
        }
        let inputs = SensitivityInputs {
            p_f,
            ..SensitivityInputs::field_units(gamma_fwhm_t, contrast, photon_rate_hz)
        };
        match sensitivity(&inputs, SensitivityMode::FieldUnits) {
            Ok(db) => {
                unsafe { *out = db };
                ZfStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}
