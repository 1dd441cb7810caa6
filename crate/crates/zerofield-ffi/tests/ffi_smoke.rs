//! Exercises every exported C-ABI symbol through the extern surface,
//! including the error paths.

use std::ffi::{c_char, CString};

use zerofield_ffi::*;

fn last_error() -> String {
    unsafe {
        let needed = zf_last_error_message(std::ptr::null_mut(), 0);
        let mut buf = vec![0u8; needed + 1];
        zf_last_error_message(buf.as_mut_ptr() as *mut c_char, buf.len());
        String::from_utf8_lossy(&buf[..needed]).into_owned()
    }
}

#[test]
fn version_is_a_nul_terminated_semver() {
    let v = unsafe { std::ffi::CStr::from_ptr(zf_version()) };
    let s = v.to_str().unwrap();
    assert!(s.split('.').count() >= 3, "unexpected version {s}");
}

#[test]
fn simulate_and_read_back_a_field_map() {
    let route = CString::new("P34").unwrap();
    let mut map: *mut ZfFieldMap = std::ptr::null_mut();
    let status = unsafe {
        zf_simulate_cross(
            route.as_ptr(),
            0.5,
            0.0, // default arm length
            0.0, // default wire width
            0,   // default filament count
            32,
            24,
            2e-6,
            0.11e-3,
            &mut map,
        )
    };
    assert_eq!(status, ZfStatus::Ok, "{}", last_error());
    assert!(!map.is_null());

    let (mut nx, mut ny) = (0u32, 0u32);
    assert_eq!(
        unsafe { zf_field_map_dims(map, &mut nx, &mut ny) },
        ZfStatus::Ok
    );
    assert_eq!((nx, ny), (32, 24));

    let mut bz = vec![0.0f64; (nx * ny) as usize];
    assert_eq!(
        unsafe { zf_field_map_component(map, ZfFieldComponent::Bz, bz.as_mut_ptr(), bz.len()) },
        ZfStatus::Ok
    );
    // The straight route flips Bz across the wire axis.
    let top = bz[2 * 32 + 16];
    let bottom = bz[21 * 32 + 16];
    assert!(top * bottom < 0.0, "Bz does not change sign: {top:.3e} vs {bottom:.3e}");

    // Wrong buffer size is reported, not UB.
    let mut short = vec![0.0f64; 7];
    assert_eq!(
        unsafe { zf_field_map_component(map, ZfFieldComponent::Bx, short.as_mut_ptr(), short.len()) },
        ZfStatus::InvalidArgument
    );
    assert!(last_error().contains("raster needs"));

    unsafe { zf_field_map_free(map) };
}

#[test]
fn null_and_bad_arguments_are_status_codes() {
    let mut map: *mut ZfFieldMap = std::ptr::null_mut();
    // Null route.
    assert_eq!(
        unsafe {
            zf_simulate_cross(std::ptr::null(), 0.5, 0.0, 0.0, 0, 8, 8, 1e-6, 1e-4, &mut map)
        },
        ZfStatus::NullPointer
    );
    // Unknown route.
    let bad = CString::new("P99").unwrap();
    assert_eq!(
        unsafe { zf_simulate_cross(bad.as_ptr(), 0.5, 0.0, 0.0, 0, 8, 8, 1e-6, 1e-4, &mut map) },
        ZfStatus::InvalidArgument
    );
    assert!(last_error().contains("P99"));
    // Even filament count.
    let route = CString::new("P34").unwrap();
    assert_eq!(
        unsafe { zf_simulate_cross(route.as_ptr(), 0.5, 0.0, 0.0, 4, 8, 8, 1e-6, 1e-4, &mut map) },
        ZfStatus::InvalidArgument
    );
    // Missing stack directory is an I/O error.
    let nowhere = CString::new("/definitely/not/a/stack").unwrap();
    let mut maps: *mut ZfParameterMaps = std::ptr::null_mut();
    assert_eq!(
        unsafe { zf_fit_stack(nowhere.as_ptr(), 16, &mut maps) },
        ZfStatus::Io
    );
}

#[test]
fn fit_stack_round_trip_through_the_abi() {
    use zerofield::config::RunConfig;
    use zerofield::synth::{make_scene, render_stack, write_stack};

    // Build a small zero-current stack with the core crate (uniform 1%
    // feature everywhere), then fit it via the ABI.
    let mut cfg = RunConfig::default();
    cfg.scene.nx = 64;
    cfg.scene.ny = 64;
    cfg.scene.pitch_m = 2.4e-6;
    cfg.scene.current_a = 0.0;
    let scene = make_scene(&cfg.scene_spec().unwrap(), 9).unwrap();
    let stack = render_stack(&scene, &cfg.protocol, &cfg.camera, 9, false).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_stack(&stack, dir.path()).unwrap();

    let c_dir = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut maps: *mut ZfParameterMaps = std::ptr::null_mut();
    let status = unsafe { zf_fit_stack(c_dir.as_ptr(), 16, &mut maps) };
    assert_eq!(status, ZfStatus::Ok, "{}", last_error());

    let (mut nx, mut ny) = (0u32, 0u32);
    assert_eq!(unsafe { zf_maps_dims(maps, &mut nx, &mut ny) }, ZfStatus::Ok);
    assert_eq!((nx, ny), (4, 4));

    let n = (nx * ny) as usize;
    let mut contrast = vec![0.0f64; n];
    assert_eq!(
        unsafe { zf_maps_channel(maps, ZfMapChannel::ContrastPct, contrast.as_mut_ptr(), n) },
        ZfStatus::Ok
    );
    let mut mask = vec![0u8; n];
    assert_eq!(unsafe { zf_maps_mask(maps, mask.as_mut_ptr(), n) }, ZfStatus::Ok);
    for i in 0..n {
        if mask[i] == 0 {
            assert!(
                (contrast[i] - 1.0).abs() < 0.3,
                "pixel {i}: contrast {:.3}% far from the 1% truth",
                contrast[i]
            );
        } else {
            assert!(contrast[i].is_nan());
        }
    }
    assert!(mask.iter().filter(|&&m| m == 0).count() >= n / 2);

    unsafe { zf_maps_free(maps) };
}

#[test]
fn sensitivity_through_the_abi() {
    let mut out = 0.0f64;
    let status = unsafe { zf_sensitivity_field_units(0.70, 2.0e-3, 0.01, 9.68e8, &mut out) };
    assert_eq!(status, ZfStatus::Ok);
    assert!((out - 4.5e-6).abs() / 4.5e-6 < 0.01);

    // Non-positive contrast is rejected.
    assert_eq!(
        unsafe { zf_sensitivity_field_units(0.70, 2.0e-3, 0.0, 9.68e8, &mut out) },
        ZfStatus::InvalidArgument
    );
    assert_eq!(
        unsafe { zf_sensitivity_field_units(0.70, 2.0e-3, 0.01, 9.68e8, std::ptr::null_mut()) },
        ZfStatus::NullPointer
    );
}
