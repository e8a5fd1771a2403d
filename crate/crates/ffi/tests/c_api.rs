use std::ffi::CStr;
use std::ptr;

use difftomo_ffi::*;

fn last_error() -> String {
    let p = dt_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn small_geometry() -> *mut DtGeometry {
    let mut g = ptr::null_mut();
    assert_eq!(unsafe { dt_geometry_new(16, 16, 16e-6, 2, 5e-4, &mut g) }, DtStatus::Ok);
    g
}

#[test]
fn simulate_and_reconstruct_round_trip() {
    unsafe {
        let g = small_geometry();
        let mut truth = ptr::null_mut();
        let data: Vec<f64> = (0..512).map(|i| if (i / 4) % 3 == 0 { -0.33 } else { 0.0 }).collect();
        assert_eq!(dt_stack_from_data(g, data.as_ptr(), data.len(), &mut truth), DtStatus::Ok);

        let (mut l, mut ny, mut nx) = (0, 0, 0);
        assert_eq!(dt_stack_dims(truth, &mut l, &mut ny, &mut nx), DtStatus::Ok);
        assert_eq!((l, ny, nx), (2, 16, 16));
        let mut back = vec![0.0; 512];
        assert_eq!(dt_stack_copy_data(truth, back.as_mut_ptr(), back.len()), DtStatus::Ok);
        assert_eq!(back, data);

        let mut meas = ptr::null_mut();
        assert_eq!(dt_simulate(truth, g, 22, 0, 0, &mut meas), DtStatus::Ok);
        assert_eq!(dt_measurements_view_count(meas), 22);
        let mut img = vec![0.0; 256];
        assert_eq!(dt_measurements_copy_view(meas, 21, img.as_mut_ptr(), 256), DtStatus::Ok);
        assert!(img.iter().all(|v| v.is_finite() && *v > 0.0));
        assert_eq!(dt_measurements_copy_view(meas, 22, img.as_mut_ptr(), 256), DtStatus::OutOfRange);

        let cfg = dt_solver_config_approximant();
        assert_eq!((cfg.iterations, cfg.step), (8, 0.05));
        let mut approx = ptr::null_mut();
        let mut j = 0.0;
        assert_eq!(dt_approximant(meas, &cfg, &mut approx, &mut j), DtStatus::Ok);
        assert!(j.is_finite() && j >= 0.0);

        let lt_cfg = dt_solver_config_lt();
        let mut lt = ptr::null_mut();
        assert_eq!(dt_lt_reconstruct(meas, &lt_cfg, &mut lt, ptr::null_mut()), DtStatus::Ok);

        let mut pcc = [0.0; 2];
        assert_eq!(dt_stack_layer_pcc(lt, truth, pcc.as_mut_ptr(), 2), DtStatus::Ok);
        assert!(pcc.iter().all(|p| (-1.0..=1.0).contains(p)));
        assert_eq!(dt_stack_layer_pcc(lt, truth, pcc.as_mut_ptr(), 1), DtStatus::BufferTooSmall);

        dt_stack_free(lt);
        dt_stack_free(approx);
        dt_measurements_free(meas);
        dt_stack_free(truth);
        dt_geometry_free(g);
    }
}

#[test]
fn errors_are_reported() {
    unsafe {
        let mut g = ptr::null_mut();
        assert_eq!(dt_geometry_new(0, 16, 16e-6, 2, 5e-4, &mut g), DtStatus::InvalidArgument);
        assert!(g.is_null());
        assert!(!last_error().is_empty());

        let mut s = ptr::null_mut();
        assert_eq!(dt_stack_synthesize(ptr::null(), 1, &mut s), DtStatus::NullPointer);
        assert!(last_error().contains("geometry"));

        let g = small_geometry();
        assert_eq!(dt_stack_from_data(g, [0.0; 3].as_ptr(), 3, &mut s), DtStatus::InvalidArgument);
        assert_eq!(dt_geometry_set_detection(g, -1.0, 13.0, 0.0), DtStatus::InvalidArgument);
        assert_eq!(dt_geometry_set_detection(g, 500.0, 13.0, 0.0), DtStatus::Ok);

        let bad = DtSolverConfig {
            iterations: 8,
            step: -1.0,
            tv_alpha: 0.0,
            tv_inner_iters: 20,
        };
        let mut truth = ptr::null_mut();
        assert_eq!(dt_stack_synthesize(g, 3, &mut truth), DtStatus::Ok);
        let mut meas = ptr::null_mut();
        assert_eq!(dt_simulate(truth, g, 4, 1, 9, &mut meas), DtStatus::Ok);
        let mut out = ptr::null_mut();
        assert_eq!(dt_approximant(meas, &bad, &mut out, ptr::null_mut()), DtStatus::InvalidArgument);
        assert!(out.is_null());

        dt_measurements_free(meas);
        dt_stack_free(truth);
        dt_geometry_free(g);
        dt_geometry_free(ptr::null_mut());
    }
}

#[test]
fn scalar_helpers() {
    unsafe {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [2.0, 4.0, 6.0, 8.0];
        let mut r = 0.0;
        assert_eq!(dt_pcc(a.as_ptr(), b.as_ptr(), 4, &mut r), DtStatus::Ok);
        assert_eq!(r, 1.0);
        assert_eq!(dt_pcc(a.as_ptr(), [1.0; 4].as_ptr(), 4, &mut r), DtStatus::InvalidArgument);

        let mut f = 0.0;
        assert_eq!(dt_fresnel_number(160e-6, 632.8e-9, 58e-3, &mut f), DtStatus::Ok);
        assert!((f - 0.6975).abs() < 1e-3);
        let v = CStr::from_ptr(dt_version()).to_str().unwrap();
        assert_eq!(v, env!("CARGO_PKG_VERSION"));
    }
}
