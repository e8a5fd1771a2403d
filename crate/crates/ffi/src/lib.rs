//! C ABI over the `difftomo` engine.
//!
//! Objects cross the boundary as opaque handles created by `dt_*_new`-style
//! constructors and released with the matching `dt_*_free`. Every fallible
//! call returns a [`DtStatus`]; on failure a description is available from
//! [`dt_last_error_message`] on the calling thread until the next failing call.
//! Panics never unwind into C: they are reported as [`DtStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use difftomo::forward::{protocol, simulate_measurements, AcquisitionGeometry, MeasurementSet, Noise};
use difftomo::inverse::{approximant, lt_reconstruct, SolverConfig};
use difftomo::optics::GridSpec;
use difftomo::phantom::{synthesize_stack, ObjectStack, PatternParams};
use difftomo::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    GridMismatch = 3,
    NonFinite = 4,
    OutOfRange = 5,
    Diverged = 6,
    Io = 7,
    Panic = 8,
    BufferTooSmall = 9,
}

/// Acquisition geometry handle.
pub struct DtGeometry(AcquisitionGeometry);

/// Phase stack handle.
pub struct DtStack(ObjectStack);

/// Measurement set handle.
pub struct DtMeasurements(MeasurementSet);

/// Fixed-step solver settings.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DtSolverConfig {
    pub iterations: usize,
    pub step: f64,
    pub tv_alpha: f64,
    pub tv_inner_iters: usize,
}

impl From<SolverConfig> for DtSolverConfig {
    fn from(c: SolverConfig) -> Self {
        DtSolverConfig {
            iterations: c.iterations,
            step: c.step,
            tv_alpha: c.tv_alpha,
            tv_inner_iters: c.tv_inner_iters,
        }
    }
}

impl From<DtSolverConfig> for SolverConfig {
    fn from(c: DtSolverConfig) -> Self {
        SolverConfig {
            iterations: c.iterations,
            step: c.step,
            tv_alpha: c.tv_alpha,
            tv_inner_iters: c.tv_inner_iters,
            ..SolverConfig::approximant()
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(DtStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidArgument(_) | Error::UndefinedCorrelation(_) | Error::OutputExists(_) => {
                DtStatus::InvalidArgument
            }
            Error::GridMismatch { .. } => DtStatus::GridMismatch,
            Error::NonFinite(_) => DtStatus::NonFinite,
            Error::TiltOutOfRange { .. } => DtStatus::OutOfRange,
            Error::Diverged { .. } => DtStatus::Diverged,
            Error::Format { .. } | Error::Image { .. } | Error::Io { .. } | Error::Json { .. } => DtStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(DtStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DtStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            DtStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    // SAFETY: caller guarantees `p` is null or a live handle from this library
    unsafe { p.as_ref() }.ok_or_else(|| null(what))
}

unsafe fn write_out<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    // SAFETY: checked non-null; caller provides writable storage
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Default desk-scale geometry (128 x 128, 16 um pitch, 4 layers).
///
/// # Safety
/// `out` must be null or point to writable storage for a handle pointer.
#[no_mangle]
pub unsafe extern "C" fn dt_geometry_default(out: *mut *mut DtGeometry) -> DtStatus {
    guard(|| unsafe { write_out(out, DtGeometry(AcquisitionGeometry::default())) })
}

/// Default geometry with a custom grid and layer stack.
///
/// # Safety
/// `out` must be null or point to writable storage for a handle pointer.
#[no_mangle]
pub unsafe extern "C" fn dt_geometry_new(
    nx: usize,
    ny: usize,
    pitch: f64,
    layers: usize,
    dz: f64,
    out: *mut *mut DtGeometry,
) -> DtStatus {
    guard(|| {
        let geom = AcquisitionGeometry {
            grid: GridSpec::new(nx, ny, pitch)?,
            layers,
            dz,
            ..AcquisitionGeometry::default()
        };
        geom.validate()?;
        unsafe { write_out(out, DtGeometry(geom)) }
    })
}

/// Set the detection model: photon flux per pixel and read-noise statistics.
///
/// # Safety
/// `geom` must be null or a live geometry handle.
#[no_mangle]
pub unsafe extern "C" fn dt_geometry_set_detection(
    geom: *mut DtGeometry,
    photon_flux: f64,
    read_sigma: f64,
    read_mean: f64,
) -> DtStatus {
    guard(|| {
        // SAFETY: caller guarantees a live handle or null
        let g = unsafe { geom.as_mut() }.ok_or_else(|| null("geometry"))?;
        let updated = AcquisitionGeometry {
            photon_flux,
            read_sigma,
            read_mean,
            ..g.0.clone()
        };
        updated.validate()?;
        g.0 = updated;
        Ok(())
    })
}

/// # Safety
/// `geom` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dt_geometry_free(geom: *mut DtGeometry) {
    if !geom.is_null() {
        // SAFETY: handle was produced by Box::into_raw in this library
        drop(unsafe { Box::from_raw(geom) });
    }
}

/// Random layered phantom with the default pattern statistics.
///
/// # Safety
/// `geom` must be null or a live handle; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn dt_stack_synthesize(geom: *const DtGeometry, seed: u64, out: *mut *mut DtStack) -> DtStatus {
    guard(|| {
        let g = &unsafe { deref(geom, "geometry") }?.0;
        let stack = synthesize_stack(&g.grid, g.dz, g.layers, &PatternParams::default().with_seed(seed))?;
        unsafe { write_out(out, DtStack(stack)) }
    })
}

/// Stack from `layers * ny * nx` row-major phase values, layer-major.
///
/// # Safety
/// `geom` must be null or a live handle; `data` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn dt_stack_from_data(
    geom: *const DtGeometry,
    data: *const f64,
    len: usize,
    out: *mut *mut DtStack,
) -> DtStatus {
    guard(|| {
        let g = &unsafe { deref(geom, "geometry") }?.0;
        if data.is_null() {
            return Err(null("data"));
        }
        // SAFETY: caller guarantees `len` readable values
        let values = unsafe { std::slice::from_raw_parts(data, len) };
        if len != g.layers * g.grid.len() {
            return Err(Failure(
                DtStatus::InvalidArgument,
                format!("expected {} values, got {len}", g.layers * g.grid.len()),
            ));
        }
        let stack = ObjectStack::from_flat(g.grid, g.dz, g.layers, values)?;
        unsafe { write_out(out, DtStack(stack)) }
    })
}

/// Shape of a stack.
///
/// # Safety
/// `stack` must be null or a live handle; output pointers null or writable.
#[no_mangle]
pub unsafe extern "C" fn dt_stack_dims(
    stack: *const DtStack,
    layers: *mut usize,
    ny: *mut usize,
    nx: *mut usize,
) -> DtStatus {
    guard(|| {
        let s = &unsafe { deref(stack, "stack") }?.0;
        if layers.is_null() || ny.is_null() || nx.is_null() {
            return Err(null("dimension output"));
        }
        // SAFETY: checked non-null above
        unsafe {
            *layers = s.layer_count();
            *ny = s.grid().ny;
            *nx = s.grid().nx;
        }
        Ok(())
    })
}

/// Copy all phase values (layer-major, row-major) into `buf`.
///
/// # Safety
/// `stack` must be null or a live handle; `buf` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn dt_stack_copy_data(stack: *const DtStack, buf: *mut f64, len: usize) -> DtStatus {
    guard(|| {
        let s = &unsafe { deref(stack, "stack") }?.0;
        copy_into(&s.to_flat(), buf, len)
    })
}

fn copy_into(values: &[f64], buf: *mut f64, len: usize) -> Result<(), Failure> {
    if buf.is_null() {
        return Err(null("buffer"));
    }
    if len < values.len() {
        return Err(Failure(
            DtStatus::BufferTooSmall,
            format!("buffer holds {len} values, {} needed", values.len()),
        ));
    }
    // SAFETY: caller guarantees `len` writable values and len >= values.len()
    unsafe { ptr::copy_nonoverlapping(values.as_ptr(), buf, values.len()) };
    Ok(())
}

/// # Safety
/// `stack` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dt_stack_free(stack: *mut DtStack) {
    if !stack.is_null() {
        // SAFETY: handle was produced by Box::into_raw in this library
        drop(unsafe { Box::from_raw(stack) });
    }
}

/// Simulate `view_count` views of the standard tilt protocol (22 gives the
/// default set). `noisy = 0` disables noise; otherwise noise is seeded by
/// `noise_seed`.
///
/// # Safety
/// Handles must be null or live; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn dt_simulate(
    stack: *const DtStack,
    geom: *const DtGeometry,
    view_count: usize,
    noisy: i32,
    noise_seed: u64,
    out: *mut *mut DtMeasurements,
) -> DtStatus {
    guard(|| {
        let s = &unsafe { deref(stack, "stack") }?.0;
        let g = &unsafe { deref(geom, "geometry") }?.0;
        let noise = if noisy != 0 { Noise::Seeded(noise_seed) } else { Noise::Off };
        let meas = simulate_measurements(s, g, &protocol(view_count, 10.0), noise)?;
        unsafe { write_out(out, DtMeasurements(meas)) }
    })
}

/// Number of views in a measurement set, 0 for null.
///
/// # Safety
/// `meas` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dt_measurements_view_count(meas: *const DtMeasurements) -> usize {
    // SAFETY: caller guarantees a live handle or null
    unsafe { meas.as_ref() }.map_or(0, |m| m.0.view_count())
}

/// Copy one detected image (row-major, `ny * nx` counts) into `buf`.
///
/// # Safety
/// `meas` must be null or a live handle; `buf` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn dt_measurements_copy_view(
    meas: *const DtMeasurements,
    view: usize,
    buf: *mut f64,
    len: usize,
) -> DtStatus {
    guard(|| {
        let m = &unsafe { deref(meas, "measurements") }?.0;
        let img = m.images.get(view).ok_or_else(|| {
            Failure(
                DtStatus::OutOfRange,
                format!("view {view} of {}", m.view_count()),
            )
        })?;
        copy_into(img, buf, len)
    })
}

/// # Safety
/// `meas` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dt_measurements_free(meas: *mut DtMeasurements) {
    if !meas.is_null() {
        // SAFETY: handle was produced by Box::into_raw in this library
        drop(unsafe { Box::from_raw(meas) });
    }
}

/// Eight plain gradient steps of size 0.05.
#[no_mangle]
pub extern "C" fn dt_solver_config_approximant() -> DtSolverConfig {
    SolverConfig::approximant().into()
}

/// 30 FISTA steps of size 0.05 with TV weight 0.04 and 20 inner iterations.
#[no_mangle]
pub extern "C" fn dt_solver_config_lt() -> DtSolverConfig {
    SolverConfig::learning_tomography().into()
}

unsafe fn solve(
    meas: *const DtMeasurements,
    cfg: *const DtSolverConfig,
    out: *mut *mut DtStack,
    final_cost: *mut f64,
    lt: bool,
) -> DtStatus {
    guard(|| {
        let m = &unsafe { deref(meas, "measurements") }?.0;
        let c: SolverConfig = (*unsafe { deref(cfg, "solver config") }?).into();
        let recon = if lt { lt_reconstruct(m, &c)? } else { approximant(m, &c)? };
        if !final_cost.is_null() {
            // SAFETY: checked non-null; caller provides writable storage
            unsafe { *final_cost = recon.final_cost().unwrap_or(f64::NAN) };
        }
        unsafe { write_out(out, DtStack(recon.stack)) }
    })
}

/// Fixed-step gradient descent from zero. `final_cost` may be null.
///
/// # Safety
/// Handles must be null or live; `out` and `final_cost` null or writable.
#[no_mangle]
pub unsafe extern "C" fn dt_approximant(
    meas: *const DtMeasurements,
    cfg: *const DtSolverConfig,
    out: *mut *mut DtStack,
    final_cost: *mut f64,
) -> DtStatus {
    unsafe { solve(meas, cfg, out, final_cost, false) }
}

/// TV-regularised FISTA reconstruction. `final_cost` may be null.
///
/// # Safety
/// Handles must be null or live; `out` and `final_cost` null or writable.
#[no_mangle]
pub unsafe extern "C" fn dt_lt_reconstruct(
    meas: *const DtMeasurements,
    cfg: *const DtSolverConfig,
    out: *mut *mut DtStack,
    final_cost: *mut f64,
) -> DtStatus {
    unsafe { solve(meas, cfg, out, final_cost, true) }
}

/// Pearson correlation of two arrays of `len` values.
///
/// # Safety
/// `a` and `b` must hold `len` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dt_pcc(a: *const f64, b: *const f64, len: usize, out: *mut f64) -> DtStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return Err(null("pcc argument"));
        }
        // SAFETY: caller guarantees `len` readable values in each array
        let (a, b) = unsafe { (std::slice::from_raw_parts(a, len), std::slice::from_raw_parts(b, len)) };
        let r = difftomo::metrics::pcc(a, b)?;
        // SAFETY: checked non-null
        unsafe { *out = r };
        Ok(())
    })
}

/// Per-layer PCC between two stacks of equal shape; `out` holds one value per layer.
///
/// # Safety
/// Handles must be null or live; `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn dt_stack_layer_pcc(
    recon: *const DtStack,
    truth: *const DtStack,
    out: *mut f64,
    len: usize,
) -> DtStatus {
    guard(|| {
        let r = &unsafe { deref(recon, "reconstruction") }?.0;
        let t = &unsafe { deref(truth, "truth") }?.0;
        let report = difftomo::metrics::evaluate(r, t, None)?;
        copy_into(&report.layer_pcc, out, len)
    })
}

/// Fresnel number `a^2 / (lambda d)`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dt_fresnel_number(feature_size: f64, wavelength: f64, distance: f64, out: *mut f64) -> DtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let f = difftomo::forward::fresnel_number(feature_size, wavelength, distance)?;
        // SAFETY: checked non-null
        unsafe { *out = f };
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CStr;

    #[test]
    fn panics_become_status() {
        let s = guard(|| panic!("boom"));
        assert_eq!(s, DtStatus::Panic);
        let msg = unsafe { CStr::from_ptr(dt_last_error_message()) }.to_str().unwrap();
        assert!(msg.contains("boom"));
    }

    #[test]
    fn error_kinds_map_to_status() {
        let f: Failure = Error::Diverged {
            iteration: 1,
            previous: 1.0,
            current: 20.0,
        }
        .into();
        assert_eq!(f.0, DtStatus::Diverged);
        let f: Failure = Error::NonFinite("x").into();
        assert_eq!(f.0, DtStatus::NonFinite);
    }

    #[test]
    fn solver_config_round_trip() {
        let c = dt_solver_config_lt();
        let back: SolverConfig = c.into();
        assert_eq!(back, SolverConfig::learning_tomography());
    }
}
