//! Sampled scalar fields and the angular-spectrum Fresnel propagator.
//!
//! Fields are stored row-major (`iy * nx + ix`) with the optical axis at pixel
//! `(nx / 2, ny / 2)`. Frequency samples follow the usual DFT ordering with the
//! zero frequency at index 0; since propagation is a circular convolution no
//! shifting is needed to apply a kernel.
//!
//! The discrete transforms use the unitary normalisation: forward and inverse
//! are each scaled by `1 / sqrt(nx * ny)`. With that convention the propagator
//! is exactly unitary on the propagating band and its adjoint is the same
//! transform with the conjugated transfer function.
//!
//! The operator does not zero-pad. Wraparound is controlled by the caller's
//! choice of grid; for a 58 mm defocus at 16 µm pitch a grid at least twice the
//! object support keeps the diffracted energy from folding back onto the object.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regular sampling grid centred on the optical axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    /// Sample spacing in the object plane, metres.
    pub pitch: f64,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, pitch: f64) -> Result<Self> {
        let grid = GridSpec { nx, ny, pitch };
        grid.validate()?;
        Ok(grid)
    }

    pub fn square(n: usize, pitch: f64) -> Result<Self> {
        Self::new(n, n, pitch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.ny < 2 {
            return Err(Error::invalid(format!(
                "grid must be at least 2x2, got {}x{}",
                self.nx, self.ny
            )));
        }
        if !(self.pitch.is_finite() && self.pitch > 0.0) {
            return Err(Error::invalid(format!(
                "grid pitch must be positive, got {}",
                self.pitch
            )));
        }
        Ok(())
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Physical x coordinate of column `ix` (axis at `nx / 2`).
    pub fn x(&self, ix: usize) -> f64 {
        (ix as f64 - (self.nx / 2) as f64) * self.pitch
    }

    /// Physical y coordinate of row `iy` (axis at `ny / 2`).
    pub fn y(&self, iy: usize) -> f64 {
        (iy as f64 - (self.ny / 2) as f64) * self.pitch
    }

    /// Angular spatial frequency (rad/m) of DFT column `ix`.
    pub fn kx(&self, ix: usize) -> f64 {
        angular_frequency(ix, self.nx, self.pitch)
    }

    /// Angular spatial frequency (rad/m) of DFT row `iy`.
    pub fn ky(&self, iy: usize) -> f64 {
        angular_frequency(iy, self.ny, self.pitch)
    }

    /// Largest representable angular frequency, `pi / pitch`.
    pub fn nyquist(&self) -> f64 {
        PI / self.pitch
    }

    pub(crate) fn ensure_same(&self, other: &GridSpec) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch {
                expected: self.to_string(),
                found: other.to_string(),
            });
        }
        Ok(())
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{} @ {:e} m", self.nx, self.ny, self.pitch)
    }
}

fn angular_frequency(i: usize, n: usize, pitch: f64) -> f64 {
    let signed = if i < n.div_ceil(2) {
        i as f64
    } else {
        i as f64 - n as f64
    };
    2.0 * PI * signed / (n as f64 * pitch)
}

/// Complex amplitude sampled on a [`GridSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField2D {
    grid: GridSpec,
    values: Vec<Complex64>,
}

impl ComplexField2D {
    pub fn new(grid: GridSpec, values: Vec<Complex64>) -> Result<Self> {
        grid.validate()?;
        if values.len() != grid.len() {
            return Err(Error::invalid(format!(
                "field has {} samples but grid {} needs {}",
                values.len(),
                grid,
                grid.len()
            )));
        }
        if values.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(Error::NonFinite("field"));
        }
        Ok(ComplexField2D { grid, values })
    }

    pub(crate) fn from_raw(grid: GridSpec, values: Vec<Complex64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        ComplexField2D { grid, values }
    }

    pub fn uniform(grid: GridSpec, value: Complex64) -> Self {
        ComplexField2D {
            grid,
            values: vec![value; grid.len()],
        }
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self::uniform(grid, Complex64::new(0.0, 0.0))
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<Complex64> {
        self.values
    }

    pub fn at(&self, ix: usize, iy: usize) -> Complex64 {
        self.values[iy * self.grid.nx + ix]
    }

    /// `sum |u|^2` (multiply by `pitch^2` for physical energy).
    pub fn norm_sqr(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// Hermitian inner product `<self, other> = sum conj(self) * other`.
    pub fn inner(&self, other: &ComplexField2D) -> Complex64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    /// Elementwise squared modulus.
    pub fn intensity(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.norm_sqr()).collect()
    }
}

/// Unitary 2-D DFT built from row and column plans.
pub(crate) struct Fft2 {
    nx: usize,
    ny: usize,
    row_forward: Arc<dyn Fft<f64>>,
    row_inverse: Arc<dyn Fft<f64>>,
    col_forward: Arc<dyn Fft<f64>>,
    col_inverse: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Fft2")
            .field("nx", &self.nx)
            .field("ny", &self.ny)
            .finish()
    }
}

impl Fft2 {
    /// Shared plan for an `nx` by `ny` grid.
    pub(crate) fn for_shape(nx: usize, ny: usize) -> Arc<Fft2> {
        type PlanCache = Mutex<HashMap<(usize, usize), Arc<Fft2>>>;
        static CACHE: OnceLock<PlanCache> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
        guard
            .entry((nx, ny))
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                Arc::new(Fft2 {
                    nx,
                    ny,
                    row_forward: planner.plan_fft_forward(nx),
                    row_inverse: planner.plan_fft_inverse(nx),
                    col_forward: planner.plan_fft_forward(ny),
                    col_inverse: planner.plan_fft_inverse(ny),
                    scale: 1.0 / ((nx * ny) as f64).sqrt(),
                })
            })
            .clone()
    }

    pub(crate) fn forward(&self, data: &mut [Complex64]) {
        self.run(data, &self.row_forward, &self.col_forward);
    }

    pub(crate) fn inverse(&self, data: &mut [Complex64]) {
        self.run(data, &self.row_inverse, &self.col_inverse);
    }

    fn run(&self, data: &mut [Complex64], rows: &Arc<dyn Fft<f64>>, cols: &Arc<dyn Fft<f64>>) {
        let (nx, ny) = (self.nx, self.ny);
        debug_assert_eq!(data.len(), nx * ny);
        rows.process(data);

        let mut transposed = vec![Complex64::new(0.0, 0.0); nx * ny];
        for iy in 0..ny {
            for ix in 0..nx {
                transposed[ix * ny + iy] = data[iy * nx + ix];
            }
        }
        cols.process(&mut transposed);
        for ix in 0..nx {
            for iy in 0..ny {
                data[iy * nx + ix] = transposed[ix * ny + iy] * self.scale;
            }
        }
    }
}

/// Angular-spectrum transfer function for a propagation distance.
///
/// `transfer[iy * nx + ix]` holds `exp(-j (k - sqrt(k^2 - qx^2 - qy^2)) d)` with
/// `q = (kx, ky) + offset`, and zero on the evanescent band `|q| > k`. The
/// offset is the transverse wavevector of a tilted carrier: a field written as
/// `exp(j offset . r) * v(r)` propagates by applying this kernel to `v`.
#[derive(Clone)]
pub struct PropagationKernel {
    grid: GridSpec,
    distance: f64,
    wavenumber: f64,
    offset: (f64, f64),
    transfer: Vec<Complex64>,
    fft: Arc<Fft2>,
}

impl fmt::Debug for PropagationKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PropagationKernel")
            .field("grid", &self.grid)
            .field("distance", &self.distance)
            .field("wavenumber", &self.wavenumber)
            .field("offset", &self.offset)
            .finish_non_exhaustive()
    }
}

/// Kernel for propagation over `distance` metres in a medium of wavenumber
/// `wavenumber` rad/m. Negative distances propagate backwards.
pub fn make_kernel(grid: GridSpec, distance: f64, wavenumber: f64) -> Result<PropagationKernel> {
    make_tilted_kernel(grid, distance, wavenumber, (0.0, 0.0))
}

/// Kernel acting on the slowly varying envelope of a field carried by
/// `exp(j (offset.0 x + offset.1 y))`.
pub fn make_tilted_kernel(
    grid: GridSpec,
    distance: f64,
    wavenumber: f64,
    offset: (f64, f64),
) -> Result<PropagationKernel> {
    grid.validate()?;
    if !distance.is_finite() || !offset.0.is_finite() || !offset.1.is_finite() {
        return Err(Error::NonFinite("kernel parameters"));
    }
    if !(wavenumber.is_finite() && wavenumber > 0.0) {
        return Err(Error::invalid(format!(
            "wavenumber must be positive, got {wavenumber}"
        )));
    }
    let k2 = wavenumber * wavenumber;
    let mut transfer = Vec::with_capacity(grid.len());
    for iy in 0..grid.ny {
        let qy = grid.ky(iy) + offset.1;
        for ix in 0..grid.nx {
            let qx = grid.kx(ix) + offset.0;
            let q2 = qx * qx + qy * qy;
            if q2 <= k2 {
                // k - sqrt(k^2 - q^2) without cancellation
                let kz = (k2 - q2).sqrt();
                let lag = q2 / (wavenumber + kz);
                transfer.push(Complex64::from_polar(1.0, -lag * distance));
            } else {
                transfer.push(Complex64::new(0.0, 0.0));
            }
        }
    }
    Ok(PropagationKernel {
        grid,
        distance,
        wavenumber,
        offset,
        transfer,
        fft: Fft2::for_shape(grid.nx, grid.ny),
    })
}

impl PropagationKernel {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn distance(&self) -> f64 {
        self.distance
    }

    pub fn wavenumber(&self) -> f64 {
        self.wavenumber
    }

    pub fn offset(&self) -> (f64, f64) {
        self.offset
    }

    /// Transfer values in DFT order.
    pub fn transfer(&self) -> &[Complex64] {
        &self.transfer
    }

    pub(crate) fn apply_in_place(&self, values: &mut [Complex64]) {
        self.fft.forward(values);
        for (v, h) in values.iter_mut().zip(&self.transfer) {
            *v *= h;
        }
        self.fft.inverse(values);
    }

    pub(crate) fn apply_adjoint_in_place(&self, values: &mut [Complex64]) {
        self.fft.forward(values);
        for (v, h) in values.iter_mut().zip(&self.transfer) {
            *v *= h.conj();
        }
        self.fft.inverse(values);
    }
}

/// `F^-1 { F{u} * H }`.
pub fn propagate(u: &ComplexField2D, kernel: &PropagationKernel) -> Result<ComplexField2D> {
    kernel.grid.ensure_same(&u.grid)?;
    let mut values = u.values.clone();
    kernel.apply_in_place(&mut values);
    Ok(ComplexField2D::from_raw(u.grid, values))
}

/// Hermitian adjoint of [`propagate`]: the same transform with `conj(H)`.
pub fn adjoint_propagate(u: &ComplexField2D, kernel: &PropagationKernel) -> Result<ComplexField2D> {
    kernel.grid.ensure_same(&u.grid)?;
    let mut values = u.values.clone();
    kernel.apply_adjoint_in_place(&mut values);
    Ok(ComplexField2D::from_raw(u.grid, values))
}
