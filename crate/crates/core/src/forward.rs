//! Measurement model: tilted plane-wave illumination, multi-slice propagation
//! through the stack, defocus to the detector, intensity detection and noise.
//!
//! A 10° tilt at 632.8 nm carries a transverse frequency far above the Nyquist
//! limit of a 16 µm grid, so the tilted plane wave cannot be sampled directly.
//! The cascade therefore runs in the frame co-moving with the illumination: the
//! lab-frame field is `exp(j k0 (x sin θx + y sin θy)) * v(x, y)` and the
//! envelope `v` is propagated with kernels evaluated at frequencies shifted by
//! the carrier. Thin masks commute with the carrier and detection discards it,
//! so intensities and gradients are unchanged by the change of frame.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optics::{make_tilted_kernel, ComplexField2D, GridSpec, PropagationKernel};
use crate::phantom::ObjectStack;

/// Refractive index of the immersion oil at 632.8 nm.
pub const N_OIL: f64 = 1.4005;
/// Refractive index of fused silica at 632.8 nm.
pub const N_GLASS: f64 = 1.457;

/// Optical and detector parameters of one acquisition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcquisitionGeometry {
    /// Vacuum wavelength, metres.
    pub wavelength: f64,
    /// Index of the medium between layers.
    pub n_medium: f64,
    /// Index of the medium on the defocus leg to the detector.
    pub n_detector: f64,
    /// Detector defocus distance, metres (may be negative).
    pub defocus: f64,
    pub grid: GridSpec,
    /// Layer spacing, metres.
    pub dz: f64,
    /// Number of layers in the reconstructed stack.
    pub layers: usize,
    /// Mean photon count per pixel for the unobstructed beam.
    pub photon_flux: f64,
    /// Read-noise standard deviation, counts.
    pub read_sigma: f64,
    /// Read-noise mean, counts.
    pub read_mean: f64,
    /// Clip negative noisy counts to zero.
    pub clip_negative: bool,
    /// Largest accepted |θx|, |θy|, degrees.
    pub max_tilt_deg: f64,
}

impl Default for AcquisitionGeometry {
    fn default() -> Self {
        AcquisitionGeometry {
            wavelength: 632.8e-9,
            n_medium: 0.5 * (N_OIL + N_GLASS),
            n_detector: 1.0,
            defocus: 58e-3,
            grid: GridSpec {
                nx: 128,
                ny: 128,
                pitch: 16e-6,
            },
            dz: 0.5e-3,
            layers: 4,
            photon_flux: 1e3,
            read_sigma: 13.0,
            read_mean: 0.0,
            clip_negative: false,
            max_tilt_deg: 15.0,
        }
    }
}

impl AcquisitionGeometry {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let finite = [
            self.wavelength,
            self.n_medium,
            self.n_detector,
            self.defocus,
            self.dz,
            self.photon_flux,
            self.read_sigma,
            self.read_mean,
            self.max_tilt_deg,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("acquisition geometry"));
        }
        if self.wavelength <= 0.0 {
            return Err(Error::invalid("wavelength must be positive"));
        }
        if self.n_medium <= 0.0 || self.n_detector <= 0.0 {
            return Err(Error::invalid("refractive indices must be positive"));
        }
        if self.dz < 0.0 {
            return Err(Error::invalid("layer spacing must be >= 0"));
        }
        if self.layers == 0 {
            return Err(Error::invalid("at least one layer is required"));
        }
        if self.photon_flux < 0.0 || self.read_sigma < 0.0 {
            return Err(Error::invalid("photon_flux and read_sigma must be >= 0"));
        }
        if !(0.0..90.0).contains(&self.max_tilt_deg) {
            return Err(Error::invalid("max_tilt_deg must lie in [0, 90)"));
        }
        Ok(())
    }

    /// Free-space wavenumber `2 pi / lambda`.
    pub fn k0(&self) -> f64 {
        2.0 * PI / self.wavelength
    }

    /// Wavenumber between layers.
    pub fn k_medium(&self) -> f64 {
        self.k0() * self.n_medium
    }

    /// Wavenumber on the detector leg.
    pub fn k_detector(&self) -> f64 {
        self.k0() * self.n_detector
    }
}

/// Sample tilt about the x and y axes, degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Orientation {
    pub theta_x: f64,
    pub theta_y: f64,
}

impl Orientation {
    pub fn new(theta_x: f64, theta_y: f64) -> Self {
        Orientation { theta_x, theta_y }
    }

    pub fn validate(&self, max_tilt_deg: f64) -> Result<()> {
        if !(self.theta_x.is_finite() && self.theta_y.is_finite()) {
            return Err(Error::NonFinite("orientation"));
        }
        if self.theta_x.abs() > max_tilt_deg || self.theta_y.abs() > max_tilt_deg {
            return Err(Error::TiltOutOfRange {
                theta_x: self.theta_x,
                theta_y: self.theta_y,
                limit: max_tilt_deg,
            });
        }
        Ok(())
    }

    /// Transverse wavevector `k0 (sin θx, sin θy)` of the illumination.
    pub fn carrier(&self, k0: f64) -> (f64, f64) {
        (
            k0 * self.theta_x.to_radians().sin(),
            k0 * self.theta_y.to_radians().sin(),
        )
    }
}

/// The 22-view limited-angle protocol: θx from -10° to +10° in 2° steps with
/// θy = 0, then θy over the same range with θx = 0. The normal view appears
/// twice.
pub fn default_protocol() -> Vec<Orientation> {
    protocol(22, 10.0)
}

/// `count` views split between an x sweep (first `ceil(count / 2)`) and a y
/// sweep, each evenly spaced over `[-half_range, half_range]` degrees.
pub fn protocol(count: usize, half_range: f64) -> Vec<Orientation> {
    let sweep = |n: usize| -> Vec<f64> {
        match n {
            0 => vec![],
            1 => vec![0.0],
            _ => (0..n)
                .map(|i| -half_range + 2.0 * half_range * i as f64 / (n - 1) as f64)
                .collect(),
        }
    };
    let nx = count.div_ceil(2);
    let mut views: Vec<Orientation> = sweep(nx).into_iter().map(|t| Orientation::new(t, 0.0)).collect();
    views.extend(sweep(count - nx).into_iter().map(|t| Orientation::new(0.0, t)));
    views
}

/// Sampled lab-frame plane wave `exp(j k0 (x sin θx + y sin θy))`.
pub fn incident_field(geom: &AcquisitionGeometry, o: &Orientation) -> Result<ComplexField2D> {
    geom.validate()?;
    o.validate(geom.max_tilt_deg)?;
    let (cx, cy) = o.carrier(geom.k0());
    let g = geom.grid;
    let mut values = Vec::with_capacity(g.len());
    for iy in 0..g.ny {
        for ix in 0..g.nx {
            values.push(Complex64::from_polar(1.0, cx * g.x(ix) + cy * g.y(iy)));
        }
    }
    ComplexField2D::new(g, values)
}

/// Propagators for one view: inter-layer steps and the defocus leg, both
/// expressed in the illumination's co-moving frame.
#[derive(Debug, Clone)]
pub struct ViewOperator {
    orientation: Orientation,
    inter_layer: PropagationKernel,
    detector: PropagationKernel,
}

/// Fields retained by a forward pass, all in the co-moving frame.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Field just after each layer's mask, `u_1 .. u_L`.
    pub layers: Vec<ComplexField2D>,
    /// Field on the detector.
    pub detector: ComplexField2D,
}

impl ForwardPass {
    /// Multiply a co-moving field by the sampled carrier to get lab-frame
    /// sample values.
    pub fn to_lab_frame(field: &ComplexField2D, incident: &ComplexField2D) -> ComplexField2D {
        let values = field
            .values()
            .iter()
            .zip(incident.values())
            .map(|(v, c)| v * c)
            .collect();
        ComplexField2D::from_raw(*field.grid(), values)
    }
}

impl ViewOperator {
    pub fn new(geom: &AcquisitionGeometry, orientation: Orientation) -> Result<Self> {
        geom.validate()?;
        orientation.validate(geom.max_tilt_deg)?;
        let carrier = orientation.carrier(geom.k0());
        Ok(ViewOperator {
            orientation,
            inter_layer: make_tilted_kernel(geom.grid, geom.dz, geom.k_medium(), carrier)?,
            detector: make_tilted_kernel(geom.grid, geom.defocus, geom.k_detector(), carrier)?,
        })
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn inter_layer_kernel(&self) -> &PropagationKernel {
        &self.inter_layer
    }

    pub fn detector_kernel(&self) -> &PropagationKernel {
        &self.detector
    }

    /// `u_1 = f_1 u_inc`, `u_l = f_l F_dz u_(l-1)`, `u_det = F_d u_L`, with a
    /// unit co-moving incident envelope.
    pub fn forward(&self, stack: &ObjectStack) -> Result<ForwardPass> {
        let grid = *stack.grid();
        self.inter_layer.grid().ensure_same(&grid)?;
        let mut layers = Vec::with_capacity(stack.layer_count());
        let mut field: Vec<Complex64> = vec![Complex64::new(1.0, 0.0); grid.len()];
        for l in 0..stack.layer_count() {
            if l > 0 {
                self.inter_layer.apply_in_place(&mut field);
            }
            for (u, &phi) in field.iter_mut().zip(stack.layer(l)) {
                *u *= Complex64::from_polar(1.0, phi);
            }
            layers.push(ComplexField2D::from_raw(grid, field.clone()));
        }
        self.detector.apply_in_place(&mut field);
        Ok(ForwardPass {
            layers,
            detector: ComplexField2D::from_raw(grid, field),
        })
    }
}

/// Forward operators for a list of views sharing one geometry.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    geometry: AcquisitionGeometry,
    views: Vec<ViewOperator>,
}

impl ForwardModel {
    pub fn new(geometry: &AcquisitionGeometry, orientations: &[Orientation]) -> Result<Self> {
        geometry.validate()?;
        let views = orientations
            .iter()
            .map(|o| ViewOperator::new(geometry, *o))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardModel {
            geometry: geometry.clone(),
            views,
        })
    }

    pub fn geometry(&self) -> &AcquisitionGeometry {
        &self.geometry
    }

    pub fn views(&self) -> &[ViewOperator] {
        &self.views
    }
}

/// Multi-slice propagation of one view; returns the detector field and the
/// per-layer cache used by the adjoint pass.
pub fn bpm_forward(stack: &ObjectStack, geom: &AcquisitionGeometry, o: &Orientation) -> Result<ForwardPass> {
    geom.grid.ensure_same(stack.grid())?;
    ViewOperator::new(geom, *o)?.forward(stack)
}

/// `photon_flux * |u|^2`. A unit-amplitude incident wave with no object gives
/// a mean of exactly `photon_flux` (no evanescent loss at these samplings).
pub fn detect_intensity(u_det: &ComplexField2D, photon_flux: f64) -> Vec<f64> {
    u_det.values().iter().map(|v| photon_flux * v.norm_sqr()).collect()
}

/// Poisson photon statistics with mean `img`, plus Gaussian read noise.
pub fn apply_noise<R: Rng + ?Sized>(img: &[f64], geom: &AcquisitionGeometry, rng: &mut R) -> Result<Vec<f64>> {
    if img.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid("noise model needs finite non-negative intensities"));
    }
    if !(geom.read_sigma >= 0.0 && geom.read_sigma.is_finite() && geom.read_mean.is_finite()) {
        return Err(Error::invalid("invalid read-noise parameters"));
    }
    let read = Normal::new(geom.read_mean, geom.read_sigma)
        .map_err(|e| Error::invalid(format!("read noise: {e}")))?;
    img.iter()
        .map(|&mean| {
            let photons = if mean > 0.0 {
                Poisson::new(mean)
                    .map_err(|e| Error::invalid(format!("poisson mean {mean}: {e}")))?
                    .sample(rng)
            } else {
                0.0
            };
            let v = photons + read.sample(rng);
            Ok(if geom.clip_negative { v.max(0.0) } else { v })
        })
        .collect()
}

/// Intensity images for a tomographic acquisition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub geometry: AcquisitionGeometry,
    pub orientations: Vec<Orientation>,
    /// One row-major image per orientation, in counts.
    pub images: Vec<Vec<f64>>,
}

impl MeasurementSet {
    pub fn new(geometry: AcquisitionGeometry, orientations: Vec<Orientation>, images: Vec<Vec<f64>>) -> Result<Self> {
        let set = MeasurementSet {
            geometry,
            orientations,
            images,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.orientations.len() != self.images.len() {
            return Err(Error::invalid(format!(
                "{} orientations but {} images",
                self.orientations.len(),
                self.images.len()
            )));
        }
        let n = self.geometry.grid.len();
        for img in &self.images {
            if img.len() != n {
                return Err(Error::invalid(format!("image has {} pixels, grid needs {n}", img.len())));
            }
            if img.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("measurement image"));
            }
        }
        Ok(())
    }

    pub fn view_count(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Noise settings for [`simulate_measurements`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Noise {
    Off,
    /// View `i` draws from ChaCha stream `i` of this seed, so results do not
    /// depend on evaluation order or thread count.
    Seeded(u64),
}

/// Forward-simulate every view, optionally adding detector noise.
pub fn simulate_measurements(
    stack: &ObjectStack,
    geom: &AcquisitionGeometry,
    orientations: &[Orientation],
    noise: Noise,
) -> Result<MeasurementSet> {
    geom.validate()?;
    geom.grid.ensure_same(stack.grid())?;
    let model = ForwardModel::new(geom, orientations)?;
    let images = model
        .views()
        .par_iter()
        .enumerate()
        .map(|(i, view)| {
            let pass = view.forward(stack)?;
            let clean = detect_intensity(&pass.detector, geom.photon_flux);
            match noise {
                Noise::Off => Ok(clean),
                Noise::Seeded(seed) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(i as u64);
                    apply_noise(&clean, geom, &mut rng)
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    MeasurementSet::new(geom.clone(), orientations.to_vec(), images)
}

/// Fresnel number `a^2 / (lambda d)`.
pub fn fresnel_number(feature_size: f64, wavelength: f64, distance: f64) -> Result<f64> {
    if !(feature_size > 0.0 && wavelength > 0.0 && distance > 0.0) {
        return Err(Error::invalid("Fresnel number needs positive size, wavelength and distance"));
    }
    Ok(feature_size * feature_size / (wavelength * distance))
}
