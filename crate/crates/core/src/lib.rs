//! Limited-angle optical diffraction tomography of layered phase objects.
//!
//! The crate simulates intensity measurements of a stack of thin phase masks
//! with a split-step (multi-slice) beam propagation model, computes the cost
//! gradient by back-propagating the measurement residual through the adjoint
//! cascade, and reconstructs the stack either with a few fixed-step gradient
//! iterations (the approximant) or with FISTA and a total-variation prior.
//!
//! Modules, bottom-up:
//!
//! - [`optics`]: sampled complex fields and the angular-spectrum propagator.
//! - [`phantom`]: layered phase objects, synthetic IC-like patterns, mask loading.
//! - [`forward`]: illumination, multi-slice propagation, detection and noise.
//! - [`inverse`]: cost, adjoint gradient, approximant, TV prox and FISTA.
//! - [`metrics`]: Pearson correlation, calibration and reports.
//! - [`dataio`]: on-disk arrays, image export and dataset generation.

pub mod dataio;
pub mod error;
pub mod forward;
pub mod inverse;
pub mod metrics;
pub mod optics;
pub mod phantom;

pub use error::{Error, Result};
