//! Multi-layer phase objects: synthetic IC-like layers and binary mask loading.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optics::GridSpec;

/// Stack of thin phase masks separated by `dz`.
///
/// Only the phase is stored: every layer is a pure phase object, so the
/// absorption map is identically zero and the transmission of layer `l` is
/// `exp(j phase[l])`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectStack {
    grid: GridSpec,
    dz: f64,
    layers: Vec<Vec<f64>>,
}

impl ObjectStack {
    pub fn new(grid: GridSpec, dz: f64, layers: Vec<Vec<f64>>) -> Result<Self> {
        grid.validate()?;
        if layers.is_empty() {
            return Err(Error::invalid("object stack needs at least one layer"));
        }
        if !dz.is_finite() || dz < 0.0 {
            return Err(Error::invalid(format!("layer spacing must be >= 0, got {dz}")));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.len() != grid.len() {
                return Err(Error::invalid(format!(
                    "layer {l} has {} samples, grid {grid} needs {}",
                    layer.len(),
                    grid.len()
                )));
            }
            if layer.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("phase layer"));
            }
        }
        Ok(ObjectStack { grid, dz, layers })
    }

    /// All-zero phase stack.
    pub fn zeros(grid: GridSpec, dz: f64, layer_count: usize) -> Result<Self> {
        Self::new(grid, dz, vec![vec![0.0; grid.len()]; layer_count])
    }

    /// Build from `layer_count * nx * ny` values, layer-major then row-major.
    pub fn from_flat(grid: GridSpec, dz: f64, layer_count: usize, data: &[f64]) -> Result<Self> {
        if data.len() != layer_count * grid.len() {
            return Err(Error::invalid(format!(
                "expected {} values for {layer_count} layers on {grid}, got {}",
                layer_count * grid.len(),
                data.len()
            )));
        }
        let layers = data.chunks(grid.len()).map(<[f64]>::to_vec).collect();
        Self::new(grid, dz, layers)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn dz(&self) -> f64 {
        self.dz
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        &self.layers[l]
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.layers
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.layers.concat()
    }

    /// `exp(j phase)` for layer `l`.
    pub fn transmission(&self, l: usize) -> Vec<Complex64> {
        self.layers[l]
            .iter()
            .map(|&p| Complex64::from_polar(1.0, p))
            .collect()
    }

    /// Add `delta` to every phase sample of every layer.
    pub fn offset_phase(&self, delta: f64) -> ObjectStack {
        let layers = self
            .layers
            .iter()
            .map(|layer| layer.iter().map(|p| p + delta).collect())
            .collect();
        ObjectStack {
            grid: self.grid,
            dz: self.dz,
            layers,
        }
    }
}

/// Phase delay of an etched step of `depth` filled with oil instead of glass:
/// `(2 pi / lambda) * depth * (n_oil - n_glass)`.
pub fn phase_from_depth(depth: f64, n_glass: f64, n_oil: f64, wavelength: f64) -> Result<f64> {
    if ![depth, n_glass, n_oil, wavelength].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("phase_from_depth"));
    }
    if wavelength <= 0.0 || depth < 0.0 {
        return Err(Error::invalid("wavelength must be > 0 and depth >= 0"));
    }
    Ok(2.0 * PI / wavelength * depth * (n_oil - n_glass))
}

/// Per-layer refractive-index perturbation `phase / (k dz)`.
pub fn refractive_index_map(stack: &ObjectStack, wavenumber: f64) -> Result<Vec<Vec<f64>>> {
    if stack.dz <= 0.0 {
        return Err(Error::invalid("refractive index needs a positive layer thickness"));
    }
    if !(wavenumber.is_finite() && wavenumber > 0.0) {
        return Err(Error::invalid("wavenumber must be positive"));
    }
    let scale = 1.0 / (wavenumber * stack.dz);
    Ok(stack
        .layers
        .iter()
        .map(|layer| layer.iter().map(|p| p * scale).collect())
        .collect())
}

/// Generator settings for synthetic Manhattan-geometry layers.
///
/// Lengths are in metres and converted to whole pixels on the target grid.
/// The defaults put feature sizes in the 160-450 µm range, which at a 58 mm
/// defocus spans Fresnel numbers of roughly 0.7 to 5.5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatternParams {
    /// Inclusive range of features drawn per layer.
    pub feature_count: (usize, usize),
    /// Short side of rectangles.
    pub rect_width: (f64, f64),
    /// Long side of rectangles.
    pub rect_length: (f64, f64),
    /// Probability that a feature is a long routing trace instead of a pad.
    pub trace_probability: f64,
    pub trace_width: f64,
    /// Allowed etched-area fraction; features that would exceed the upper
    /// bound are dropped and extra features are added below the lower bound.
    pub fill_fraction: (f64, f64),
    /// Phase of etched pixels, radians. The background is zero.
    pub etched_phase: f64,
    pub seed: u64,
}

impl Default for PatternParams {
    fn default() -> Self {
        PatternParams {
            feature_count: (3, 10),
            rect_width: (160e-6, 450e-6),
            rect_length: (160e-6, 900e-6),
            trace_probability: 0.3,
            trace_width: 160e-6,
            fill_fraction: (0.05, 0.45),
            etched_phase: -0.33,
            seed: 0,
        }
    }
}

impl PatternParams {
    pub fn with_seed(&self, seed: u64) -> Self {
        PatternParams {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi;
        if self.feature_count.0 > self.feature_count.1 {
            return Err(Error::invalid("feature_count range is reversed"));
        }
        if !ordered(self.rect_width) || !ordered(self.rect_length) {
            return Err(Error::invalid("rectangle size ranges must be positive and ordered"));
        }
        if !(self.trace_width.is_finite() && self.trace_width > 0.0) {
            return Err(Error::invalid("trace_width must be positive"));
        }
        if !(0.0..=1.0).contains(&self.trace_probability) {
            return Err(Error::invalid("trace_probability must lie in [0, 1]"));
        }
        let (lo, hi) = self.fill_fraction;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::invalid("fill_fraction must be an ordered range in [0, 1]"));
        }
        if !(self.etched_phase > -PI && self.etched_phase <= PI) {
            return Err(Error::invalid("etched_phase must lie in (-pi, pi]"));
        }
        Ok(())
    }
}

fn to_pixels(length: f64, pitch: f64) -> usize {
    ((length / pitch).round() as usize).max(1)
}

/// Axis-aligned rectangle in pixel units.
#[derive(Debug, Clone, Copy)]
struct Rect {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
}

/// Random two-valued layer made of axis-aligned rectangles and traces.
///
/// Deterministic for a given `params.seed`. A zero maximum feature count
/// yields an all-zero layer regardless of the fill bounds.
pub fn synthesize_layer(grid: &GridSpec, params: &PatternParams) -> Result<Vec<f64>> {
    grid.validate()?;
    params.validate()?;
    let (nx, ny) = (grid.nx, grid.ny);
    let min_side = nx.min(ny);
    let rw = (to_pixels(params.rect_width.0, grid.pitch), to_pixels(params.rect_width.1, grid.pitch));
    let rl = (to_pixels(params.rect_length.0, grid.pitch), to_pixels(params.rect_length.1, grid.pitch));
    let tw = to_pixels(params.trace_width, grid.pitch);
    if rw.0 > min_side || rl.0 > nx.max(ny) || tw > min_side {
        return Err(Error::invalid(format!(
            "pattern features ({} px min width, {} px trace) do not fit grid {grid}",
            rw.0, tw
        )));
    }

    let mut mask = vec![false; grid.len()];
    if params.feature_count.1 == 0 {
        return Ok(vec![0.0; grid.len()]);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let wanted = rng.random_range(params.feature_count.0..=params.feature_count.1);
    let max_fill = (params.fill_fraction.1 * grid.len() as f64).floor() as usize;
    let min_fill = (params.fill_fraction.0 * grid.len() as f64).ceil() as usize;
    let mut etched = 0usize;

    let draw = |rng: &mut ChaCha8Rng| -> Rect {
        let horizontal = rng.random_bool(0.5);
        let (along, across) = if rng.random_bool(params.trace_probability) {
            let extent = if horizontal { nx } else { ny };
            let len = rng.random_range(extent / 2..=extent).max(1);
            (len, tw)
        } else {
            let w = rng.random_range(rw.0..=rw.1);
            let l = rng.random_range(rl.0..=rl.1).max(w);
            (l, w)
        };
        let (w, h) = if horizontal { (along, across) } else { (across, along) };
        let (w, h) = (w.min(nx), h.min(ny));
        Rect {
            x0: rng.random_range(0..=nx - w),
            y0: rng.random_range(0..=ny - h),
            w,
            h,
        }
    };

    let paint = |mask: &mut [bool], r: Rect, etched: &mut usize| -> bool {
        let added = (r.y0..r.y0 + r.h)
            .flat_map(|y| (r.x0..r.x0 + r.w).map(move |x| y * nx + x))
            .filter(|&i| !mask[i])
            .count();
        if *etched + added > max_fill {
            return false;
        }
        for y in r.y0..r.y0 + r.h {
            mask[y * nx + r.x0..y * nx + r.x0 + r.w].fill(true);
        }
        *etched += added;
        true
    };

    for _ in 0..wanted {
        let r = draw(&mut rng);
        paint(&mut mask, r, &mut etched);
    }
    let mut attempts = 0;
    while etched < min_fill && attempts < 64 * wanted.max(1) {
        let r = draw(&mut rng);
        paint(&mut mask, r, &mut etched);
        attempts += 1;
    }

    Ok(mask
        .into_iter()
        .map(|m| if m { params.etched_phase } else { 0.0 })
        .collect())
}

/// Stack of `layer_count` independent synthetic layers; layer `l` uses seed
/// `params.seed` mixed with `l`.
pub fn synthesize_stack(
    grid: &GridSpec,
    dz: f64,
    layer_count: usize,
    params: &PatternParams,
) -> Result<ObjectStack> {
    let layers = (0..layer_count)
        .map(|l| synthesize_layer(grid, &params.with_seed(mix_seed(params.seed, l as u64))))
        .collect::<Result<Vec<_>>>()?;
    ObjectStack::new(*grid, dz, layers)
}

/// SplitMix64 finaliser over `(seed, index)`, used to derive independent
/// per-layer and per-example seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Load one binary mask per layer. Dark pixels become `etched_phase`, light
/// pixels zero. Images whose size differs from the grid are resampled by
/// nearest neighbour when `resample` is set and rejected otherwise.
pub fn load_layer_images<P: AsRef<Path>>(
    paths: &[P],
    etched_phase: f64,
    grid: &GridSpec,
    dz: f64,
    resample: bool,
) -> Result<ObjectStack> {
    grid.validate()?;
    if paths.is_empty() {
        return Err(Error::invalid("no layer images given"));
    }
    let layers = paths
        .iter()
        .map(|p| load_mask(p.as_ref(), etched_phase, grid, resample))
        .collect::<Result<Vec<_>>>()?;
    ObjectStack::new(*grid, dz, layers)
}

fn load_mask(path: &Path, etched_phase: f64, grid: &GridSpec, resample: bool) -> Result<Vec<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if (w, h) != (grid.nx, grid.ny) && !resample {
        return Err(Error::Image {
            path: path.to_path_buf(),
            reason: format!("size {w}x{h} differs from grid {}x{}", grid.nx, grid.ny),
        });
    }

    let mut levels: Vec<u8> = Vec::with_capacity(2);
    for p in img.pixels() {
        if !levels.contains(&p.0[0]) {
            levels.push(p.0[0]);
            if levels.len() > 2 {
                return Err(Error::Image {
                    path: path.to_path_buf(),
                    reason: "mask is not binary (more than two gray levels)".into(),
                });
            }
        }
    }
    let dark = match levels.as_slice() {
        [a, b] => (*a).min(*b),
        [a] if *a < 128 => *a,
        _ => return Ok(vec![0.0; grid.len()]),
    };

    let mut out = Vec::with_capacity(grid.len());
    for iy in 0..grid.ny {
        let sy = (iy * h) / grid.ny;
        for ix in 0..grid.nx {
            let sx = (ix * w) / grid.nx;
            let v = img.get_pixel(sx as u32, sy as u32).0[0];
            out.push(if v == dark { etched_phase } else { 0.0 });
        }
    }
    Ok(out)
}
