//! On-disk formats shared with downstream consumers.
//!
//! Arrays are stored as `.dtom` files: a 32-byte little-endian header followed
//! by row-major IEEE-754 binary64 values.
//!
//! | offset | size | field                              |
//! |--------|------|------------------------------------|
//! | 0      | 4    | magic `DTOM`                       |
//! | 4      | 2    | format version (u16, currently 1)  |
//! | 6      | 2    | dtype code (u16, 1 = f64)          |
//! | 8      | 4    | ndim (u32, 1..=5)                  |
//! | 12     | 20   | dims (5 x u32, unused entries = 0) |
//!
//! A dataset directory holds `manifest.json`, one `examples/<id>/` directory
//! per example with `truth.dtom`, `meas.dtom`, `approx.dtom` and `meta.json`,
//! and PNG renders of the test split under `renders/`. The manifest is written
//! last and marks the dataset as complete.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{default_protocol, simulate_measurements, AcquisitionGeometry, MeasurementSet, Noise, Orientation};
use crate::inverse::{approximant, SolverConfig};
use crate::optics::GridSpec;
use crate::phantom::{mix_seed, synthesize_stack, ObjectStack, PatternParams};

pub const MAGIC: &[u8; 4] = b"DTOM";
pub const FORMAT_VERSION: u16 = 1;
pub const DTYPE_F64: u16 = 1;
pub const HEADER_LEN: usize = 32;
pub const MAX_DIMS: usize = 5;

/// Dense f64 array with its shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_DIMS {
            return Err(Error::invalid(format!("arrays need 1..={MAX_DIMS} dimensions, got {}", dims.len())));
        }
        let expected = dims.iter().product::<usize>();
        if expected != data.len() {
            return Err(Error::invalid(format!("dims {dims:?} need {expected} values, got {}", data.len())));
        }
        Ok(Array { dims, data })
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Serialise an array to bytes.
pub fn encode_array(array: &Array) -> Result<Vec<u8>> {
    let Array { dims, data } = array;
    if dims.is_empty() || dims.len() > MAX_DIMS {
        return Err(Error::invalid(format!("arrays need 1..={MAX_DIMS} dimensions")));
    }
    if dims.iter().product::<usize>() != data.len() {
        return Err(Error::invalid("array data does not match its dims"));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("array"));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F64.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for i in 0..MAX_DIMS {
        let d = dims.get(i).copied().unwrap_or(0);
        let d = u32::try_from(d).map_err(|_| Error::invalid("dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parse bytes produced by [`encode_array`]; `path` is only used in errors.
pub fn decode_array(bytes: &[u8], path: &Path) -> Result<Array> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(path, "truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let version = u16_at(4);
    if version != FORMAT_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let dtype = u16_at(6);
    if dtype != DTYPE_F64 {
        return Err(format_err(path, format!("unsupported dtype code {dtype}")));
    }
    let ndim = u32_at(8) as usize;
    if ndim == 0 || ndim > MAX_DIMS {
        return Err(format_err(path, format!("invalid ndim {ndim}")));
    }
    let dims: Vec<usize> = (0..ndim).map(|i| u32_at(12 + 4 * i) as usize).collect();
    if (ndim..MAX_DIMS).any(|i| u32_at(12 + 4 * i) != 0) {
        return Err(format_err(path, "non-zero unused dims"));
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, d| acc.checked_mul(*d))
        .ok_or_else(|| format_err(path, "dims overflow"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != count * 8 {
        return Err(format_err(
            path,
            format!("expected {} payload bytes for dims {dims:?}, found {}", count * 8, payload.len()),
        ));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Array { dims, data })
}

pub fn write_array(path: &Path, array: &Array) -> Result<()> {
    let bytes = encode_array(array)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_array(path: &Path) -> Result<Array> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_array(&bytes, path)
}

/// Write a stack as a `[L, ny, nx]` array.
pub fn write_stack(path: &Path, stack: &ObjectStack) -> Result<()> {
    let g = stack.grid();
    write_array(path, &Array::new(vec![stack.layer_count(), g.ny, g.nx], stack.to_flat())?)
}

/// Read a `[L, ny, nx]` array as a stack on `grid` with spacing `dz`.
pub fn read_stack(path: &Path, grid: &GridSpec, dz: f64) -> Result<ObjectStack> {
    let a = read_array(path)?;
    if a.dims.len() != 3 || a.dims[1] != grid.ny || a.dims[2] != grid.nx {
        return Err(format_err(
            path,
            format!("stack dims {:?} do not match grid {}x{}", a.dims, grid.nx, grid.ny),
        ));
    }
    ObjectStack::from_flat(*grid, dz, a.dims[0], &a.data)
}

/// Geometry and view list stored next to `meas.dtom`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementMeta {
    pub geometry: AcquisitionGeometry,
    pub orientations: Vec<Orientation>,
    pub noise_seed: Option<u64>,
}

/// Write `meas.dtom` (`[N_v, ny, nx]`) and `meas.json` into `dir`.
pub fn write_measurements(dir: &Path, meas: &MeasurementSet, noise_seed: Option<u64>) -> Result<()> {
    let g = meas.geometry.grid;
    let data = meas.images.concat();
    write_array(&dir.join("meas.dtom"), &Array::new(vec![meas.view_count(), g.ny, g.nx], data)?)?;
    write_json(
        &dir.join("meas.json"),
        &MeasurementMeta {
            geometry: meas.geometry.clone(),
            orientations: meas.orientations.clone(),
            noise_seed,
        },
    )
}

/// Read a measurement set written by [`write_measurements`], or the
/// measurements of a dataset example directory.
pub fn read_measurements(dir: &Path) -> Result<MeasurementSet> {
    let side = dir.join("meas.json");
    let meta: MeasurementMeta = if !side.exists() && dir.join("meta.json").exists() {
        let ex: ExampleMeta = read_json(&dir.join("meta.json"))?;
        MeasurementMeta {
            geometry: ex.geometry,
            orientations: ex.orientations,
            noise_seed: ex.noise_seed,
        }
    } else {
        read_json(&side)?
    };
    let path = dir.join("meas.dtom");
    let a = read_array(&path)?;
    let g = meta.geometry.grid;
    if a.dims.len() != 3 || a.dims[1] != g.ny || a.dims[2] != g.nx || a.dims[0] != meta.orientations.len() {
        return Err(format_err(&path, format!("dims {:?} disagree with meas.json", a.dims)));
    }
    let images = if g.is_empty() {
        vec![]
    } else {
        a.data.chunks(g.len()).map(<[f64]>::to_vec).collect()
    };
    MeasurementSet::new(meta.geometry, meta.orientations, images)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Sidecar written next to every exported image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSidecar {
    /// Values mapped to gray 0 and 65535.
    pub range: (f64, f64),
    pub data_min: f64,
    pub data_max: f64,
    pub width: usize,
    pub height: usize,
    pub note: String,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    path.with_file_name(name)
}

/// Export a map as a 16-bit grayscale PNG or PGM (by extension), mapping
/// `range.0 ..= range.1` linearly onto the full scale. The display range is
/// recorded in a `<file>.json` sidecar and may exceed the data range.
pub fn export_image(map: &[f64], nx: usize, ny: usize, path: &Path, range: (f64, f64)) -> Result<()> {
    let (lo, hi) = range;
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(Error::invalid(format!("degenerate display range {range:?}")));
    }
    if map.len() != nx * ny || nx == 0 || ny == 0 {
        return Err(Error::invalid("image map size does not match dimensions"));
    }
    if map.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("image map"));
    }
    let scale = 65535.0 / (hi - lo);
    let pixels: Vec<u16> = map
        .iter()
        .map(|v| ((v - lo) * scale).round().clamp(0.0, 65535.0) as u16)
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(nx as u32, ny as u32, pixels).expect("buffer sized to image");
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;

    let (data_min, data_max) = map
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    write_json(
        &sidecar_path(path),
        &ImageSidecar {
            range,
            data_min,
            data_max,
            width: nx,
            height: ny,
            note: "gray levels span the display range, which may exceed the data range".into(),
        },
    )
}

/// Read back an image written by [`export_image`] using its sidecar range.
pub fn import_image(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let side: ImageSidecar = read_json(&sidecar_path(path))?;
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .into_luma16();
    let (lo, hi) = side.range;
    let values = img.pixels().map(|p| lo + (hi - lo) * p.0[0] as f64 / 65535.0).collect();
    Ok((values, img.width() as usize, img.height() as usize))
}

/// Symmetric display range covering the data with a small margin; phase maps
/// read best centred on zero.
pub fn display_range(values: &[f64]) -> (f64, f64) {
    let m = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let m = if m > 0.0 { 1.1 * m } else { 1.0 };
    (-m, m)
}

/// Export each layer of a stack as `<prefix>_layer<l>.png` under `dir`.
pub fn render_stack(stack: &ObjectStack, dir: &Path, prefix: &str, range: Option<(f64, f64)>) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let g = stack.grid();
    let range = range.unwrap_or_else(|| display_range(&stack.to_flat()));
    (0..stack.layer_count())
        .map(|l| {
            let path = dir.join(format!("{prefix}_layer{}.png", l + 1));
            export_image(stack.layer(l), g.nx, g.ny, &path, range)?;
            Ok(path)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }

    fn split_of(&self, index: usize) -> Split {
        if index < self.train {
            Split::Train
        } else if index < self.train + self.validation {
            Split::Validation
        } else {
            Split::Test
        }
    }
}

/// Everything that determines a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub splits: SplitCounts,
    pub geometry: AcquisitionGeometry,
    pub pattern: PatternParams,
    pub solver: SolverConfig,
    pub orientations: Vec<Orientation>,
    pub noise: bool,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            splits: SplitCounts {
                train: 50,
                validation: 5,
                test: 5,
            },
            geometry: AcquisitionGeometry::default(),
            pattern: PatternParams::default(),
            solver: SolverConfig::approximant(),
            orientations: default_protocol(),
            noise: true,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.pattern.validate()?;
        self.solver.validate()?;
        for o in &self.orientations {
            o.validate(self.geometry.max_tilt_deg)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub truth: String,
    pub measurements: String,
    pub approximant: String,
    pub meta: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u16,
    pub creator: String,
    pub spec: DatasetSpec,
    pub counts: SplitCounts,
    pub examples: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.examples.iter().filter(move |e| e.split == split)
    }
}

/// Per-example metadata, `examples/<id>/meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub geometry: AcquisitionGeometry,
    pub orientations: Vec<Orientation>,
    pub noise_seed: Option<u64>,
    pub solver: SolverConfig,
    pub cost_history: Vec<f64>,
}

pub const MANIFEST: &str = "manifest.json";

fn example_id(index: usize) -> String {
    format!("{index:06}")
}

/// Synthesize, simulate and pre-reconstruct `spec.splits.total()` examples
/// under `out_dir`. Deterministic in `spec.seed`: the output tree does not
/// depend on thread count. An existing dataset is only replaced with `force`.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path, force: bool) -> Result<DatasetManifest> {
    spec.validate()?;
    let examples_dir = out_dir.join("examples");
    let renders_dir = out_dir.join("renders");
    let manifest_path = out_dir.join(MANIFEST);
    if manifest_path.exists() || examples_dir.exists() {
        if !force {
            return Err(Error::OutputExists(out_dir.to_path_buf()));
        }
        for dir in [&examples_dir, &renders_dir] {
            if dir.exists() {
                fs::remove_dir_all(dir).map_err(|e| Error::io(dir.as_path(), e))?;
            }
        }
        if manifest_path.exists() {
            fs::remove_file(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        }
    }
    fs::create_dir_all(&examples_dir).map_err(|e| Error::io(&examples_dir, e))?;

    let count = spec.splits.total();
    let result = (0..count)
        .into_par_iter()
        .map(|i| generate_example(spec, out_dir, i))
        .collect::<Result<Vec<_>>>();
    let entries = match result {
        Ok(entries) => entries,
        Err(e) => {
            let _ = fs::remove_dir_all(&examples_dir);
            let _ = fs::remove_dir_all(&renders_dir);
            return Err(e);
        }
    };

    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        creator: format!("difftomo {}", env!("CARGO_PKG_VERSION")),
        spec: spec.clone(),
        counts: spec.splits,
        examples: entries,
    };
    let tmp = out_dir.join("manifest.json.tmp");
    write_json(&tmp, &manifest)?;
    fs::rename(&tmp, &manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

fn generate_example(spec: &DatasetSpec, out_dir: &Path, index: usize) -> Result<ManifestEntry> {
    let id = example_id(index);
    let split = spec.splits.split_of(index);
    let seed = mix_seed(spec.seed, index as u64);
    let geom = &spec.geometry;

    let truth = synthesize_stack(&geom.grid, geom.dz, geom.layers, &spec.pattern.with_seed(seed))?;
    let noise_seed = spec.noise.then(|| mix_seed(seed, u64::MAX));
    let noise = noise_seed.map_or(Noise::Off, Noise::Seeded);
    let meas = simulate_measurements(&truth, geom, &spec.orientations, noise)?;
    let approx = if meas.is_empty() {
        None
    } else {
        Some(approximant(&meas, &spec.solver)?)
    };
    let approx_stack = match &approx {
        Some(r) => r.stack.clone(),
        None => ObjectStack::zeros(geom.grid, geom.dz, geom.layers)?,
    };

    let rel = format!("examples/{id}");
    let dir = out_dir.join(&rel);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_stack(&dir.join("truth.dtom"), &truth)?;
    let g = geom.grid;
    write_array(
        &dir.join("meas.dtom"),
        &Array::new(vec![meas.view_count(), g.ny, g.nx], meas.images.concat())?,
    )?;
    write_stack(&dir.join("approx.dtom"), &approx_stack)?;
    write_json(
        &dir.join("meta.json"),
        &ExampleMeta {
            id: id.clone(),
            split,
            seed,
            geometry: geom.clone(),
            orientations: spec.orientations.clone(),
            noise_seed,
            solver: spec.solver.clone(),
            cost_history: approx.map(|r| r.cost_history).unwrap_or_default(),
        },
    )?;

    if split == Split::Test {
        let renders = out_dir.join("renders");
        let range = display_range(&truth.to_flat());
        render_stack(&truth, &renders, &format!("{id}_truth"), Some(range))?;
        render_stack(&approx_stack, &renders, &format!("{id}_approx"), None)?;
    }

    Ok(ManifestEntry {
        id,
        split,
        seed,
        truth: format!("{rel}/truth.dtom"),
        measurements: format!("{rel}/meas.dtom"),
        approximant: format!("{rel}/approx.dtom"),
        meta: format!("{rel}/meta.json"),
    })
}

/// Loaded example from a dataset.
#[derive(Debug, Clone)]
pub struct Example {
    pub meta: ExampleMeta,
    pub truth: ObjectStack,
    pub approximant: ObjectStack,
    pub measurements: MeasurementSet,
}

/// Read one manifest entry back, validating every array against the geometry.
pub fn load_example(root: &Path, entry: &ManifestEntry) -> Result<Example> {
    let meta: ExampleMeta = read_json(&root.join(&entry.meta))?;
    let g = meta.geometry.grid;
    let truth = read_stack(&root.join(&entry.truth), &g, meta.geometry.dz)?;
    let approx = read_stack(&root.join(&entry.approximant), &g, meta.geometry.dz)?;
    if truth.layer_count() != meta.geometry.layers || approx.layer_count() != meta.geometry.layers {
        return Err(format_err(&root.join(&entry.truth), "layer count disagrees with geometry"));
    }
    let meas_path = root.join(&entry.measurements);
    let m = read_array(&meas_path)?;
    if m.dims != [meta.orientations.len(), g.ny, g.nx] {
        return Err(format_err(&meas_path, format!("dims {:?} disagree with meta.json", m.dims)));
    }
    let images = m.data.chunks(g.len()).map(<[f64]>::to_vec).collect();
    let measurements = MeasurementSet::new(meta.geometry.clone(), meta.orientations.clone(), images)?;
    Ok(Example {
        meta,
        truth,
        approximant: approx,
        measurements,
    })
}

/// Read and fully validate a dataset: unique ids, counts matching the split
/// tally, and every referenced file passing header and dimension checks.
pub fn validate_dataset(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST);
    let manifest: DatasetManifest = read_json(&path)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(format_err(&path, format!("manifest version {}", manifest.format_version)));
    }
    let mut ids = HashSet::new();
    let mut tally = SplitCounts {
        train: 0,
        validation: 0,
        test: 0,
    };
    for e in &manifest.examples {
        if !ids.insert(e.id.as_str()) {
            return Err(format_err(&path, format!("duplicate id {}", e.id)));
        }
        match e.split {
            Split::Train => tally.train += 1,
            Split::Validation => tally.validation += 1,
            Split::Test => tally.test += 1,
        }
        load_example(root, e)?;
    }
    if tally != manifest.counts {
        return Err(format_err(&path, "split counts disagree with entries"));
    }
    Ok(manifest)
}

/// Recursively hash-free listing of `(relative path, bytes)` for comparing
/// generated trees.
pub fn snapshot_tree(root: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) -> Result<()> {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| Error::io(dir, e))?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let p = entry.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
                out.push((p.strip_prefix(root).unwrap_or(&p).to_path_buf(), bytes));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    Ok(out)
}

/// Append a line to a text log, creating it if needed.
pub fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}
