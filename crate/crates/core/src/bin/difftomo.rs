use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use difftomo::dataio::{self, DatasetSpec, Split, SplitCounts};
use difftomo::forward::{fresnel_number, protocol, simulate_measurements, AcquisitionGeometry, MeasurementSet, Noise};
use difftomo::inverse::{approximant, lt_reconstruct, Reconstruction, SolverConfig};
use difftomo::metrics::{calibrate_stacks, evaluate_set, CalibrationMode, ReconstructionReport};
use difftomo::optics::GridSpec;
use difftomo::phantom::{load_layer_images, mix_seed, synthesize_stack, ObjectStack, PatternParams};

#[derive(Parser, Debug)]
#[command(name = "difftomo", version, about = "Limited-angle diffraction tomography toolkit")]
struct Cli {
    /// JSON run configuration; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (falls back to the config, then DIFFTOMO_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Base random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Emit a JSON summary on stdout instead of text.
    #[arg(long, global = true)]
    json: bool,
    /// Validate inputs and print the plan without writing anything.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize or load a phantom and simulate its measurements.
    Simulate(SimulateArgs),
    /// Run the fixed-step approximant on a measurement directory.
    Approximant(SolveArgs),
    /// Run the TV-regularised FISTA reconstruction.
    ReconstructLt(SolveArgs),
    /// Generate a training dataset.
    Dataset(DatasetArgs),
    /// Score reconstructions against ground truth.
    Evaluate(EvaluateArgs),
    /// Print Fresnel numbers for feature sizes.
    Fresnel(FresnelArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Synthesize a random phantom (default when no phantom dir is given).
    #[arg(long, conflicts_with = "phantom_dir")]
    synthetic: bool,
    /// Directory of binary layer masks, one image per layer in name order.
    #[arg(long)]
    phantom_dir: Option<PathBuf>,
    /// Resample masks whose size differs from the grid.
    #[arg(long)]
    resample: bool,
    #[arg(long, default_value_t = 22)]
    views: usize,
    /// Largest tilt of the view protocol, degrees.
    #[arg(long, default_value_t = 10.0)]
    max_angle: f64,
    #[arg(long)]
    noiseless: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SolveArgs {
    /// Directory holding meas.dtom with meas.json or meta.json.
    #[arg(long)]
    meas: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    tv_alpha: Option<f64>,
    #[arg(long)]
    tv_iters: Option<usize>,
    /// Ground-truth stack for the report; defaults to truth.dtom next to the measurements.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DatasetArgs {
    #[arg(long)]
    count: Option<usize>,
    /// Train, validation and test counts, e.g. 50,5,5.
    #[arg(long, value_parser = parse_splits)]
    splits: Option<SplitCounts>,
    #[arg(long)]
    noiseless: bool,
    /// Replace an existing dataset.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Reconstruction stack file or directory.
    #[arg(long, required_unless_present = "dataset")]
    recon: Option<PathBuf>,
    /// Truth stack file or directory.
    #[arg(long, required_unless_present = "dataset")]
    truth: Option<PathBuf>,
    /// Score the approximants of a dataset split instead.
    #[arg(long, conflicts_with_all = ["recon", "truth"])]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    /// Fit an affine calibration of the reconstructions before scoring.
    #[arg(long)]
    calibrate: bool,
    #[arg(long, requires = "calibrate")]
    per_layer: bool,
    #[arg(long, default_value = "recon")]
    label: String,
    /// Also write the report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FresnelArgs {
    /// Feature sizes in meters.
    #[arg(long, value_delimiter = ',', default_values_t = [160e-6, 449e-6])]
    sizes: Vec<f64>,
    #[arg(long)]
    wavelength: Option<f64>,
    /// Propagation distance in meters.
    #[arg(long)]
    distance: Option<f64>,
}

fn parse_splits(s: &str) -> std::result::Result<SplitCounts, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [train, validation, test] => Ok(SplitCounts {
            train,
            validation,
            test,
        }),
        _ => Err("expected three comma-separated counts".into()),
    }
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "validation" | "val" => Ok(Split::Validation),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?}")),
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    geometry: AcquisitionGeometry,
    pattern: PatternParams,
    approximant: Option<SolverConfig>,
    lt: Option<SolverConfig>,
    dataset: Option<DatasetConfig>,
    seed: Option<u64>,
    threads: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct DatasetConfig {
    count: Option<usize>,
    splits: Option<SplitCounts>,
    noise: Option<bool>,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let cfg: RunConfig = dataio::read_json(path).with_context(|| format!("reading config {}", path.display()))?;
    cfg.geometry.validate().context("config geometry")?;
    cfg.pattern.validate().context("config pattern")?;
    Ok(cfg)
}

fn thread_count(cli: Option<usize>, cfg: Option<usize>) -> Result<Option<usize>> {
    let n = match cli.or(cfg) {
        Some(n) => Some(n),
        None => match std::env::var("DIFFTOMO_THREADS") {
            Ok(v) => Some(v.trim().parse().with_context(|| format!("DIFFTOMO_THREADS={v:?}"))?),
            Err(_) => None,
        },
    };
    if n == Some(0) {
        bail!("thread count must be at least 1");
    }
    Ok(n)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    let threads = thread_count(cli.threads, cfg.threads)?;
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let ctx = Ctx {
        seed: cli.seed.or(cfg.seed).unwrap_or(0),
        json: cli.json,
        dry_run: cli.dry_run,
        cfg,
    };
    match &cli.command {
        Command::Simulate(a) => simulate(&ctx, a),
        Command::Approximant(a) => solve(&ctx, a, false),
        Command::ReconstructLt(a) => solve(&ctx, a, true),
        Command::Dataset(a) => dataset(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::Fresnel(a) => fresnel(&ctx, a),
    }
}

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    json: bool,
    dry_run: bool,
}

impl Ctx {
    fn say(&self, line: impl AsRef<str>) {
        if !self.json {
            println!("{}", line.as_ref());
        }
    }

    fn emit(&self, value: serde_json::Value) {
        if self.json {
            println!("{value}");
        }
    }

    fn plan(&self, value: serde_json::Value) -> Result<()> {
        if self.json {
            println!("{value}");
        } else {
            println!("dry run, nothing written:\n{}", serde_json::to_string_pretty(&value)?);
        }
        Ok(())
    }
}

/// Creates `dir` and removes it again unless [`OutputDir::commit`] is called.
struct OutputDir {
    path: PathBuf,
    created: bool,
    committed: bool,
}

impl OutputDir {
    fn create(path: &Path) -> Result<Self> {
        let created = !path.exists();
        fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(OutputDir {
            path: path.to_path_buf(),
            created,
            committed: false,
        })
    }

    fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        if self.created && !self.committed {
            let _ = fs::remove_dir_all(&self.path);
        }
    }
}

fn mask_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        bail!("phantom directory {} does not exist", dir.display());
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm" | "tif" | "tiff" | "bmp"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no layer images found in {}", dir.display());
    }
    Ok(paths)
}

fn simulate(ctx: &Ctx, a: &SimulateArgs) -> Result<()> {
    let mut geom = ctx.cfg.geometry.clone();
    geom.validate()?;
    let views = protocol(a.views, a.max_angle);
    for o in &views {
        o.validate(geom.max_tilt_deg)?;
    }
    let masks = a.phantom_dir.as_deref().map(mask_paths).transpose()?;
    if let Some(m) = &masks {
        geom.layers = m.len();
    }
    let noise_seed = (!a.noiseless).then(|| mix_seed(ctx.seed, u64::MAX));

    if ctx.dry_run {
        return ctx.plan(json!({
            "command": "simulate",
            "source": masks.as_ref().map_or("synthetic".to_string(), |m| format!("{} masks", m.len())),
            "seed": ctx.seed,
            "views": views.len(),
            "noise_seed": noise_seed,
            "geometry": geom,
            "out": a.out,
        }));
    }

    let t0 = Instant::now();
    let truth = match &masks {
        Some(paths) => load_layer_images(paths, ctx.cfg.pattern.etched_phase, &geom.grid, geom.dz, a.resample)?,
        None => synthesize_stack(&geom.grid, geom.dz, geom.layers, &ctx.cfg.pattern.with_seed(ctx.seed))?,
    };
    let t_phantom = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let meas = simulate_measurements(&truth, &geom, &views, noise_seed.map_or(Noise::Off, Noise::Seeded))?;
    let t_sim = t1.elapsed().as_secs_f64();

    let out = OutputDir::create(&a.out)?;
    dataio::write_stack(&a.out.join("truth.dtom"), &truth)?;
    dataio::write_measurements(&a.out, &meas, noise_seed)?;
    dataio::render_stack(&truth, &a.out.join("renders"), "truth", None)?;
    out.commit();

    ctx.say(format!(
        "simulated {} views of a {}-layer {}x{} phantom into {}",
        meas.view_count(),
        truth.layer_count(),
        geom.grid.nx,
        geom.grid.ny,
        a.out.display()
    ));
    ctx.say(format!("time phantom {t_phantom:.3} s"));
    ctx.say(format!("time simulate {t_sim:.3} s"));
    ctx.emit(json!({
        "command": "simulate",
        "out": a.out,
        "views": meas.view_count(),
        "layers": truth.layer_count(),
        "noise_seed": noise_seed,
        "timings": {"phantom": t_phantom, "simulate": t_sim},
    }));
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct SolveRecord {
    command: String,
    solver: SolverConfig,
    cost_history: Vec<f64>,
    elapsed_seconds: f64,
    report: Option<ReconstructionReport>,
}

fn solve(ctx: &Ctx, a: &SolveArgs, lt: bool) -> Result<()> {
    let base = if lt {
        ctx.cfg.lt.clone().unwrap_or_else(SolverConfig::learning_tomography)
    } else {
        ctx.cfg.approximant.clone().unwrap_or_else(SolverConfig::approximant)
    };
    let solver = SolverConfig {
        iterations: a.k.unwrap_or(base.iterations),
        step: a.step.unwrap_or(base.step),
        tv_alpha: a.tv_alpha.unwrap_or(base.tv_alpha),
        tv_inner_iters: a.tv_iters.unwrap_or(base.tv_inner_iters),
        ..base
    };
    solver.validate()?;
    let meas: MeasurementSet = dataio::read_measurements(&a.meas)
        .with_context(|| format!("reading measurements from {}", a.meas.display()))?;
    let truth_path = a.truth.clone().or_else(|| {
        let p = a.meas.join("truth.dtom");
        p.exists().then_some(p)
    });
    let geom = &meas.geometry;
    let truth = truth_path
        .as_deref()
        .map(|p| dataio::read_stack(p, &geom.grid, geom.dz))
        .transpose()?;
    let name = if lt { "reconstruct-lt" } else { "approximant" };

    if ctx.dry_run {
        return ctx.plan(json!({
            "command": name,
            "solver": solver,
            "views": meas.view_count(),
            "truth": truth_path,
            "out": a.out,
        }));
    }

    let recon: Reconstruction = if lt {
        lt_reconstruct(&meas, &solver)?
    } else {
        approximant(&meas, &solver)?
    };
    let elapsed = recon.elapsed.as_secs_f64();
    let report = match &truth {
        Some(t) => {
            let mut r = evaluate_set(std::slice::from_ref(&recon.stack), std::slice::from_ref(t), None)?;
            r.cost_history = recon.cost_history.clone();
            r.timings.insert(name.to_string(), elapsed);
            r.validate()?;
            Some(r)
        }
        None => None,
    };

    let out = OutputDir::create(&a.out)?;
    let file = if lt { "recon.dtom" } else { "approx.dtom" };
    dataio::write_stack(&a.out.join(file), &recon.stack)?;
    let log: String = recon
        .cost_history
        .iter()
        .enumerate()
        .map(|(k, j)| format!("{k} {j:.12e}\n"))
        .collect();
    fs::write(a.out.join("cost.log"), log).context("writing cost.log")?;
    let prefix = if lt { "lt" } else { "approx" };
    dataio::render_stack(&recon.stack, &a.out.join("renders"), prefix, None)?;
    let record = SolveRecord {
        command: name.to_string(),
        solver: solver.clone(),
        cost_history: recon.cost_history.clone(),
        elapsed_seconds: elapsed,
        report: report.clone(),
    };
    dataio::write_json(&a.out.join("report.json"), &record)?;
    out.commit();

    for (k, j) in recon.cost_history.iter().enumerate() {
        ctx.say(format!("iter {k:>3}  J = {j:.6e}"));
    }
    ctx.say(format!("time {name} {elapsed:.3} s"));
    if let Some(r) = &report {
        ctx.say(r.table(prefix));
    }
    ctx.emit(serde_json::to_value(&record)?);
    Ok(())
}

fn default_splits(count: usize) -> SplitCounts {
    let held = count / 12;
    SplitCounts {
        train: count - 2 * held,
        validation: held,
        test: held,
    }
}

fn dataset(ctx: &Ctx, a: &DatasetArgs) -> Result<()> {
    let dcfg = ctx.cfg.dataset.clone().unwrap_or_default();
    let splits = match (a.splits.or(dcfg.splits), a.count.or(dcfg.count)) {
        (Some(s), Some(c)) if s.total() != c => {
            bail!("splits {},{},{} do not add up to --count {c}", s.train, s.validation, s.test)
        }
        (Some(s), _) => s,
        (None, Some(c)) => default_splits(c),
        (None, None) => DatasetSpec::default().splits,
    };
    let spec = DatasetSpec {
        splits,
        geometry: ctx.cfg.geometry.clone(),
        pattern: ctx.cfg.pattern.clone(),
        solver: ctx.cfg.approximant.clone().unwrap_or_else(SolverConfig::approximant),
        noise: !a.noiseless && dcfg.noise.unwrap_or(true),
        seed: ctx.seed,
        ..DatasetSpec::default()
    };
    spec.validate()?;
    if ctx.dry_run {
        let exists = a.out.join(dataio::MANIFEST).exists();
        return ctx.plan(json!({
            "command": "dataset",
            "spec": spec,
            "out": a.out,
            "replaces_existing": exists && a.force,
            "refused": exists && !a.force,
        }));
    }
    let created = !a.out.exists();
    let t0 = Instant::now();
    let manifest = match dataio::generate_dataset(&spec, &a.out, a.force) {
        Ok(m) => m,
        Err(e) => {
            if created {
                let _ = fs::remove_dir_all(&a.out);
            }
            return Err(e).context("dataset generation failed");
        }
    };
    let elapsed = t0.elapsed().as_secs_f64();
    dataio::validate_dataset(&a.out).context("re-reading the dataset")?;
    ctx.say(format!(
        "wrote {} examples ({} train, {} validation, {} test) to {}",
        manifest.examples.len(),
        splits.train,
        splits.validation,
        splits.test,
        a.out.display()
    ));
    ctx.say(format!("time dataset {elapsed:.3} s"));
    ctx.emit(json!({
        "command": "dataset",
        "out": a.out,
        "counts": manifest.counts,
        "seconds": elapsed,
    }));
    Ok(())
}

/// Read a `[L, ny, nx]` stack for scoring; pitch and spacing are irrelevant.
fn read_scoring_stack(path: &Path, names: &[&str]) -> Result<ObjectStack> {
    let file = if path.is_dir() {
        names
            .iter()
            .map(|n| path.join(n))
            .find(|p| p.exists())
            .with_context(|| format!("no {} in {}", names.join(" or "), path.display()))?
    } else {
        path.to_path_buf()
    };
    let arr = dataio::read_array(&file)?;
    let [layers, ny, nx] = arr.dims[..] else {
        bail!("{} is not a [layers, ny, nx] stack", file.display());
    };
    Ok(ObjectStack::from_flat(GridSpec::new(nx, ny, 1.0)?, 1.0, layers, &arr.data)?)
}

fn evaluate(ctx: &Ctx, a: &EvaluateArgs) -> Result<()> {
    let (recons, truths) = match &a.dataset {
        Some(root) => {
            let manifest = dataio::validate_dataset(root)?;
            let mut recons = Vec::new();
            let mut truths = Vec::new();
            for e in manifest.entries(a.split) {
                let ex = dataio::load_example(root, e)?;
                recons.push(ex.approximant);
                truths.push(ex.truth);
            }
            (recons, truths)
        }
        None => {
            let recon = a.recon.as_deref().expect("required by clap");
            let truth = a.truth.as_deref().expect("required by clap");
            (
                vec![read_scoring_stack(recon, &["recon.dtom", "approx.dtom"])?],
                vec![read_scoring_stack(truth, &["truth.dtom"])?],
            )
        }
    };
    if recons.is_empty() {
        bail!("nothing to evaluate");
    }
    if ctx.dry_run {
        return ctx.plan(json!({"command": "evaluate", "examples": recons.len(), "calibrate": a.calibrate}));
    }
    let calibration = if a.calibrate {
        let mode = if a.per_layer {
            CalibrationMode::PerLayer
        } else {
            CalibrationMode::Pooled
        };
        Some(calibrate_stacks(&recons, &truths, mode)?)
    } else {
        None
    };
    let report = evaluate_set(&recons, &truths, calibration.as_deref())?;
    report.validate()?;
    if let Some(p) = &a.report {
        dataio::write_json(p, &report)?;
    }
    ctx.say(report.table(&a.label));
    ctx.emit(serde_json::to_value(&report)?);
    Ok(())
}

fn fresnel(ctx: &Ctx, a: &FresnelArgs) -> Result<()> {
    let geom = &ctx.cfg.geometry;
    let wavelength = a.wavelength.unwrap_or(geom.wavelength);
    let distance = a.distance.unwrap_or(geom.defocus);
    let numbers = a
        .sizes
        .iter()
        .map(|s| fresnel_number(*s, wavelength, distance))
        .collect::<difftomo::Result<Vec<_>>>()?;
    ctx.say(format!(
        "wavelength {:.1} nm, distance {:.1} mm",
        wavelength * 1e9,
        distance * 1e3
    ));
    for (s, f) in a.sizes.iter().zip(&numbers) {
        ctx.say(format!("feature {:>7.1} um  F = {f:.1}", s * 1e6));
    }
    if numbers.len() > 1 {
        let lo = numbers.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = numbers.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        ctx.say(format!("range F = {lo:.1} to {hi:.1}"));
    }
    ctx.emit(json!({
        "wavelength": wavelength,
        "distance": distance,
        "sizes": a.sizes,
        "fresnel": numbers,
    }));
    Ok(())
}
