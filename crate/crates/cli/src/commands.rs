//! Subcommands of the `spherewarp` binary.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use spherewarp_core::metrics::{evaluate, JacobianStats, MetricReport};
use spherewarp_core::synth::{make_cohort, CohortSpec};
use spherewarp_core::{jacobian_map, sample_periodic, warp_labels, Atlas, FeatureMap, Interp, SphereGrid};
use spherewarp_registration::lambda::{lambda_search, log_grid};
use spherewarp_registration::{
    predict_amortized, register_instance, train_amortized, LossTerms, Mode, RegistrationConfig, RegistrationResult,
    RigidRotation, DEFAULT_LAMBDA, DEFAULT_WIDTHS,
};

use crate::config::{config_hash, require_path, RunConfig};
use crate::dataset::{load_feature, load_labels, load_variance, DatasetLayout, DatasetManifest};
use crate::error::{Category, CliError, Result};
use crate::format::{map_from_matrix, parse_text_matrix, read_map, read_weights, write_atomic, write_map, write_weights, GridMap, MapKind, WeightsFile};
use crate::gradsuite::run_suite;
use crate::provenance::{write_sidecar, RunContext};

#[derive(Debug, Parser)]
#[command(name = "spherewarp", version, about = "Diffeomorphic registration of spherical feature maps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with ground-truth warps.
    Synth(SynthArgs),
    /// Register one moving map to an atlas by per-pair optimisation.
    Register(RegisterArgs),
    /// Train the amortized network on a dataset.
    Train(TrainArgs),
    /// Register one moving map with a trained network.
    Predict(PredictArgs),
    /// Resample a feature or label map through a stored deformation.
    Warp(WarpArgs),
    /// Compare two label maps and emit a metric report.
    Evaluate(EvaluateArgs),
    /// Check every adjoint against finite differences.
    Gradcheck(GradcheckArgs),
    /// Choose the prior weight on a log grid by validation Dice.
    LambdaSearch(LambdaSearchArgs),
    /// Convert a whitespace-separated text matrix into a map file.
    Convert(ConvertArgs),
}

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (m, n) = s.split_once(['x', 'X']).ok_or_else(|| format!("grid '{s}' is not of the form MxN"))?;
    let m = m.trim().parse().map_err(|_| format!("bad row count in '{s}'"))?;
    let n = n.trim().parse().map_err(|_| format!("bad column count in '{s}'"))?;
    Ok((m, n))
}

fn parse_pair(s: &str) -> std::result::Result<[f64; 2], String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("'{s}' is not of the form A,B"))?;
    let a = a.trim().parse().map_err(|_| format!("bad number in '{s}'"))?;
    let b = b.trim().parse().map_err(|_| format!("bad number in '{s}'"))?;
    Ok([a, b])
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_parser = parse_grid, default_value = "64x128")]
    pub grid: (usize, usize),
    #[arg(long, default_value_t = 20)]
    pub subjects: usize,
    /// Peak velocity speed, radians.
    #[arg(long, default_value_t = 0.15)]
    pub amplitude: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
    #[arg(long, default_value_t = 12)]
    pub regions: usize,
    /// Concentrate template energy at high latitudes.
    #[arg(long)]
    pub polar_emphasis: bool,
    /// North pole of the rendering frame as THETA,PHI radians.
    #[arg(long, value_parser = parse_pair, allow_hyphen_values = true)]
    pub pole: Option<[f64; 2]>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PairInputs {
    #[arg(long)]
    pub moving: Option<PathBuf>,
    #[arg(long)]
    pub atlas_mean: Option<PathBuf>,
    #[arg(long)]
    pub atlas_var: Option<PathBuf>,
    /// Atlas parcellation to project into subject space.
    #[arg(long)]
    pub atlas_labels: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[command(flatten)]
    pub io: PairInputs,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub rigid: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Four comma-separated level widths.
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    /// Train on the first N subjects only.
    #[arg(long)]
    pub subjects: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub io: PairInputs,
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct WarpArgs {
    /// Deformation map.
    #[arg(long)]
    pub phi: PathBuf,
    /// Feature, variance or label map.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    /// Deformation whose Jacobian statistics are added to the report.
    #[arg(long)]
    pub phi: Option<PathBuf>,
    #[arg(long)]
    pub radius_mm: Option<f64>,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct LambdaSearchArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of leading subjects used for validation.
    #[arg(long, default_value_t = 5)]
    pub validation: usize,
    /// Centre of the five-point decade grid.
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    pub centre: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Text matrix, one grid row per line.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "feature")]
    pub kind: MapKind,
    #[arg(long)]
    pub out: PathBuf,
}

/// Summary written as `report.json` by `register` and `predict`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationReport {
    pub mode: Mode,
    pub lambda: f64,
    /// Mean great-circle length of the deformable displacement, radians.
    pub mean_displacement: f64,
    /// Same for the full transform including any rotation.
    pub mean_transform_displacement: f64,
    pub max_displacement: f64,
    pub final_loss: f64,
    pub terms: LossTerms,
    pub loss_trace: Vec<f64>,
    pub iterations: usize,
    pub levels: usize,
    pub rejected_steps: usize,
    pub clamped: usize,
    pub rotation: Option<RigidRotation>,
    pub jacobian: JacobianStats,
    /// Present when atlas labels were projected.
    pub projected_labels: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub epoch_losses: Vec<f64>,
    pub subjects: usize,
    pub widths: Vec<usize>,
    pub grid: [usize; 2],
    pub param_count: usize,
    pub lr: f64,
    pub lambda: f64,
}

struct Emitter<'a> {
    ctx: &'a RunContext,
    hash: String,
    seed: Option<u64>,
}

impl Emitter<'_> {
    fn map(&self, map: &GridMap, path: &Path) -> Result<()> {
        write_map(map, path).map_err(|e| CliError::from(e).context(path.display()))?;
        write_sidecar(path, self.ctx, &self.hash, self.seed)
    }

    fn json<T: Serialize>(&self, value: &T, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| CliError::new(Category::Internal, e.to_string()))?;
        write_atomic(path, text.as_bytes()).map_err(|e| CliError::from(e).context(path.display()))?;
        write_sidecar(path, self.ctx, &self.hash, self.seed)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::from(e).context(dir.display()))
}

pub fn synth(args: &SynthArgs, ctx: &RunContext) -> Result<DatasetManifest> {
    let spec = CohortSpec {
        rows: args.grid.0,
        cols: args.grid.1,
        subjects: args.subjects,
        amplitude: args.amplitude,
        noise: args.noise,
        regions: args.regions,
        polar_emphasis: args.polar_emphasis,
        seed: args.seed,
        ..CohortSpec::default()
    };
    if !(spec.amplitude >= 0.0) || !(spec.noise >= 0.0) {
        return Err(CliError::usage("amplitude and noise must be non-negative"));
    }
    let manifest = DatasetManifest::from_spec(&spec, args.pole);
    let cohort = make_cohort(&spec, &manifest.frame())?;
    let layout = DatasetLayout::new(&args.out);
    let emit = Emitter { ctx, hash: config_hash(&manifest), seed: Some(args.seed) };
    create_dir(layout.root())?;
    emit.map(&GridMap::Feature(cohort.template.clone()), &layout.template())?;
    emit.map(&GridMap::Label(cohort.template_labels.clone()), &layout.template_labels())?;
    emit.map(&GridMap::Feature(cohort.template), &layout.atlas_mean())?;
    emit.map(&GridMap::Variance(cohort.atlas_variance), &layout.atlas_var())?;
    for (k, s) in cohort.subjects.into_iter().enumerate() {
        create_dir(&layout.subject_dir(k))?;
        emit.map(&GridMap::Feature(s.features), &layout.features(k))?;
        emit.map(&GridMap::Label(s.labels), &layout.labels(k))?;
        emit.map(&GridMap::Velocity(s.velocity), &layout.velocity(k))?;
        emit.map(&GridMap::Deformation(s.true_phi), &layout.true_phi(k))?;
        emit.map(&GridMap::Deformation(s.true_inverse), &layout.true_inverse(k))?;
    }
    emit.json(&manifest, &layout.manifest())?;
    Ok(manifest)
}

struct PairData {
    moving: FeatureMap,
    atlas: Atlas,
    atlas_labels: Option<spherewarp_core::LabelMap>,
    out: PathBuf,
}

fn load_pair(io: &PairInputs, run: &RunConfig) -> Result<PairData> {
    let moving = load_feature(&require_path(io.moving.clone(), &run.moving, "moving")?)?;
    let mean = load_feature(&require_path(io.atlas_mean.clone(), &run.atlas_mean, "atlas-mean")?)?;
    let var = load_variance(&require_path(io.atlas_var.clone(), &run.atlas_var, "atlas-var")?)?;
    let atlas_labels = match io.atlas_labels.clone().or_else(|| run.atlas_labels.clone()) {
        Some(p) => Some(load_labels(&p)?),
        None => None,
    };
    let out = require_path(io.out.clone(), &run.out, "out")?;
    Ok(PairData { moving, atlas: Atlas::new(mean, var, None)?, atlas_labels, out })
}

fn write_registration(
    res: &RegistrationResult,
    pair: &PairData,
    cfg: &RegistrationConfig,
    emit: &Emitter,
) -> Result<RegistrationReport> {
    create_dir(&pair.out)?;
    let transform = res.transform();
    let inverse = res.inverse_transform(cfg.steps)?;
    emit.map(&GridMap::Deformation(transform.clone()), &pair.out.join("phi.smgm"))?;
    emit.map(&GridMap::Deformation(inverse), &pair.out.join("phi_inverse.smgm"))?;
    emit.map(&GridMap::Velocity(res.mu.clone()), &pair.out.join("mu.smgm"))?;
    emit.map(&GridMap::Variance(res.sigma_diag.clone()), &pair.out.join("sigma.smgm"))?;
    emit.map(&GridMap::Feature(res.warp_moving(&pair.moving)?), &pair.out.join("warped.smgm"))?;
    let projected_labels = match &pair.atlas_labels {
        Some(labels) => {
            emit.map(&GridMap::Label(res.project_labels(labels, cfg.steps)?), &pair.out.join("labels.smgm"))?;
            Some("labels.smgm".to_string())
        }
        None => None,
    };
    let report = RegistrationReport {
        mode: cfg.mode,
        lambda: cfg.lambda,
        mean_displacement: res.mean_displacement(),
        mean_transform_displacement: transform.mean_geodesic_magnitude(),
        max_displacement: res.phi.geodesic_magnitudes().into_iter().fold(0.0, f64::max),
        final_loss: res.loss_trace.last().copied().unwrap_or(res.terms.total()),
        terms: res.terms,
        loss_trace: res.loss_trace.clone(),
        iterations: res.diagnostics.iterations,
        levels: res.diagnostics.levels,
        rejected_steps: res.diagnostics.rejected_steps,
        clamped: res.diagnostics.clamped,
        rotation: res.diagnostics.rotation,
        jacobian: jacobian_map(&res.phi).1,
        projected_labels,
    };
    emit.json(&report, &pair.out.join("report.json"))?;
    Ok(report)
}

pub fn register(args: &RegisterArgs, ctx: &RunContext) -> Result<RegistrationReport> {
    let mut run = RunConfig::load_or_default(args.io.config.as_deref())?;
    if let Some(l) = args.lambda {
        run.registration.lambda = l;
    }
    if let Some(i) = args.iters {
        run.registration.iters = i;
    }
    if let Some(s) = args.seed {
        run.registration.seed = s;
    }
    run.registration.rigid |= args.rigid;
    run.validate()?;
    let cfg = run.registration.clone();
    let pair = load_pair(&args.io, &run)?;
    let start = Instant::now();
    let res = register_instance(&pair.moving, &pair.atlas, &cfg)?;
    eprintln!("registered in {:.2} s", start.elapsed().as_secs_f64());
    let emit = Emitter { ctx, hash: config_hash(&run.registration), seed: Some(cfg.seed) };
    write_registration(&res, &pair, &cfg, &emit)
}

pub fn train(args: &TrainArgs, ctx: &RunContext) -> Result<TrainingSummary> {
    let mut run = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig { registration: RegistrationConfig::for_mode(Mode::Amortized), ..RunConfig::default() },
    };
    run.registration.mode = Mode::Amortized;
    if let Some(e) = args.epochs {
        run.registration.iters = e;
    }
    if let Some(lr) = args.lr {
        run.registration.lr = lr;
    }
    if let Some(s) = args.seed {
        run.registration.seed = s;
    }
    if let Some(w) = &args.widths {
        run.widths = Some(w.clone());
    }
    run.validate()?;
    let layout = DatasetLayout::new(require_path(args.dataset.clone(), &run.dataset, "dataset")?);
    let out = require_path(args.out.clone(), &run.out, "out")?;
    let manifest = layout.read_manifest()?;
    let count = args.subjects.unwrap_or(manifest.subjects).min(manifest.subjects);
    let (atlas, _) = layout.load_atlas()?;
    let pairs: Vec<FeatureMap> = layout.load_subjects(count)?.into_iter().map(|(f, _)| f).collect();
    let widths = run.widths.clone().unwrap_or_else(|| DEFAULT_WIDTHS.to_vec());
    let cfg = run.registration.clone();
    let (model, report) = train_amortized(&pairs, &atlas, &cfg, &widths)?;
    eprintln!("trained {} epochs in {:.1} s", cfg.iters, report.wall_time_s);
    create_dir(&out)?;
    let emit = Emitter { ctx, hash: config_hash(&run), seed: Some(cfg.seed) };
    let weights = out.join("model.smtw");
    write_weights(&WeightsFile::from_model(&model), &weights).map_err(|e| CliError::from(e).context(weights.display()))?;
    write_sidecar(&weights, ctx, &emit.hash, emit.seed)?;
    let g = model.grid();
    let summary = TrainingSummary {
        epoch_losses: report.epoch_losses,
        subjects: pairs.len(),
        widths,
        grid: [g.rows(), g.cols()],
        param_count: model.param_count(),
        lr: cfg.lr,
        lambda: cfg.lambda,
    };
    emit.json(&summary, &out.join("training.json"))?;
    Ok(summary)
}

pub fn predict(args: &PredictArgs, ctx: &RunContext) -> Result<RegistrationReport> {
    let mut run = match &args.io.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig { registration: RegistrationConfig::for_mode(Mode::Amortized), ..RunConfig::default() },
    };
    run.registration.mode = Mode::Amortized;
    let model_path = require_path(args.model.clone(), &run.model, "model")?;
    let weights = read_weights(&model_path).map_err(|e| CliError::from(e).context(model_path.display()))?;
    let mut model = weights.to_model().map_err(|e| CliError::from(e).context(model_path.display()))?;
    let pair = load_pair(&args.io, &run)?;
    if !model.grid().same_shape(pair.moving.grid()) {
        let g = pair.moving.grid();
        model = model.with_grid(Arc::new(SphereGrid::new(g.rows(), g.cols())?))?;
    }
    let cfg = run.registration.clone();
    let start = Instant::now();
    let res = predict_amortized(&model, &pair.moving, &pair.atlas, &cfg)?;
    eprintln!("predicted in {:.3} s", start.elapsed().as_secs_f64());
    let emit = Emitter { ctx, hash: config_hash(&run.registration), seed: Some(cfg.seed) };
    write_registration(&res, &pair, &cfg, &emit)
}

pub fn warp(args: &WarpArgs, ctx: &RunContext) -> Result<MapKind> {
    let phi = read_map(&args.phi)
        .and_then(|m| m.into_deformation())
        .map_err(|e| CliError::from(e).context(args.phi.display()))?;
    let input = read_map(&args.input).map_err(|e| CliError::from(e).context(args.input.display()))?;
    let out = match input {
        GridMap::Feature(m) => GridMap::Feature(sample_periodic(&m, &phi, Interp::Bilinear)?),
        GridMap::Variance(m) => GridMap::Variance(sample_periodic(&m, &phi, Interp::Bilinear)?),
        GridMap::Label(l) => GridMap::Label(warp_labels(&l, &phi)?),
        other => return Err(CliError::input(format!("cannot warp a {} map", other.kind()))),
    };
    let emit = Emitter { ctx, hash: config_hash(&(args.phi.display().to_string(), args.input.display().to_string())), seed: None };
    emit.map(&out, &args.out)?;
    Ok(out.kind())
}

pub fn evaluate_cmd(args: &EvaluateArgs, ctx: &RunContext) -> Result<MetricReport> {
    let a = load_labels(&args.labels)?;
    let b = load_labels(&args.reference)?;
    let phi = match &args.phi {
        Some(p) => Some(read_map(p).and_then(|m| m.into_deformation()).map_err(|e| CliError::from(e).context(p.display()))?),
        None => None,
    };
    let report = evaluate(&a, &b, phi.as_ref(), args.radius_mm)?;
    if let Some(out) = &args.out {
        let emit = Emitter { ctx, hash: config_hash(&args.radius_mm), seed: None };
        emit.json(&report, out)?;
    }
    Ok(report)
}

pub fn lambda_search_cmd(args: &LambdaSearchArgs, ctx: &RunContext) -> Result<spherewarp_registration::LambdaSearchReport> {
    let run = RunConfig::load_or_default(args.config.as_deref())?;
    if !(args.centre > 0.0) || !args.centre.is_finite() {
        return Err(CliError::usage("--centre must be positive"));
    }
    if args.validation == 0 {
        return Err(CliError::usage("--validation must be at least 1"));
    }
    let layout = DatasetLayout::new(require_path(args.dataset.clone(), &run.dataset, "dataset")?);
    let manifest = layout.read_manifest()?;
    let (atlas, atlas_labels) = layout.load_atlas()?;
    let pairs = layout.load_subjects(args.validation.min(manifest.subjects))?;
    let report = lambda_search(&pairs, &atlas, &atlas_labels, &run.registration, &log_grid(args.centre), ctx.threads)?;
    if let Some(out) = args.out.clone().or_else(|| run.out.clone()) {
        let emit = Emitter { ctx, hash: config_hash(&run), seed: Some(run.registration.seed) };
        emit.json(&report, &out)?;
    }
    Ok(report)
}

pub fn convert(args: &ConvertArgs, ctx: &RunContext) -> Result<(usize, usize)> {
    let text = std::fs::read_to_string(&args.input).map_err(|e| CliError::from(e).context(args.input.display()))?;
    let (rows, cols, values) = parse_text_matrix(&text).map_err(|e| CliError::from(e).context(args.input.display()))?;
    let map = map_from_matrix(args.kind, rows, cols, values).map_err(|e| CliError::from(e).context(args.input.display()))?;
    let emit = Emitter { ctx, hash: config_hash(&args.kind.name()), seed: None };
    emit.map(&map, &args.out)?;
    Ok((rows, cols))
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("reports serialize"));
}

/// Runs a parsed command and prints its summary to stdout.
pub fn dispatch(cli: &Cli, ctx: &RunContext) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => {
            let m = synth(a, ctx)?;
            println!("wrote {} subjects on a {}x{} grid to {}", m.subjects, m.rows, m.cols, a.out.display());
        }
        Command::Register(a) => print_json(&summary_of(&register(a, ctx)?)),
        Command::Predict(a) => print_json(&summary_of(&predict(a, ctx)?)),
        Command::Train(a) => {
            let s = train(a, ctx)?;
            let first = s.epoch_losses.first().copied().unwrap_or(f64::NAN);
            let last = s.epoch_losses.last().copied().unwrap_or(f64::NAN);
            println!("epochs {} first loss {first:.6e} last loss {last:.6e}", s.epoch_losses.len());
        }
        Command::Warp(a) => {
            let kind = warp(a, ctx)?;
            println!("wrote {kind} map {}", a.out.display());
        }
        Command::Evaluate(a) => print_json(&evaluate_cmd(a, ctx)?),
        Command::Gradcheck(a) => {
            let report = run_suite()?;
            if a.json {
                print_json(&report);
            } else {
                for c in &report.checks {
                    let status = if c.passed() { "ok" } else { "FAIL" };
                    println!("{:<32} max rel error {:.3e} (tol {:.0e}) {status}", c.name, c.error, c.tolerance);
                }
                println!("{} checks in {:.1} s", report.checks.len(), report.wall_time_s);
            }
            if !report.all_passed() {
                let failed: Vec<_> = report.checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
                return Err(CliError::new(Category::Numerical, format!("gradient checks failed: {}", failed.join(", "))));
            }
        }
        Command::LambdaSearch(a) => print_json(&lambda_search_cmd(a, ctx)?),
        Command::Convert(a) => {
            let (rows, cols) = convert(a, ctx)?;
            println!("wrote {} map {rows}x{cols} to {}", a.kind, a.out.display());
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct Summary<'a> {
    mean_displacement: f64,
    mean_transform_displacement: f64,
    final_loss: f64,
    iterations: usize,
    fraction_nonpositive: f64,
    rotation: &'a Option<RigidRotation>,
}

fn summary_of(r: &RegistrationReport) -> Summary<'_> {
    Summary {
        mean_displacement: r.mean_displacement,
        mean_transform_displacement: r.mean_transform_displacement,
        final_loss: r.final_loss,
        iterations: r.iterations,
        fraction_nonpositive: r.jacobian.fraction_nonpositive,
        rotation: &r.rotation,
    }
}
