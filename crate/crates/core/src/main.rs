use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use rigkit::body_model::{BlendshapeBasis, ModelInputs, RigModel, SkinWeights};
use rigkit::correctives::{init_masks, train_correctives, CorrectiveModel, TargetSpace, TrainConfig};
use rigkit::fitting::{data2model_distances, fit, FitConfig, FreeVariables};
use rigkit::identity::{build_identity_space, IdentityBuildConfig, RegionMask, ShapeSet, SymmetryMap, DEFAULT_ASYMMETRY_THRESHOLD, DEFAULT_REGION_COUNTS, DEFAULT_SYMMETRY_TOLERANCE};
use rigkit::io::formats::{init_path, inputs_to_json, parse_inline_params};
use rigkit::io::synth::{generate_benchmark, generate_corrective_dataset, synthetic_mesh};
use rigkit::io::*;
use rigkit::lod::{transfer_rig, TransferOptions};
use rigkit::math::{EulerXYZ, Vec3};
use rigkit::mesh::MeshTopology;
use rigkit::skeleton::{Joint, ParameterTransform, Skeleton};
use rigkit::RigError;

#[derive(Parser)]
#[command(name = "rigkit", version, about = "Parametric human rig toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate the rig at given inputs and export the posed mesh.
    Pose(PoseArgs),
    /// Fit pose and shape to a point cloud.
    Fit(FitArgs),
    /// Train the sparse pose correctives on a dataset directory.
    TrainCorrectives(TrainArgs),
    /// Build a regional identity space from registered neutral meshes.
    BuildIdentity(IdentityArgs),
    /// Transfer a rig to another mesh resolution.
    LodTransfer(LodArgs),
    /// Fit every scan in a directory for several identity sizes and report errors.
    Eval(EvalArgs),
    /// Generate a synthetic rig and optional benchmark data.
    Synth(SynthArgs),
}

#[derive(Args)]
struct PoseArgs {
    rig: PathBuf,
    /// JSON inputs file, or inline `name=value,...` pairs.
    #[arg(long)]
    params: Option<String>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Clone)]
struct FitOptions {
    #[arg(long, default_value_t = 2500)]
    iters: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Comma-separated free groups: pose, skeleton, shape, expression, skeleton_coeffs, offsets.
    #[arg(long, default_value = "pose,shape")]
    free: String,
    /// Random subset of scan points used by the data term.
    #[arg(long)]
    max_points: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FitArgs {
    rig: PathBuf,
    scan: PathBuf,
    #[arg(long)]
    keypoints: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Starting inputs (JSON); the rest pose otherwise.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Optimise only the first N identity components.
    #[arg(long)]
    components: Option<usize>,
    #[command(flatten)]
    opts: FitOptions,
    /// Fitted mesh export (.obj or .ply).
    #[arg(long)]
    mesh: Option<PathBuf>,
    /// Result JSON: fitted inputs, loss trace and data2model error.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    rig: PathBuf,
    dataset: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    l1: f64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Continue from the rig's corrective model instead of a fresh geodesic initialisation.
    #[arg(long)]
    resume: bool,
    /// Hidden widths for a fresh model, e.g. `32,32`.
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    embedding: Option<usize>,
    /// Per-epoch loss report (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct IdentityArgs {
    registrations: PathBuf,
    /// Region masks: `[{"name": ..., "weights": [...]}]`; one all-ones region otherwise.
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Components per region.
    #[arg(long)]
    counts: Option<String>,
    #[arg(long)]
    mirror: bool,
    #[arg(long)]
    drop_asymmetric: bool,
    #[arg(long, default_value_t = DEFAULT_ASYMMETRY_THRESHOLD)]
    asymmetry_threshold: f64,
    /// Rig providing skeleton and skinning; a single-joint rig otherwise.
    #[arg(long)]
    rig: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct LodArgs {
    rig: PathBuf,
    template: PathBuf,
    #[arg(long)]
    smooth: bool,
    /// Re-derive corrective masks on the target mesh instead of transferring them.
    #[arg(long)]
    reinit_masks: bool,
    #[arg(long)]
    max_influences: Option<usize>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    rig: PathBuf,
    scans: PathBuf,
    #[arg(long, default_value = "2,4,8,16")]
    components: String,
    #[command(flatten)]
    opts: FitOptions,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Generator spec (JSON); defaults to the humanoid.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for benchmark scans.
    #[arg(long)]
    targets: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 800)]
    points: usize,
    /// Isotropic scan noise (metres).
    #[arg(long, default_value_t = 0.001)]
    noise: f64,
    /// Identity components sampled for the scans; all when omitted.
    #[arg(long)]
    components: Option<usize>,
    /// Directory for a corrective training dataset.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    poses: usize,
    /// Export the half-resolution template mesh here.
    #[arg(long)]
    decimated: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
}

enum Failure {
    Usage(String),
    Rig(RigError),
}

impl From<RigError> for Failure {
    fn from(e: RigError) -> Self {
        Failure::Rig(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> CliResult<Vec<T>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| usage(format!("{what}: `{s}` is not valid"))))
        .collect()
}

fn parse_free(text: &str) -> CliResult<FreeVariables> {
    let mut f = FreeVariables::NONE;
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match item {
            "pose" => f.pose = true,
            "skeleton" => f.skeleton = true,
            "shape" | "identity" => f.identity = true,
            "expression" => f.expression = true,
            "skeleton_coeffs" => f.skeleton_coeffs = true,
            "offsets" => f.offsets = true,
            other => return Err(usage(format!("--free: unknown group `{other}`"))),
        }
    }
    Ok(f)
}

fn fit_config(opts: &FitOptions, components: Option<usize>) -> CliResult<FitConfig> {
    Ok(FitConfig {
        iterations: opts.iters,
        learning_rate: opts.lr,
        free: parse_free(&opts.free)?,
        identity_components: components,
        max_points: opts.max_points,
        seed: opts.seed,
        ..FitConfig::default()
    })
}

fn pose(a: PoseArgs) -> CliResult {
    let rig = load_rig(&a.rig)?;
    let x = match &a.params {
        None => ModelInputs::zeros(&rig),
        Some(p) if Path::new(p).is_file() => load_inputs(&rig, p)?,
        Some(p) => parse_inline_params(&rig, p)?,
    };
    let posed = rig.forward(&x)?.posed;
    save_mesh(&a.output, &posed, rig.topology.triangles())?;
    Ok(())
}

fn run_fit(a: FitArgs) -> CliResult {
    let rig = load_rig(&a.rig)?;
    let target = load_scan_target(&a.scan, a.keypoints.as_deref(), a.mask.as_deref(), rig.num_vertices())?;
    let init = a.init.as_ref().map(|p| load_inputs(&rig, p)).transpose()?;
    let cfg = fit_config(&a.opts, a.components)?;
    let result = fit(&rig, &target, &cfg, init)?;
    let posed = rig.forward(&result.variables)?.posed;
    let d = data2model_distances(&target.points, &posed, &rig.topology, target.mask.as_deref())?;
    let mut out = inputs_to_json(&rig, &result.variables);
    let obj = out.as_object_mut().expect("inputs serialise to an object");
    obj.insert("iterations".into(), json!(result.trace.len()));
    obj.insert("trace".into(), json!(result.trace));
    obj.insert("breakdown".into(), serde_json::to_value(result.breakdown).map_err(RigError::from)?);
    obj.insert("data2model_mm".into(), json!(d.iter().sum::<f64>() / d.len() as f64));
    write_text(&a.output, &serde_json::to_string_pretty(&out).map_err(RigError::from)?)?;
    if let Some(m) = &a.mesh {
        save_mesh(m, &posed, rig.topology.triangles())?;
    }
    log::info!("fit finished in {:.2}s, final loss {:.6e}", result.wall_time_s, result.breakdown.total);
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult {
    let mut t = text.to_string();
    if !t.ends_with('\n') {
        t.push('\n');
    }
    fs::write(path, t).map_err(|e| Failure::Rig(RigError::Io { path: path.into(), source: e }))
}

fn train(a: TrainArgs) -> CliResult {
    let mut rig = load_rig(&a.rig)?;
    let (samples, space) = load_corrective_dataset(&a.dataset, &rig)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let model = match (&rig.correctives, a.resume) {
        (Some(m), true) => m.clone(),
        (None, true) => return Err(usage("--resume: the rig has no corrective model")),
        (existing, false) => {
            let mut config = existing.as_ref().map(|m| m.config.clone()).unwrap_or_default();
            if let Some(h) = &a.hidden {
                config.hidden = parse_list(h, "--hidden")?;
            }
            if let Some(c) = a.embedding {
                config.embedding = c;
            }
            let masks = init_masks(&rig.topology, &rig.template, &rig.skin, &rig.skeleton)?;
            CorrectiveModel::new(&rig.skeleton, rig.num_vertices(), config, masks, &mut rng)?
        }
    };
    let cfg = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch,
        epochs: a.epochs,
        l1: a.l1,
        seed: a.seed,
        target_space: space,
    };
    let (trained, report) = train_correctives(&rig, model, &samples, &cfg)?;
    log::info!(
        "corrective loss {:.6e} -> {:.6e}, mask support {} -> {}",
        report.initial_loss,
        report.final_loss,
        report.initial_support,
        report.final_support
    );
    if let Some(p) = &a.report {
        let r = json!({
            "epoch_losses": report.epoch_losses,
            "initial_loss": report.initial_loss,
            "final_loss": report.final_loss,
            "initial_support": report.initial_support,
            "final_support": report.final_support,
        });
        write_text(p, &serde_json::to_string_pretty(&r).map_err(RigError::from)?)?;
    }
    rig.correctives = Some(trained);
    save_rig(&a.output, &rig)?;
    Ok(())
}

fn mesh_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| RigError::Io { path: dir.into(), source: e })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("obj" | "ply")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Failure::Rig(RigError::Empty(format!("no .obj or .ply files in {}", dir.display()))));
    }
    Ok(files)
}

fn load_region_masks(path: &Path, num_vertices: usize) -> CliResult<Vec<RegionMask>> {
    let text = fs::read_to_string(path).map_err(|e| RigError::Io { path: path.into(), source: e })?;
    #[derive(serde::Deserialize)]
    struct Entry {
        name: String,
        weights: Vec<f64>,
    }
    let entries: Vec<Entry> = serde_json::from_str(&text).map_err(|e| RigError::Format(format!("{}: {e}", path.display())))?;
    entries
        .into_iter()
        .map(|e| {
            if e.weights.len() != num_vertices {
                return Err(Failure::Rig(RigError::DimensionMismatch {
                    what: format!("mask `{}`", e.name),
                    expected: num_vertices,
                    got: e.weights.len(),
                }));
            }
            Ok(RegionMask::new(e.name, e.weights)?)
        })
        .collect()
}

fn build_identity(a: IdentityArgs) -> CliResult {
    let files = mesh_files(&a.registrations)?;
    let mut shapes = Vec::new();
    let mut topology: Option<MeshTopology> = None;
    for f in &files {
        let (v, t) = load_mesh(f)?;
        if t.triangles().is_empty() {
            return Err(Failure::Rig(RigError::invalid(f.display().to_string(), "registration has no faces")));
        }
        match &topology {
            Some(t0) if t0.triangles() != t.triangles() => {
                return Err(Failure::Rig(RigError::invalid(f.display().to_string(), "topology differs from the first registration")));
            }
            Some(_) => {}
            None => topology = Some(t),
        }
        shapes.push(v);
    }
    let topology = topology.expect("at least one registration");
    let ids = files.iter().map(|f| f.file_stem().unwrap_or_default().to_string_lossy().into_owned()).collect();
    let set = ShapeSet::new(shapes, ids)?;
    let v = set.num_vertices();
    let masks = match &a.masks {
        Some(p) => load_region_masks(p, v)?,
        None => vec![RegionMask::ones("body", v)],
    };
    let counts = match &a.counts {
        Some(c) => parse_list(c, "--counts")?,
        None if masks.len() == DEFAULT_REGION_COUNTS.len() => DEFAULT_REGION_COUNTS.to_vec(),
        None => vec![DEFAULT_REGION_COUNTS[0].min(set.len().saturating_sub(1)); masks.len()],
    };
    let sym = if a.mirror || a.drop_asymmetric {
        Some(SymmetryMap::from_template(&set.mean(), DEFAULT_SYMMETRY_TOLERANCE)?)
    } else {
        None
    };
    let cfg = IdentityBuildConfig {
        counts,
        mirror: a.mirror,
        drop_asymmetric: a.drop_asymmetric,
        asymmetry_threshold: a.asymmetry_threshold,
        manual_drops: Vec::new(),
    };
    let space = build_identity_space(&set, &masks, sym.as_ref(), &cfg)?;
    let basis = space.to_basis()?;
    let mut rig = match &a.rig {
        Some(p) => {
            let mut rig = load_rig(p)?;
            if rig.topology.triangles() != topology.triangles() {
                return Err(Failure::Rig(RigError::invalid("--rig", "rig topology differs from the registrations")));
            }
            rig.template = space.mean.clone();
            rig.identity = basis;
            rig.identity_regions = space.regions.clone();
            rig.validate()?;
            rig
        }
        None => {
            let skel = Skeleton::new(vec![Joint::new("root", None, Vec3::zeros(), EulerXYZ::ZERO)])?;
            let skin = SkinWeights::new(vec![vec![(0, 1.0)]; v], 1, 1)?;
            RigModel::new(topology, space.mean.clone(), basis, BlendshapeBasis::empty(v), skin, skel, ParameterTransform::identity(1), None, None)?
        }
    };
    rig.identity_regions = space.regions.clone();
    save_rig(&a.output, &rig)?;
    Ok(())
}

fn lod(a: LodArgs) -> CliResult {
    let rig = load_rig(&a.rig)?;
    let (verts, topo) = load_mesh(&a.template)?;
    let opts = TransferOptions {
        smooth: a.smooth,
        reinit_masks: a.reinit_masks,
        max_influences: a.max_influences,
    };
    save_rig(&a.output, &transfer_rig(&rig, topo, verts, opts)?)?;
    Ok(())
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn eval(a: EvalArgs) -> CliResult {
    let rig = load_rig(&a.rig)?;
    let components: Vec<usize> = parse_list(&a.components, "--components")?;
    let scans: Vec<PathBuf> = mesh_files(&a.scans)?;
    let mut targets = Vec::new();
    for s in &scans {
        let t = load_scan_target(s, None, None, rig.num_vertices())?;
        let ip = init_path(s);
        let init = if ip.exists() { Some(load_inputs(&rig, &ip)?) } else { None };
        targets.push((t, init));
    }
    let mut csv = String::from("components,mean_mm,median_mm,p95_mm,runtime_s\n");
    for &k in &components {
        let cfg = fit_config(&a.opts, Some(k))?;
        let start = Instant::now();
        let mut errors = Vec::with_capacity(targets.len());
        for (t, init) in &targets {
            let r = fit(&rig, t, &cfg, init.clone())?;
            let posed = rig.forward(&r.variables)?.posed;
            let d = data2model_distances(&t.points, &posed, &rig.topology, t.mask.as_deref())?;
            errors.push(d.iter().sum::<f64>() / d.len() as f64);
        }
        let runtime = start.elapsed().as_secs_f64();
        errors.sort_by(f64::total_cmp);
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        let _ = writeln!(csv, "{k},{mean:.6},{:.6},{:.6},{runtime:.3}", percentile(&errors, 0.5), percentile(&errors, 0.95));
        log::info!("components {k}: median {:.3} mm over {} scans", percentile(&errors, 0.5), errors.len());
    }
    write_text(&a.output, &csv)
}

fn synth(a: SynthArgs) -> CliResult {
    let mut spec: SyntheticRigSpec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| RigError::Io { path: p.into(), source: e })?;
            serde_json::from_str(&text).map_err(|e| RigError::Format(format!("{}: {e}", p.display())))?
        }
        None => SyntheticRigSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let rig = generate_synthetic_rig(&spec)?;
    save_rig(&a.output, &rig)?;
    if let Some(dir) = &a.targets {
        fs::create_dir_all(dir).map_err(|e| RigError::Io { path: dir.into(), source: e })?;
        let k = a.components.unwrap_or(rig.identity.len());
        for (n, t) in generate_benchmark(&rig, a.count, a.points, a.noise, k, spec.seed)?.iter().enumerate() {
            let stem = format!("target_{n:03}");
            save_scan_target(dir, &stem, &t.target)?;
            save_inputs(&rig, dir.join(format!("{stem}.truth.json")), &t.truth)?;
        }
    }
    if let Some(dir) = &a.dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let samples = generate_corrective_dataset(&rig, a.poses, &mut rng)?;
        save_corrective_dataset(dir, &samples, TargetSpace::Residual)?;
    }
    if let Some(p) = &a.decimated {
        let (v, t) = synthetic_mesh(&spec.decimated())?;
        save_mesh(p, &v, t.triangles())?;
    }
    Ok(())
}

fn configure_threads() -> CliResult {
    if let Ok(v) = std::env::var("RIGKIT_THREADS") {
        let n: usize = v.trim().parse().map_err(|_| usage(format!("RIGKIT_THREADS: `{v}` is not a thread count")))?;
        if n > 0 {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| usage(format!("RIGKIT_THREADS: {e}")))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = configure_threads().and_then(|_| match cli.command {
        Command::Pose(a) => pose(a),
        Command::Fit(a) => run_fit(a),
        Command::TrainCorrectives(a) => train(a),
        Command::BuildIdentity(a) => build_identity(a),
        Command::LodTransfer(a) => lod(a),
        Command::Eval(a) => eval(a),
        Command::Synth(a) => synth(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Rig(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
