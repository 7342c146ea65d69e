use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use markerless::anthro::{measure_all, select_measurement_frame, DensityModel};
use markerless::augment::{augment, AugmenterKind, LandmarkSequence};
use markerless::calib::{audit, decompose, resect};
use markerless::filt::filter_set;
use markerless::io::{self, AnthroDocument, RunManifest, TrcUnits, TriangulationDocument};
use markerless::kin::solve_sequence;
use markerless::pipeline::{self, with_pool, BodyModel, PipelineConfig, PipelineError};
use markerless::synth::{self, MotionScript, NoiseSpec, Task};
use markerless::triang::{exclusion_stats, triangulate_sequence, GatePreset};
use markerless::{FilterSpec, Rig, SkeletonModel};

#[derive(Parser)]
#[command(name = "markerless", version, about = "Markerless motion capture from multi-camera keypoints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate cameras from 3D-2D correspondence files.
    Calibrate(CalibrateArgs),
    /// Triangulate keypoint files into 3D landmarks.
    Triangulate(TriangulateArgs),
    /// Predict the marker set from triangulated landmarks.
    Augment(AugmentArgs),
    /// Gap-fill and low-pass filter a TRC file.
    Filter(FilterArgs),
    /// Fit the skeleton to a TRC file and write joint angles.
    Ik(IkArgs),
    /// Measure a body mesh.
    Anthro(AnthroArgs),
    /// Generate a synthetic capture bundle.
    Synth(SynthArgs),
    /// Run every stage on a capture bundle.
    Pipeline(PipelineArgs),
    /// Summarize the outputs of a pipeline run.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum GateArg {
    Default,
    Validation,
}

#[derive(Clone, Copy, ValueEnum)]
enum AugmenterArg {
    Baseline,
    External,
}

#[derive(Clone, Copy, ValueEnum)]
enum UnitsArg {
    M,
    Mm,
}

/// Settings shared by commands that run pipeline stages. Flags override
/// the config file.
#[derive(Args, Clone)]
struct Common {
    /// JSON pipeline configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Correspondence files, one per camera.
    #[arg(long, required = true, num_args = 1..)]
    correspondences: Vec<PathBuf>,
    /// Audit threshold in pixels.
    #[arg(long, default_value_t = 8.0)]
    threshold: f64,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TriangulateArgs {
    #[arg(long)]
    keypoints: PathBuf,
    #[arg(long)]
    calibration: PathBuf,
    #[arg(long, value_enum)]
    gate: Option<GateArg>,
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    task: Option<String>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct AugmentArgs {
    /// Triangulation document.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    augmenter: Option<AugmenterArg>,
    #[arg(long, value_enum)]
    units: Option<UnitsArg>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    cutoff: Option<f64>,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long, value_enum)]
    units: Option<UnitsArg>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct IkArgs {
    #[arg(long)]
    input: PathBuf,
    /// Skeleton model JSON; the built-in humanoid otherwise.
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct AnthroArgs {
    #[arg(long)]
    mesh: PathBuf,
    /// Landmark sidecar; `<mesh>.landmarks.json` by default.
    #[arg(long)]
    landmarks: Option<PathBuf>,
    /// Triangulation document used to pick the measurement frame.
    #[arg(long)]
    triangulated: Option<PathBuf>,
    #[arg(long)]
    density: Option<f64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "squatting")]
    task: String,
    /// Pixel noise sigma.
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    /// Fraction of keypoints occluded.
    #[arg(long, default_value_t = 0.0)]
    occlusion: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30.0)]
    rate: f64,
    /// Seconds of motion.
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    /// Capture bundle directory.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    gate: Option<GateArg>,
    #[arg(long)]
    cutoff: Option<f64>,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long, value_enum)]
    augmenter: Option<AugmenterArg>,
    #[arg(long, value_enum)]
    units: Option<UnitsArg>,
    #[arg(long)]
    task: Option<String>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ReportArgs {
    /// Output directory of a pipeline run.
    #[arg(long)]
    input: PathBuf,
}

/// A problem with the invocation rather than the data.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn require(path: &Path, what: &str) -> anyhow::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(UsageError(format!("{what} {} does not exist", path.display())).into())
    }
}

fn load_config(common: &Common) -> anyhow::Result<PipelineConfig> {
    match &common.config {
        Some(p) => {
            require(p, "config")?;
            Ok(PipelineConfig::from_file(p)?)
        }
        None => Ok(PipelineConfig::default()),
    }
}

fn apply_filter(config: &mut PipelineConfig, cutoff: Option<f64>, order: Option<usize>) -> anyhow::Result<()> {
    let spec = FilterSpec::new(
        order.unwrap_or(config.filter.order),
        cutoff.unwrap_or(config.filter.cutoff_hz),
    )
    .map_err(PipelineError::from)?;
    config.filter = spec;
    Ok(())
}

fn apply_gate(config: &mut PipelineConfig, gate: Option<GateArg>) {
    match gate {
        Some(GateArg::Default) => config.gate = GatePreset::Standard,
        Some(GateArg::Validation) => config.gate = GatePreset::Validation,
        None => {}
    }
}

fn apply_augmenter(config: &mut PipelineConfig, a: Option<AugmenterArg>) {
    match a {
        Some(AugmenterArg::Baseline) => config.augmenter = AugmenterKind::BaselineRigid,
        Some(AugmenterArg::External) => config.augmenter = AugmenterKind::ExternalModel,
        None => {}
    }
}

fn apply_units(config: &mut PipelineConfig, u: Option<UnitsArg>) {
    match u {
        Some(UnitsArg::M) => config.units = TrcUnits::M,
        Some(UnitsArg::Mm) => config.units = TrcUnits::Mm,
        None => {}
    }
}

fn write_manifest(command: &str, config: &str, inputs: &[PathBuf], outputs: &[PathBuf], out: &Path) -> anyhow::Result<()> {
    let mut manifest = RunManifest::new(command, config);
    let base = common_base(inputs);
    manifest.inputs = RunManifest::digest(inputs, &base)?;
    manifest.outputs = RunManifest::digest(outputs, out)?;
    io::write_json(&out.join("manifest.json"), &manifest)?;
    Ok(())
}

/// Deepest directory containing every input, so manifests do not record
/// where a bundle happens to live.
fn common_base(paths: &[PathBuf]) -> PathBuf {
    let dirs: Vec<PathBuf> = paths
        .iter()
        .map(|p| if p.is_dir() { p.clone() } else { p.parent().map(Path::to_path_buf).unwrap_or_default() })
        .collect();
    let Some(first) = dirs.first() else {
        return PathBuf::new();
    };
    let mut base = first.clone();
    while !dirs.iter().all(|d| d.starts_with(&base)) {
        if !base.pop() {
            break;
        }
    }
    base
}

fn calibrate(args: CalibrateArgs) -> anyhow::Result<()> {
    for p in &args.correspondences {
        require(p, "correspondence file")?;
    }
    let mut cameras = Vec::new();
    let mut reports = Vec::new();
    for p in &args.correspondences {
        let file = io::read_correspondences(p)?;
        let a = resect(&file.set).map_err(PipelineError::from)?;
        let cam = decompose(&a)
            .map_err(PipelineError::from)?
            .into_camera(file.camera_id.clone(), file.image_size)
            .map_err(PipelineError::from)?;
        let report = audit(&cam, &file.set, args.threshold);
        println!(
            "{}: mean {:.3} px, max {:.3} px, {} excluded{}",
            report.camera_id,
            report.mean_error,
            report.max_error,
            report.excluded_points.len(),
            if report.recalibration_recommended { ", recalibration recommended" } else { "" }
        );
        reports.push(report);
        cameras.push(cam);
    }
    let rig = Rig::new(cameras).map_err(PipelineError::from)?;
    let out = &args.common.out;
    let cal = out.join("calibration.json");
    let aud = out.join("audit.json");
    io::write_calibration(&cal, &rig)?;
    io::write_audit(&aud, &reports)?;
    let config = format!("{{\"threshold\":{}}}", args.threshold);
    write_manifest("calibrate", &config, &args.correspondences, &[cal, aud], out)
}

fn triangulate(args: TriangulateArgs) -> anyhow::Result<()> {
    require(&args.calibration, "calibration file")?;
    require(&args.keypoints, "keypoint directory")?;
    let mut config = load_config(&args.common)?;
    apply_gate(&mut config, args.gate);
    if let Some(t) = args.task {
        config.task = t;
    }
    let rate = args.rate.or(config.rate_hz).unwrap_or(30.0);
    let gates = config.gates()?;
    let rig = io::read_calibration(&args.calibration)?;
    let frames = io::synchronize(&io::read_keypoints(&args.keypoints)?, &rig)?;
    let results = with_pool(args.common.jobs, || triangulate_sequence(&frames, &rig, &gates))?
        .map_err(PipelineError::from)?;
    let stats = exclusion_stats(&config.task, &results).map_err(PipelineError::from)?;
    println!("{}", stats.table_row());
    let out = &args.common.out;
    let tri = out.join("triangulated.json");
    let st = out.join("stats.json");
    io::write_triangulation(
        &tri,
        &TriangulationDocument {
            task: config.task.clone(),
            rate_hz: rate,
            frames: results,
        },
    )?;
    io::write_stats(&st, &stats)?;
    write_manifest(
        "triangulate",
        &config.to_json(),
        &[args.calibration, args.keypoints],
        &[tri, st],
        out,
    )
}

fn augment_cmd(args: AugmentArgs) -> anyhow::Result<()> {
    require(&args.input, "triangulation document")?;
    let mut config = load_config(&args.common)?;
    apply_augmenter(&mut config, args.augmenter);
    apply_units(&mut config, args.units);
    let doc = io::read_triangulation(&args.input)?;
    let seq = LandmarkSequence::from_results(&doc.frames, doc.rate_hz);
    let augmenter = config.augmenter()?;
    let body = BodyModel::default();
    let markers = with_pool(args.common.jobs, || augment(&seq, &augmenter, &body.template))?
        .map_err(PipelineError::from)?;
    let out = &args.common.out;
    let trc = out.join("markers.trc");
    io::write_trc(&trc, &markers, config.units)?;
    write_manifest("augment", &config.to_json(), &[args.input], &[trc], out)
}

fn filter_cmd(args: FilterArgs) -> anyhow::Result<()> {
    require(&args.input, "TRC file")?;
    let mut config = load_config(&args.common)?;
    apply_filter(&mut config, args.cutoff, args.order)?;
    let doc = io::read_trc(&args.input)?;
    config.units = doc.units;
    apply_units(&mut config, args.units);
    let mut trajectories = doc.trajectories()?;
    if let Some(rate) = args.rate.or(config.rate_hz) {
        trajectories.iter_mut().for_each(|t| t.rate_hz = rate);
    }
    let filtered = with_pool(args.common.jobs, || filter_set(&trajectories, &config.filter))?
        .map_err(PipelineError::from)?;
    let out = &args.common.out;
    let trc = out.join("filtered.trc");
    io::write_trc(&trc, &filtered, config.units)?;
    write_manifest("filter", &config.to_json(), &[args.input], &[trc], out)
}

fn ik(args: IkArgs) -> anyhow::Result<()> {
    require(&args.input, "TRC file")?;
    let config = load_config(&args.common)?;
    let model: SkeletonModel = match &args.model {
        Some(p) => {
            require(p, "model")?;
            io::read_json(p)?
        }
        None => synth::humanoid_model(),
    };
    let trajectories = io::read_trc(&args.input)?.trajectories()?;
    let series = solve_sequence(&model, &config.ik_weights, &trajectories).map_err(PipelineError::from)?;
    let out = &args.common.out;
    let csv = out.join("angles.csv");
    io::write_angles_csv(&csv, &series)?;
    let mut inputs = vec![args.input];
    inputs.extend(args.model);
    write_manifest("ik", &config.to_json(), &inputs, &[csv], out)
}

fn anthro(args: AnthroArgs) -> anyhow::Result<()> {
    require(&args.mesh, "mesh")?;
    let sidecar = args.landmarks.clone().unwrap_or_else(|| io::sidecar_path(&args.mesh));
    require(&sidecar, "landmark sidecar")?;
    let mut config = load_config(&args.common)?;
    if let Some(d) = args.density {
        config.density = d;
    }
    let mesh = io::read_mesh(&args.mesh, &sidecar)?;
    let measurement_frame = match &args.triangulated {
        Some(p) => {
            require(p, "triangulation document")?;
            let doc = io::read_triangulation(p)?;
            let seq = LandmarkSequence::from_results(&doc.frames, doc.rate_hz);
            let i = select_measurement_frame(&seq.points).map_err(PipelineError::from)?;
            Some(seq.frames[i])
        }
        None => None,
    };
    let density =
        DensityModel::new(config.density, DensityModel::default().bmi_medians).map_err(PipelineError::from)?;
    let doc = AnthroDocument {
        measurement_frame,
        report: measure_all(&mesh, &density),
    };
    print_anthro(&doc);
    let out = &args.common.out;
    let path = out.join("anthro.json");
    io::write_anthro_report(&path, &doc)?;
    let mut inputs = vec![args.mesh, sidecar];
    inputs.extend(args.triangulated);
    write_manifest("anthro", &config.to_json(), &inputs, &[path], out)
}

fn synth_cmd(args: SynthArgs) -> anyhow::Result<()> {
    let task: Task = args.task.parse().map_err(PipelineError::from)?;
    let script = MotionScript::new(task, args.duration, args.rate).map_err(PipelineError::from)?;
    let noise = NoiseSpec::new(args.noise, args.occlusion, args.seed).map_err(PipelineError::from)?;
    let data = synth::generate(&script, &synth::standard_rig(), &noise).map_err(PipelineError::from)?;
    pipeline::write_bundle(&args.out, &data, &synth::humanoid_model())?;
    println!(
        "{} frames of {} at {} Hz, {:.1}% occluded",
        data.frame_count(),
        task.name(),
        data.rate_hz,
        100.0 * data.occlusion_fraction()
    );
    Ok(())
}

fn pipeline_cmd(args: PipelineArgs) -> anyhow::Result<()> {
    require(&args.input, "bundle")?;
    require(&args.input.join(pipeline::CALIBRATION_FILE), "calibration file")?;
    let mut config = load_config(&args.common)?;
    apply_gate(&mut config, args.gate);
    apply_filter(&mut config, args.cutoff, args.order)?;
    apply_augmenter(&mut config, args.augmenter);
    apply_units(&mut config, args.units);
    if args.rate.is_some() {
        config.rate_hz = args.rate;
    }
    if let Some(t) = args.task {
        config.task = t;
    }
    let output = pipeline::run_bundle(&args.input, &args.common.out, &config, args.common.jobs)?;
    println!("{}", output.stats.table_row());
    Ok(())
}

fn print_anthro(doc: &AnthroDocument) {
    if let Some(f) = doc.measurement_frame {
        println!("measurement frame {f}");
    }
    for (code, m) in &doc.report.values {
        println!("{code} {:<28} {:>9.4} {}", m.name, m.value, m.unit.symbol());
    }
    for (code, why) in &doc.report.missing {
        println!("{code} missing: {why}");
    }
    if let (Some(bmi), Some(cat)) = (doc.report.bmi, doc.report.bmi_category) {
        println!("BMI {bmi:.1} ({cat:?})");
    }
}

fn report(args: ReportArgs) -> anyhow::Result<()> {
    require(&args.input, "run directory")?;
    let stats = io::read_stats(&args.input.join("stats.json"))?;
    println!("task | excluded % | mean px | std px");
    println!("{}", stats.table_row());
    let csv = args.input.join("angles.csv");
    if csv.exists() {
        let (header, rows) = io::read_angles_csv(&csv)?;
        for (k, name) in header.iter().enumerate().skip(2) {
            let v: Vec<f64> = rows.iter().map(|r| r[k]).filter(|x| x.is_finite()).collect();
            if v.is_empty() {
                continue;
            }
            let min = v.iter().copied().fold(f64::INFINITY, f64::min);
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            println!("{name}: mean {mean:.3}, range [{min:.3}, {max:.3}]");
        }
    }
    let anthro = args.input.join("anthro.json");
    if anthro.exists() {
        print_anthro(&io::read_anthro_report(&anthro)?);
    }
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Calibrate(a) => calibrate(a),
        Command::Triangulate(a) => triangulate(a),
        Command::Augment(a) => augment_cmd(a),
        Command::Filter(a) => filter_cmd(a),
        Command::Ik(a) => ik(a),
        Command::Anthro(a) => anthro(a),
        Command::Synth(a) => synth_cmd(a),
        Command::Pipeline(a) => pipeline_cmd(a),
        Command::Report(a) => report(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            let msg = match e.downcast_ref::<io::IoError>() {
                Some(_) => format!("io: {e}"),
                None => e.to_string(),
            };
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
