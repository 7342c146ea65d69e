//! End-to-end runs: keypoints to triangulated landmarks, markers, filtered
//! trajectories and joint angles, with anthropometry of a body mesh.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anthro::{measure_all, select_measurement_frame, AnthroError, DensityModel, BODY_DENSITY};
use crate::augment::{augment, AugmentError, Augmenter, AugmenterKind, ExternalModel, MarkerSetTemplate, ProcessPredictor};
use crate::augment::LandmarkSequence;
use crate::calib::{CalibError, CorrespondenceSet, CorrespondenceSource};
use crate::rig::{PixelPoint, WorldPoint};
use crate::filt::{filter_set, FiltError, FilterSpec, MarkerTrajectory};
use crate::io::{self, AnthroDocument, IoError, RunManifest, TrcUnits, TriangulationDocument};
use crate::kin::{solve_sequence, IkWeights, JointAngleSeries, KinError, SkeletonModel};
use crate::rig::RigError;
use crate::synth::{self, Dataset, SynthError};
use crate::triang::{exclusion_stats, triangulate_sequence, ExclusionSummary, GateConfig, GatePreset, TriangError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("io: {0}")]
    Io(#[from] IoError),
    #[error("rig: {0}")]
    Rig(#[from] RigError),
    #[error("calib: {0}")]
    Calib(#[from] CalibError),
    #[error("triang: {0}")]
    Triang(#[from] TriangError),
    #[error("augment: {0}")]
    Augment(#[from] AugmentError),
    #[error("filt: {0}")]
    Filt(#[from] FiltError),
    #[error("kin: {0}")]
    Kin(#[from] KinError),
    #[error("anthro: {0}")]
    Anthro(#[from] AnthroError),
    #[error("synth: {0}")]
    Synth(#[from] SynthError),
    #[error("config: {0}")]
    Config(String),
}

/// Command used to start an external marker predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalCommand {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
    pub window: usize,
    /// Model weights the command loads; checked for existence before use.
    #[serde(default)]
    pub artifact: Option<PathBuf>,
}

/// Everything that affects results. The worker count is not part of it:
/// outputs do not depend on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub task: String,
    pub gate: GatePreset,
    /// Used when `gate` is `custom`.
    pub gates: GateConfig,
    pub filter: FilterSpec,
    /// Overrides the rate recorded with the keypoints.
    pub rate_hz: Option<f64>,
    pub augmenter: AugmenterKind,
    pub external: Option<ExternalCommand>,
    pub units: TrcUnits,
    pub density: f64,
    pub ik_weights: IkWeights,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            task: "custom".into(),
            gate: GatePreset::Standard,
            gates: GateConfig::standard(),
            filter: FilterSpec::default(),
            rate_hz: None,
            augmenter: AugmenterKind::BaselineRigid,
            external: None,
            units: TrcUnits::M,
            density: BODY_DENSITY,
            ik_weights: IkWeights::default(),
        }
    }
}

impl PipelineConfig {
    pub fn gates(&self) -> Result<GateConfig, PipelineError> {
        let g = GateConfig::preset(self.gate).unwrap_or(self.gates);
        Ok(GateConfig::new(g.confidence_min, g.reprojection_max, g.min_views)?)
    }

    pub fn augmenter(&self) -> Result<Augmenter, PipelineError> {
        match self.augmenter {
            AugmenterKind::BaselineRigid => Ok(Augmenter::BaselineRigid),
            AugmenterKind::ExternalModel => {
                let cmd = self
                    .external
                    .as_ref()
                    .ok_or_else(|| PipelineError::Config("external_model needs an `external` command".into()))?;
                if let Some(path) = &cmd.artifact {
                    if !path.exists() {
                        return Err(AugmentError::ModelArtifactMissing(path.clone()).into());
                    }
                }
                let predictor = ProcessPredictor::spawn(&cmd.program, &cmd.args, cmd.window)?;
                Ok(Augmenter::External(ExternalModel {
                    artifact: cmd.artifact.clone(),
                    predictor: std::sync::Arc::new(predictor),
                }))
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let text = io::read_text(path)?;
        serde_json::from_str(&text).map_err(|e| {
            IoError::MalformedDocument {
                path: path.to_path_buf(),
                line: e.line(),
                column: e.column(),
                reason: e.to_string(),
            }
            .into()
        })
    }
}

/// Skeleton and marker set used for augmentation and inverse kinematics.
#[derive(Debug, Clone)]
pub struct BodyModel {
    pub skeleton: SkeletonModel,
    pub template: MarkerSetTemplate,
}

impl Default for BodyModel {
    fn default() -> Self {
        Self {
            skeleton: synth::humanoid_model(),
            template: synth::humanoid_template(),
        }
    }
}

/// Runs `f` on a dedicated pool of `jobs` threads.
pub fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub triangulation: TriangulationDocument,
    pub stats: ExclusionSummary,
    pub markers: Vec<MarkerTrajectory>,
    pub filtered: Vec<MarkerTrajectory>,
    pub angles: JointAngleSeries,
    pub anthro: Option<AnthroDocument>,
}

/// In-memory inputs of a run.
pub struct PipelineInput<'a> {
    pub keypoints: &'a [Vec<crate::triang::KeypointFrame>],
    pub rig: &'a crate::rig::Rig,
    pub rate_hz: f64,
    pub mesh: Option<&'a crate::anthro::BodyMesh>,
}

/// ingest, triangulate, augment, filter, IK; anthropometry of the mesh
/// alongside, tagged with the most upright frame.
pub fn run(input: &PipelineInput, config: &PipelineConfig, body: &BodyModel) -> Result<PipelineOutput, PipelineError> {
    let rate = config.rate_hz.unwrap_or(input.rate_hz);
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(PipelineError::Config(format!("rate {rate} must be positive")));
    }
    let gates = config.gates()?;
    let results = triangulate_sequence(input.keypoints, input.rig, &gates)?;
    let stats = exclusion_stats(&config.task, &results)?;
    let seq = LandmarkSequence::from_results(&results, rate);
    let markers = augment(&seq, &config.augmenter()?, &body.template)?;
    let filtered = filter_set(&markers, &config.filter)?;
    let angles = solve_sequence(&body.skeleton, &config.ik_weights, &filtered)?;
    let anthro = match input.mesh {
        Some(mesh) => {
            let frame = select_measurement_frame(&seq.points)?;
            let density = DensityModel::new(config.density, DensityModel::default().bmi_medians)?;
            Some(AnthroDocument {
                measurement_frame: Some(seq.frames[frame]),
                report: measure_all(mesh, &density),
            })
        }
        None => None,
    };
    Ok(PipelineOutput {
        triangulation: TriangulationDocument {
            task: config.task.clone(),
            rate_hz: rate,
            frames: results,
        },
        stats,
        markers,
        filtered,
        angles,
        anthro,
    })
}

// ---------------------------------------------------------------------------
// bundles

pub const BUNDLE_FILE: &str = "bundle.json";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const KEYPOINT_DIR: &str = "keypoints";
pub const MESH_FILE: &str = "body.obj";
pub const TRUTH_FILE: &str = "truth.json";
pub const CORRESPONDENCE_DIR: &str = "correspondences";

/// Description of a capture directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleInfo {
    pub schema_version: u32,
    pub task: String,
    pub rate_hz: f64,
    pub frames: usize,
    #[serde(default)]
    pub mesh: Option<String>,
}

/// Ground truth stored next to a synthetic capture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleTruth {
    pub schema_version: u32,
    pub angle_names: Vec<String>,
    /// `angles[frame][angle]`, degrees
    pub angles: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub occlusion_fraction: f64,
    pub anthro: synth::AnthroTruth,
}

/// Writes a synthetic capture: calibration, keypoint files, body mesh,
/// truth and a bundle description.
pub fn write_bundle(dir: &Path, data: &Dataset, model: &SkeletonModel) -> Result<(), PipelineError> {
    io::write_calibration(&dir.join(CALIBRATION_FILE), &data.rig)?;
    io::write_keypoints(&dir.join(KEYPOINT_DIR), &data.keypoints)?;
    for (cam, file) in data.rig.cameras().iter().zip(calibration_targets(data)) {
        io::write_correspondences(&dir.join(CORRESPONDENCE_DIR).join(format!("{}.txt", cam.id())), &file)?;
    }
    let (mesh, truth) = synth::default_body();
    io::write_mesh(&dir.join(MESH_FILE), &mesh, "synthetic-body")?;
    io::write_json(
        &dir.join(TRUTH_FILE),
        &BundleTruth {
            schema_version: io::SCHEMA_VERSION,
            angle_names: model.angles().iter().map(|a| a.name.clone()).collect(),
            angles: data.true_angles(model),
            q: data.q.clone(),
            occlusion_fraction: data.occlusion_fraction(),
            anthro: truth,
        },
    )?;
    io::write_json(
        &dir.join(BUNDLE_FILE),
        &BundleInfo {
            schema_version: io::SCHEMA_VERSION,
            task: data.task.name().into(),
            rate_hz: data.rate_hz,
            frames: data.frame_count(),
            mesh: Some(MESH_FILE.into()),
        },
    )?;
    Ok(())
}

/// Correspondences for every camera from a 3 x 3 x 3 lattice with 0.3 m
/// spacing around the capture centre, observed with the dataset's pixel
/// noise.
pub fn calibration_targets(data: &Dataset) -> Vec<io::CorrespondenceFile> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(data.noise.seed ^ 0xca11b);
    let normal = Normal::new(0.0, data.noise.pixel_sigma.max(0.0)).expect("finite sigma");
    let lattice: Vec<WorldPoint> = (0..27)
        .map(|i| {
            let c = |k: usize| ((i / k) % 3) as f64 - 1.0;
            WorldPoint::new(0.3 * c(1), 0.3 * c(3), 0.9 + 0.3 * c(9))
        })
        .collect();
    data.rig
        .cameras()
        .iter()
        .map(|cam| {
            let pairs = lattice
                .iter()
                .filter_map(|w| {
                    let p = cam.project(w).ok()?;
                    let uv = p.uv + nalgebra::Vector2::new(normal.sample(&mut rng), normal.sample(&mut rng));
                    cam.in_image(&uv).then(|| (*w, PixelPoint::new(uv.x, uv.y, 1.0)))
                })
                .collect();
            io::CorrespondenceFile {
                camera_id: cam.id().to_string(),
                image_size: cam.image_size(),
                set: CorrespondenceSet::new(pairs, CorrespondenceSource::Synthetic),
            }
        })
        .collect()
}

/// Output files of [`run_bundle`], relative to the output directory.
pub const OUTPUT_FILES: [&str; 6] = [
    "triangulated.json",
    "markers.trc",
    "filtered.trc",
    "angles.csv",
    "stats.json",
    "anthro.json",
];

/// Runs the pipeline on a capture directory and writes every output plus
/// `manifest.json` into `out`. Bytes written do not depend on `jobs`.
pub fn run_bundle(bundle: &Path, out: &Path, config: &PipelineConfig, jobs: usize) -> Result<PipelineOutput, PipelineError> {
    let info: BundleInfo = io::read_json(&bundle.join(BUNDLE_FILE))?;
    let rig = io::read_calibration(&bundle.join(CALIBRATION_FILE))?;
    let streams = io::read_keypoints(&bundle.join(KEYPOINT_DIR))?;
    let keypoints = io::synchronize(&streams, &rig)?;
    let mesh = match &info.mesh {
        Some(name) => {
            let obj = bundle.join(name);
            Some(io::read_mesh(&obj, &io::sidecar_path(&obj))?)
        }
        None => None,
    };
    let mut config = config.clone();
    if config.task == PipelineConfig::default().task {
        config.task = info.task.clone();
    }
    let input = PipelineInput {
        keypoints: &keypoints,
        rig: &rig,
        rate_hz: info.rate_hz,
        mesh: mesh.as_ref(),
    };
    let body = BodyModel::default();
    let output = with_pool(jobs, || run(&input, &config, &body))??;
    write_outputs(out, &output, &config)?;

    let mut manifest = RunManifest::new("pipeline", &config.to_json());
    manifest.inputs = RunManifest::digest(&[bundle.to_path_buf()], bundle)?;
    let written: Vec<PathBuf> = OUTPUT_FILES
        .iter()
        .map(|f| out.join(f))
        .filter(|p| p.exists())
        .collect();
    manifest.outputs = RunManifest::digest(&written, out)?;
    io::write_json(&out.join("manifest.json"), &manifest)?;
    Ok(output)
}

pub fn write_outputs(out: &Path, output: &PipelineOutput, config: &PipelineConfig) -> Result<(), PipelineError> {
    io::write_triangulation(&out.join("triangulated.json"), &output.triangulation)?;
    io::write_trc(&out.join("markers.trc"), &output.markers, config.units)?;
    io::write_trc(&out.join("filtered.trc"), &output.filtered, config.units)?;
    io::write_angles_csv(&out.join("angles.csv"), &output.angles)?;
    io::write_stats(&out.join("stats.json"), &output.stats)?;
    if let Some(a) = &output.anthro {
        io::write_anthro_report(&out.join("anthro.json"), a)?;
    }
    Ok(())
}
