//! Expansion of triangulated keypoints to the 57-marker anatomical set.
//!
//! The baseline attaches every marker rigidly to a segment frame built from
//! keypoints. Learned models plug in through [`MarkerPredictor`].

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::{Arc, Mutex};

use nalgebra::{Isometry3, Matrix3, Rotation3, Translation3, UnitQuaternion, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filt::MarkerTrajectory;
use crate::landmarks::{Landmark, LANDMARK_COUNT};
use crate::rig::WorldPoint;
use crate::triang::FrameResult;

pub const MARKER_COUNT: usize = 57;
pub const TEMPLATE_SCHEMA_VERSION: u32 = 1;

/// Segments that carry markers, in a fixed order.
pub const SEGMENTS: [&str; 13] = [
    "pelvis",
    "torso",
    "head",
    "thigh_r",
    "shank_r",
    "foot_r",
    "thigh_l",
    "shank_l",
    "foot_l",
    "humerus_r",
    "forearm_r",
    "humerus_l",
    "forearm_l",
];

/// Below this sine of the elbow angle the arm hinge axis falls back to the
/// shoulder line.
const STRAIGHT_ARM_SINE: f64 = 0.17;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("segment {segment} needs landmark {landmark} which is missing")]
    MissingDefiningLandmark { segment: String, landmark: String },
    #[error("segment {segment}: defining landmarks are degenerate")]
    DegenerateFrame { segment: String },
    #[error("invalid marker template: {0}")]
    InvalidTemplate(String),
    #[error("model artifact {0} not found")]
    ModelArtifactMissing(PathBuf),
    #[error("sequence of {len} frames is shorter than the model window {window}")]
    WindowTooLong { window: usize, len: usize },
    #[error("external model failed: {0}")]
    External(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateMarker {
    pub name: String,
    pub segment: String,
    /// Position in the keypoint-derived segment frame, meters.
    pub offset: Vector3<f64>,
}

/// Ordered 57-marker set with segment attachments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TemplateDocument", into = "TemplateDocument")]
pub struct MarkerSetTemplate {
    markers: Vec<TemplateMarker>,
}

#[derive(Serialize, Deserialize)]
struct TemplateDocument {
    schema_version: u32,
    markers: Vec<TemplateMarker>,
}

impl From<MarkerSetTemplate> for TemplateDocument {
    fn from(t: MarkerSetTemplate) -> Self {
        Self {
            schema_version: TEMPLATE_SCHEMA_VERSION,
            markers: t.markers,
        }
    }
}

impl TryFrom<TemplateDocument> for MarkerSetTemplate {
    type Error = AugmentError;

    fn try_from(d: TemplateDocument) -> Result<Self, AugmentError> {
        if d.schema_version != TEMPLATE_SCHEMA_VERSION {
            return Err(AugmentError::InvalidTemplate(format!(
                "unsupported schema version {}",
                d.schema_version
            )));
        }
        MarkerSetTemplate::new(d.markers)
    }
}

impl MarkerSetTemplate {
    pub fn new(markers: Vec<TemplateMarker>) -> Result<Self, AugmentError> {
        if markers.len() != MARKER_COUNT {
            return Err(AugmentError::InvalidTemplate(format!(
                "{} markers, expected {MARKER_COUNT}",
                markers.len()
            )));
        }
        let mut seen = HashSet::new();
        for m in &markers {
            if !seen.insert(m.name.as_str()) {
                return Err(AugmentError::InvalidTemplate(format!("duplicate marker {}", m.name)));
            }
            if !SEGMENTS.contains(&m.segment.as_str()) {
                return Err(AugmentError::InvalidTemplate(format!(
                    "marker {} on unknown segment {}",
                    m.name, m.segment
                )));
            }
            if !m.offset.iter().all(|v| v.is_finite()) {
                return Err(AugmentError::InvalidTemplate(format!("marker {} offset not finite", m.name)));
            }
        }
        Ok(Self { markers })
    }

    pub fn markers(&self) -> &[TemplateMarker] {
        &self.markers
    }

    pub fn names(&self) -> Vec<String> {
        self.markers.iter().map(|m| m.name.clone()).collect()
    }
}

/// Triangulated keypoints over time; `points[frame][landmark]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSequence {
    pub rate_hz: f64,
    pub frames: Vec<usize>,
    pub points: Vec<Vec<Option<WorldPoint>>>,
}

impl LandmarkSequence {
    pub fn from_results(results: &[FrameResult], rate_hz: f64) -> Self {
        Self {
            rate_hz,
            frames: results.iter().map(|r| r.frame_index).collect(),
            points: results.iter().map(|r| r.points.iter().map(|p| p.xyz).collect()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Applies a rigid transform to every present point.
    pub fn transformed(&self, g: &Isometry3<f64>) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|f| f.iter().map(|p| p.map(|p| g * p)).collect())
                .collect(),
            ..self.clone()
        }
    }
}

/// Frame with the `primary` axis along `p`, the `secondary` axis in the
/// plane of `p` and `s`, completed right-handed.
fn frame_from(
    segment: &str,
    origin: WorldPoint,
    primary: (usize, Vector3<f64>),
    secondary: (usize, Vector3<f64>),
) -> Result<Isometry3<f64>, AugmentError> {
    let degenerate = || AugmentError::DegenerateFrame {
        segment: segment.to_string(),
    };
    let a = primary.1.try_normalize(1e-9).ok_or_else(degenerate)?;
    let b = (secondary.1 - a * a.dot(&secondary.1)).try_normalize(1e-9).ok_or_else(degenerate)?;
    let mut axes = [Vector3::zeros(); 3];
    axes[primary.0] = a;
    axes[secondary.0] = b;
    let third = 3 - primary.0 - secondary.0;
    // e_{k+2} = e_k x e_{k+1} cyclically
    axes[third] = if (secondary.0 + 1) % 3 == third {
        a.cross(&b)
    } else {
        b.cross(&a)
    };
    let r = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&axes));
    Ok(Isometry3::from_parts(
        Translation3::from(origin.coords),
        UnitQuaternion::from_rotation_matrix(&r),
    ))
}

const X: usize = 0;
const Y: usize = 1;
const Z: usize = 2;

struct Lookup<'a> {
    points: &'a [Option<WorldPoint>],
    segment: &'static str,
}

impl Lookup<'_> {
    fn get(&self, l: Landmark) -> Result<WorldPoint, AugmentError> {
        self.points
            .get(l.index())
            .copied()
            .flatten()
            .filter(|p| p.coords.iter().all(|c| c.is_finite()))
            .ok_or_else(|| AugmentError::MissingDefiningLandmark {
                segment: self.segment.to_string(),
                landmark: l.name().to_string(),
            })
    }
}

fn mid(a: WorldPoint, b: WorldPoint) -> WorldPoint {
    nalgebra::center(&a, &b)
}

fn build_frame(segment: &'static str, points: &[Option<WorldPoint>]) -> Result<Isometry3<f64>, AugmentError> {
    use Landmark::*;
    let lk = Lookup { points, segment };
    let side = |r: Landmark, l: Landmark| if segment.ends_with("_r") { r } else { l };
    match segment {
        "pelvis" | "torso" => {
            let (lh, rh) = (lk.get(LHip)?, lk.get(RHip)?);
            let (ls, rs) = (lk.get(LShoulder)?, lk.get(RShoulder)?);
            let (mh, ms) = (mid(lh, rh), mid(ls, rs));
            if segment == "pelvis" {
                frame_from(segment, mh, (Y, lh - rh), (Z, ms - mh))
            } else {
                frame_from(segment, ms, (Y, ls - rs), (Z, ms - mh))
            }
        }
        "head" => {
            let neck = lk.get(UpperNeck)?;
            frame_from(segment, neck, (Z, lk.get(HeadTop)? - neck), (X, lk.get(Nose)? - neck))
        }
        "thigh_r" | "thigh_l" | "shank_r" | "shank_l" => {
            let hip = lk.get(side(RHip, LHip))?;
            let knee = lk.get(side(RKnee, LKnee))?;
            let ankle = lk.get(side(RAnkle, LAnkle))?;
            let heel = lk.get(side(RHeel, LHeel))?;
            let toes = mid(lk.get(side(RBigToe, LBigToe))?, lk.get(side(RSmallToe, LSmallToe))?);
            // knee and ankle hinges share the lateral axis
            let lateral = (knee - ankle).cross(&(toes - heel));
            if segment.starts_with("thigh") {
                frame_from(segment, hip, (Z, hip - knee), (Y, lateral))
            } else {
                frame_from(segment, knee, (Z, knee - ankle), (Y, lateral))
            }
        }
        "foot_r" | "foot_l" => {
            let ankle = lk.get(side(RAnkle, LAnkle))?;
            let heel = lk.get(side(RHeel, LHeel))?;
            let big = lk.get(side(RBigToe, LBigToe))?;
            let small = lk.get(side(RSmallToe, LSmallToe))?;
            let toward_left = if segment == "foot_r" { big - small } else { small - big };
            frame_from(segment, ankle, (X, mid(big, small) - heel), (Y, toward_left))
        }
        "humerus_r" | "humerus_l" | "forearm_r" | "forearm_l" => {
            let shoulder = lk.get(side(RShoulder, LShoulder))?;
            let elbow = lk.get(side(RElbow, LElbow))?;
            let wrist = lk.get(side(RWrist, LWrist))?;
            let upper = shoulder - elbow;
            let fore = wrist - elbow;
            let mut hinge = upper.cross(&fore);
            if hinge.norm() < STRAIGHT_ARM_SINE * upper.norm() * fore.norm() {
                hinge = lk.get(LShoulder)? - lk.get(RShoulder)?;
            }
            if segment.starts_with("humerus") {
                frame_from(segment, shoulder, (Z, upper), (Y, hinge))
            } else {
                frame_from(segment, elbow, (Z, -fore), (Y, hinge))
            }
        }
        _ => unreachable!("segment list is fixed"),
    }
}

/// Keypoint-derived frame of every marker-carrying segment. Segments whose
/// defining keypoints are missing map to an error.
pub fn segment_frames(points: &[Option<WorldPoint>]) -> BTreeMap<&'static str, Result<Isometry3<f64>, AugmentError>> {
    SEGMENTS.iter().map(|s| (*s, build_frame(s, points))).collect()
}

fn place_markers(points: &[Option<WorldPoint>], template: &MarkerSetTemplate) -> Vec<Option<WorldPoint>> {
    let frames = segment_frames(points);
    template
        .markers
        .iter()
        .map(|m| match frames.get(m.segment.as_str()) {
            Some(Ok(f)) => Some(f * WorldPoint::from(m.offset)),
            _ => None,
        })
        .collect()
}

fn to_trajectories(
    names: &[String],
    seq: &LandmarkSequence,
    per_frame: Vec<Vec<Option<WorldPoint>>>,
) -> Vec<MarkerTrajectory> {
    names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let positions = per_frame
                .iter()
                .map(|f| f[k].map(|p| p.coords).unwrap_or(Vector3::repeat(f64::NAN)))
                .collect();
            let gap_mask = per_frame.iter().map(|f| f[k].is_none()).collect();
            MarkerTrajectory {
                marker_id: name.clone(),
                frames: seq.frames.clone(),
                positions,
                gap_mask,
                rate_hz: seq.rate_hz,
            }
        })
        .collect()
}

/// Rigid-offset augmentation: each marker follows its segment frame. Frames
/// where a segment cannot be built leave that segment's markers as gaps.
pub fn augment_baseline(seq: &LandmarkSequence, template: &MarkerSetTemplate) -> Vec<MarkerTrajectory> {
    let per_frame: Vec<Vec<Option<WorldPoint>>> =
        seq.points.par_iter().map(|f| place_markers(f, template)).collect();
    to_trajectories(&template.names(), seq, per_frame)
}

/// Per-frame marker prediction from a window of keypoints.
///
/// The window holds the 21 augmentation keypoints of the current frame and
/// the `window() - 1` frames before it, oldest first; missing values are NaN.
/// The result holds one position per template marker; non-finite entries
/// become gaps.
pub trait MarkerPredictor: Send + Sync {
    fn window(&self) -> usize;

    /// Calls must be serialized when true.
    fn single_threaded(&self) -> bool {
        false
    }

    fn predict(&self, window: &[[[f64; 3]; 21]]) -> Result<Vec<[f64; 3]>, AugmentError>;
}

#[derive(Clone)]
pub struct ExternalModel {
    pub artifact: Option<PathBuf>,
    pub predictor: Arc<dyn MarkerPredictor>,
}

impl std::fmt::Debug for ExternalModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalModel")
            .field("artifact", &self.artifact)
            .field("window", &self.predictor.window())
            .finish()
    }
}

#[derive(Debug, Clone)]
pub enum Augmenter {
    BaselineRigid,
    External(ExternalModel),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AugmenterKind {
    #[default]
    BaselineRigid,
    ExternalModel,
}

impl Augmenter {
    pub fn kind(&self) -> AugmenterKind {
        match self {
            Augmenter::BaselineRigid => AugmenterKind::BaselineRigid,
            Augmenter::External(_) => AugmenterKind::ExternalModel,
        }
    }

    pub fn window(&self) -> usize {
        match self {
            Augmenter::BaselineRigid => 1,
            Augmenter::External(m) => m.predictor.window(),
        }
    }
}

fn model_input(seq: &LandmarkSequence, frame: usize, window: usize) -> Vec<[[f64; 3]; 21]> {
    (frame + 1 - window..=frame)
        .map(|i| {
            let mut out = [[f64::NAN; 3]; 21];
            for (k, l) in Landmark::AUGMENTATION_SET.iter().enumerate() {
                if let Some(p) = seq.points[i].get(l.index()).copied().flatten() {
                    out[k] = [p.x, p.y, p.z];
                }
            }
            out
        })
        .collect()
}

/// Runs the configured augmenter. Every output has one trajectory per
/// template marker in template order, with one sample per input frame.
///
/// A windowed model sees the first frame repeated until enough history has
/// accumulated.
pub fn augment(
    seq: &LandmarkSequence,
    augmenter: &Augmenter,
    template: &MarkerSetTemplate,
) -> Result<Vec<MarkerTrajectory>, AugmentError> {
    let model = match augmenter {
        Augmenter::BaselineRigid => return Ok(augment_baseline(seq, template)),
        Augmenter::External(m) => m,
    };
    if let Some(path) = &model.artifact {
        if !path.exists() {
            return Err(AugmentError::ModelArtifactMissing(path.clone()));
        }
    }
    let window = model.predictor.window().max(1);
    if seq.len() < window {
        return Err(AugmentError::WindowTooLong { window, len: seq.len() });
    }
    for (k, f) in seq.points.iter().enumerate() {
        if f.len() != LANDMARK_COUNT {
            return Err(AugmentError::External(format!("frame {k} has {} keypoints", f.len())));
        }
    }
    let predict = |i: usize| -> Result<Vec<Option<WorldPoint>>, AugmentError> {
        let start = i.max(window - 1);
        let mut input = model_input(seq, start, window);
        if i < window - 1 {
            // pad the history with the first frame
            let first = input[0];
            input = vec![first; window - 1 - i];
            input.extend(model_input(seq, i, i + 1));
        }
        let out = model.predictor.predict(&input)?;
        if out.len() != template.markers.len() {
            return Err(AugmentError::External(format!(
                "model returned {} markers, template has {}",
                out.len(),
                template.markers.len()
            )));
        }
        Ok(out
            .iter()
            .map(|p| p.iter().all(|c| c.is_finite()).then(|| WorldPoint::new(p[0], p[1], p[2])))
            .collect())
    };
    let per_frame: Vec<Vec<Option<WorldPoint>>> = if model.predictor.single_threaded() {
        (0..seq.len()).map(predict).collect::<Result<_, _>>()?
    } else {
        (0..seq.len()).into_par_iter().map(predict).collect::<Result<_, _>>()?
    };
    Ok(to_trajectories(&template.names(), seq, per_frame))
}

#[derive(Serialize)]
struct PredictRequest<'a> {
    window: &'a [Vec<[Option<f64>; 3]>],
}

#[derive(Deserialize)]
struct PredictResponse {
    markers: Vec<[Option<f64>; 3]>,
}

/// Predictor backed by a child process speaking JSON lines: one request
/// `{"window": [...]}` per line on stdin, one `{"markers": [...]}` per line
/// on stdout. Null coordinates are gaps.
pub struct ProcessPredictor {
    window: usize,
    io: Mutex<(Child, ChildStdin, BufReader<ChildStdout>)>,
}

impl ProcessPredictor {
    pub fn spawn(program: &str, args: &[String], window: usize) -> Result<Self, AugmentError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| AugmentError::External(format!("cannot start {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            window,
            io: Mutex::new((child, stdin, stdout)),
        })
    }
}

impl Drop for ProcessPredictor {
    fn drop(&mut self) {
        if let Ok(mut io) = self.io.lock() {
            let _ = io.0.kill();
            let _ = io.0.wait();
        }
    }
}

impl MarkerPredictor for ProcessPredictor {
    fn window(&self) -> usize {
        self.window
    }

    fn single_threaded(&self) -> bool {
        true
    }

    fn predict(&self, window: &[[[f64; 3]; 21]]) -> Result<Vec<[f64; 3]>, AugmentError> {
        let err = |e: String| AugmentError::External(e);
        let mut io = self.io.lock().map_err(|_| err("predictor lock poisoned".into()))?;
        // NaN is not valid JSON; send gaps as null
        let request: Vec<Vec<[Option<f64>; 3]>> = window
            .iter()
            .map(|f| f.iter().map(|p| p.map(|c| c.is_finite().then_some(c))).collect())
            .collect();
        let line = serde_json::to_string(&PredictRequest { window: &request }).map_err(|e| err(e.to_string()))?;
        writeln!(io.1, "{line}").map_err(|e| err(e.to_string()))?;
        io.1.flush().map_err(|e| err(e.to_string()))?;
        let mut reply = String::new();
        io.2.read_line(&mut reply).map_err(|e| err(e.to_string()))?;
        if reply.is_empty() {
            return Err(err("model process closed its output".into()));
        }
        let parsed: PredictResponse = serde_json::from_str(&reply).map_err(|e| err(e.to_string()))?;
        Ok(parsed
            .markers
            .into_iter()
            .map(|p| p.map(|c| c.unwrap_or(f64::NAN)))
            .collect())
    }
}
