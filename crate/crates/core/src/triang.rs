//! Confidence-weighted multi-view DLT triangulation with confidence and
//! reprojection gating.

use nalgebra::{DMatrix, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::landmarks::LANDMARK_COUNT;
use crate::rig::{CameraModel, PixelPoint, Rig, RigError, WorldPoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TriangError {
    #[error("observations mix landmark ids {0} and {1}")]
    InconsistentLandmark(usize, usize),
    #[error("landmark id {0} is outside the keypoint layout")]
    UnknownLandmark(usize),
    #[error("homogeneous solution has vanishing scale")]
    NumericalDegeneracy,
    #[error("frames are not synchronized: indices {0} and {1}")]
    FrameIndexMismatch(usize, usize),
    #[error("exclusion statistics need at least one frame")]
    EmptySequence,
    #[error("invalid gate configuration: {0}")]
    InvalidGates(String),
    #[error(transparent)]
    Rig(#[from] RigError),
}

/// One 2D detection of a landmark in one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub camera_id: String,
    pub landmark_id: usize,
    pub pixel: PixelPoint,
}

/// All landmark detections of one camera at one frame. Slots without a
/// detection are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointFrame {
    pub camera_id: String,
    pub frame_index: usize,
    pub landmarks: Vec<Option<PixelPoint>>,
}

impl KeypointFrame {
    pub fn empty(camera_id: impl Into<String>, frame_index: usize) -> Self {
        Self {
            camera_id: camera_id.into(),
            frame_index,
            landmarks: vec![None; LANDMARK_COUNT],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.landmarks.iter().all(Option::is_none)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointStatus {
    Accepted,
    ExcludedLowConfidence,
    ExcludedReprojection,
    InsufficientViews,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewError {
    pub camera_id: String,
    pub error_px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangulatedPoint {
    /// `None` unless the point was accepted.
    pub xyz: Option<WorldPoint>,
    pub confidence: f64,
    pub reprojection_errors: Vec<ViewError>,
    pub status: PointStatus,
}

impl TriangulatedPoint {
    fn rejected(status: PointStatus, confidence: f64, reprojection_errors: Vec<ViewError>) -> Self {
        Self {
            xyz: None,
            confidence,
            reprojection_errors,
            status,
        }
    }

    pub fn is_accepted(&self) -> bool {
        self.status == PointStatus::Accepted
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GatePreset {
    #[default]
    Standard,
    Validation,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub confidence_min: f64,
    pub reprojection_max: f64,
    pub min_views: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self::standard()
    }
}

impl GateConfig {
    pub fn new(confidence_min: f64, reprojection_max: f64, min_views: usize) -> Result<Self, TriangError> {
        if !(confidence_min > 0.0 && confidence_min <= 1.0) {
            return Err(TriangError::InvalidGates(format!(
                "confidence_min {confidence_min} outside (0, 1]"
            )));
        }
        if !(reprojection_max > 0.0) {
            return Err(TriangError::InvalidGates(format!(
                "reprojection_max {reprojection_max} must be positive"
            )));
        }
        if min_views < 2 {
            return Err(TriangError::InvalidGates(format!("min_views {min_views} below 2")));
        }
        Ok(Self {
            confidence_min,
            reprojection_max,
            min_views,
        })
    }

    /// 0.6 confidence, 8 px reprojection.
    pub fn standard() -> Self {
        Self {
            confidence_min: 0.6,
            reprojection_max: 8.0,
            min_views: 2,
        }
    }

    /// 0.55 confidence, 10 px reprojection.
    pub fn validation() -> Self {
        Self {
            confidence_min: 0.55,
            reprojection_max: 10.0,
            min_views: 2,
        }
    }

    pub fn preset(preset: GatePreset) -> Option<Self> {
        match preset {
            GatePreset::Standard => Some(Self::standard()),
            GatePreset::Validation => Some(Self::validation()),
            GatePreset::Custom => None,
        }
    }
}

struct View<'a> {
    camera: &'a CameraModel,
    observed: PixelPoint,
    /// distortion-free pixel used in the linear system
    ideal: Vector2<f64>,
}

/// Solves the stacked system `c (X A3 - A1) K = 0`, `c (Y A3 - A2) K = 0`.
fn solve_weighted(views: &[View<'_>]) -> Result<WorldPoint, TriangError> {
    let mut m = DMatrix::<f64>::zeros(2 * views.len(), 4);
    for (i, v) in views.iter().enumerate() {
        let a = v.camera.projection_matrix();
        let a = a.matrix();
        let c = v.observed.confidence;
        for j in 0..4 {
            m[(2 * i, j)] = c * (a[(0, j)] - v.ideal.x * a[(2, j)]);
            m[(2 * i + 1, j)] = c * (a[(1, j)] - v.ideal.y * a[(2, j)]);
        }
    }
    // the 4x4 normal matrix shares right singular vectors with m but keeps
    // the decomposition square when only two views remain
    let svd = if m.nrows() >= 4 {
        m.svd(false, true)
    } else {
        (m.transpose() * &m).svd(false, true)
    };
    let v_t = svd.v_t.ok_or(TriangError::NumericalDegeneracy)?;
    let s = svd.singular_values.as_slice();
    let imin = (0..s.len()).min_by(|a, b| s[*a].total_cmp(&s[*b])).unwrap();
    let y = v_t.row(imin);
    if y[3].abs() < 1e-12 {
        return Err(TriangError::NumericalDegeneracy);
    }
    Ok(WorldPoint::new(y[0] / y[3], y[1] / y[3], y[2] / y[3]))
}

fn view_errors(point: &WorldPoint, views: &[View<'_>]) -> Vec<ViewError> {
    views
        .iter()
        .map(|v| ViewError {
            camera_id: v.camera.id().to_string(),
            error_px: crate::rig::reprojection_error(v.camera, point, &v.observed).unwrap_or(f64::INFINITY),
        })
        .collect()
}

fn mean_confidence(views: &[View<'_>]) -> f64 {
    if views.is_empty() {
        0.0
    } else {
        views.iter().map(|v| v.observed.confidence).sum::<f64>() / views.len() as f64
    }
}

/// Triangulates one landmark from its observations.
///
/// Observations below `confidence_min` are dropped. The survivors are solved
/// jointly; while any view reprojects beyond `reprojection_max`, the worst
/// view is removed and the system re-solved.
pub fn triangulate(
    observations: &[Observation],
    rig: &Rig,
    gates: &GateConfig,
) -> Result<TriangulatedPoint, TriangError> {
    if let Some(first) = observations.first() {
        if first.landmark_id >= LANDMARK_COUNT {
            return Err(TriangError::UnknownLandmark(first.landmark_id));
        }
        if let Some(other) = observations.iter().find(|o| o.landmark_id != first.landmark_id) {
            return Err(TriangError::InconsistentLandmark(first.landmark_id, other.landmark_id));
        }
    }
    let mut views = Vec::with_capacity(observations.len());
    let mut dropped_for_confidence = 0;
    for obs in observations {
        let camera = rig.camera(&obs.camera_id)?;
        if obs.pixel.confidence < gates.confidence_min || !obs.pixel.is_valid() {
            dropped_for_confidence += 1;
            continue;
        }
        views.push(View {
            camera,
            observed: obs.pixel,
            ideal: camera.undistort_pixel(obs.pixel.uv),
        });
    }
    if views.len() < gates.min_views {
        let status = if views.is_empty() || dropped_for_confidence == 0 {
            PointStatus::InsufficientViews
        } else {
            PointStatus::ExcludedLowConfidence
        };
        return Ok(TriangulatedPoint::rejected(status, mean_confidence(&views), Vec::new()));
    }

    loop {
        let point = solve_weighted(&views)?;
        let errors = view_errors(&point, &views);
        let (worst, worst_err) = errors
            .iter()
            .enumerate()
            .map(|(i, e)| (i, e.error_px))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("at least min_views views");
        if worst_err <= gates.reprojection_max {
            return Ok(TriangulatedPoint {
                xyz: Some(point),
                confidence: mean_confidence(&views),
                reprojection_errors: errors,
                status: PointStatus::Accepted,
            });
        }
        if views.len() - 1 < gates.min_views {
            return Ok(TriangulatedPoint::rejected(
                PointStatus::ExcludedReprojection,
                mean_confidence(&views),
                errors,
            ));
        }
        views.remove(worst);
    }
}

/// Triangulation of every landmark slot at one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame_index: usize,
    pub points: Vec<TriangulatedPoint>,
}

impl FrameResult {
    pub fn accepted_count(&self) -> usize {
        self.points.iter().filter(|p| p.is_accepted()).count()
    }
}

/// Triangulates all landmarks of one synchronized frame.
pub fn triangulate_frame(
    frames: &[KeypointFrame],
    rig: &Rig,
    gates: &GateConfig,
) -> Result<FrameResult, TriangError> {
    let frame_index = frames.first().map(|f| f.frame_index).unwrap_or(0);
    if let Some(other) = frames.iter().find(|f| f.frame_index != frame_index) {
        return Err(TriangError::FrameIndexMismatch(frame_index, other.frame_index));
    }
    let mut points = Vec::with_capacity(LANDMARK_COUNT);
    for landmark_id in 0..LANDMARK_COUNT {
        let observations: Vec<Observation> = frames
            .iter()
            .filter_map(|f| {
                f.landmarks.get(landmark_id).copied().flatten().map(|pixel| Observation {
                    camera_id: f.camera_id.clone(),
                    landmark_id,
                    pixel,
                })
            })
            .collect();
        points.push(triangulate(&observations, rig, gates)?);
    }
    Ok(FrameResult { frame_index, points })
}

/// Triangulates a sequence of synchronized frame sets. Frames are processed
/// in parallel on the current rayon pool; output order matches input order.
pub fn triangulate_sequence(
    frames: &[Vec<KeypointFrame>],
    rig: &Rig,
    gates: &GateConfig,
) -> Result<Vec<FrameResult>, TriangError> {
    frames
        .par_iter()
        .map(|set| triangulate_frame(set, rig, gates))
        .collect()
}

/// Exclusion and reprojection statistics of a triangulated sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExclusionSummary {
    pub task: String,
    pub frames: usize,
    pub landmark_slots: usize,
    pub excluded: usize,
    /// excluded markers as a percentage of all landmark slots
    pub excluded_percent: f64,
    /// mean absolute reprojection error over accepted points, pixels
    pub mean_reprojection_px: f64,
    /// population standard deviation of the same errors, pixels
    pub std_reprojection_px: f64,
}

impl ExclusionSummary {
    /// One row in the layout `task | excluded % | mean px | std px`.
    pub fn table_row(&self) -> String {
        format!(
            "{} | {:.3} | {:.1} px | {:.1} px",
            self.task, self.excluded_percent, self.mean_reprojection_px, self.std_reprojection_px
        )
    }
}

pub fn exclusion_stats(task: &str, sequence: &[FrameResult]) -> Result<ExclusionSummary, TriangError> {
    if sequence.is_empty() {
        return Err(TriangError::EmptySequence);
    }
    let landmark_slots: usize = sequence.iter().map(|f| f.points.len()).sum();
    let excluded: usize = sequence
        .iter()
        .map(|f| f.points.len() - f.accepted_count())
        .sum();
    let errors: Vec<f64> = sequence
        .iter()
        .flat_map(|f| f.points.iter())
        .filter(|p| p.is_accepted())
        .flat_map(|p| p.reprojection_errors.iter().map(|e| e.error_px))
        .collect();
    let (mean, std) = if errors.is_empty() {
        (0.0, 0.0)
    } else {
        let n = errors.len() as f64;
        let mean = errors.iter().sum::<f64>() / n;
        let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    Ok(ExclusionSummary {
        task: task.to_string(),
        frames: sequence.len(),
        landmark_slots,
        excluded,
        excluded_percent: if landmark_slots == 0 {
            0.0
        } else {
            100.0 * excluded as f64 / landmark_slots as f64
        },
        mean_reprojection_px: mean,
        std_reprojection_px: std,
    })
}
