//! Synthetic ground truth: a parametric humanoid, scripted motions, a
//! four-camera rig, noisy keypoint detections and a T-pose body mesh.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::{PI, TAU};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anthro::{AnthroError, BodyMesh, BODY_DENSITY};
use crate::augment::{segment_frames, MarkerSetTemplate, TemplateMarker};
use crate::kin::{AngleDefinition, Coordinate, Joint, KinError, Segment, SkeletonModel, VirtualMarker};
use crate::landmarks::{Landmark, LANDMARK_COUNT};
use crate::rig::{CameraModel, Distortion, PixelPoint, Rig, RigError, WorldPoint};
use crate::triang::KeypointFrame;

pub const DEFAULT_RATE_HZ: f64 = 30.0;
pub const DEFAULT_DURATION_S: f64 = 10.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("landmark {landmark} leaves camera {camera} at frame {frame}")]
    SubjectOutOfView {
        frame: usize,
        landmark: String,
        camera: String,
    },
    #[error("invalid script: {0}")]
    InvalidScript(String),
    #[error("invalid noise spec: {0}")]
    InvalidNoise(String),
    #[error(transparent)]
    Kin(#[from] KinError),
    #[error(transparent)]
    Rig(#[from] RigError),
    #[error(transparent)]
    Anthro(#[from] AnthroError),
}

// ---------------------------------------------------------------------------
// skeleton

const PELVIS_HEIGHT: f64 = 0.93;
const HIP_HALF_WIDTH: f64 = 0.09;
const THIGH: f64 = 0.42;
const SHANK: f64 = 0.43;
const HUMERUS: f64 = 0.30;
const FOREARM: f64 = 0.26;

fn coord(name: &str, min: f64, max: f64) -> Coordinate {
    Coordinate {
        name: name.into(),
        min,
        max,
    }
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

fn v(x: f64, y: f64, z: f64) -> Vector3<f64> {
    Vector3::new(x, y, z)
}

fn coordinates() -> Vec<Coordinate> {
    let mut c = vec![
        coord("pelvis_tx", -3.0, 3.0),
        coord("pelvis_ty", -3.0, 3.0),
        coord("pelvis_tz", -1.0, 1.0),
        coord("pelvis_rotation", -PI, PI),
        coord("pelvis_list", -0.8, 0.8),
        coord("pelvis_tilt", -0.6, 1.4),
        coord("lumbar_flexion", -0.5, 0.9),
        coord("lumbar_bending", -0.5, 0.5),
        coord("lumbar_rotation", -0.5, 0.5),
        coord("neck_flexion", -0.6, 0.8),
        coord("neck_bending", -0.5, 0.5),
        coord("neck_rotation", -0.8, 0.8),
    ];
    for s in ["r", "l"] {
        c.extend([
            coord(&format!("hip_flexion_{s}"), -0.5, 2.0),
            coord(&format!("hip_adduction_{s}"), -0.5, 0.4),
            coord(&format!("hip_rotation_{s}"), -0.7, 0.7),
            coord(&format!("knee_angle_{s}"), 0.0, 2.4),
            coord(&format!("ankle_angle_{s}"), -0.7, 0.5),
        ]);
    }
    for s in ["r", "l"] {
        c.extend([
            coord(&format!("shoulder_flexion_{s}"), -0.9, 2.6),
            coord(&format!("shoulder_abduction_{s}"), -0.3, 1.4),
            coord(&format!("shoulder_rotation_{s}"), -1.2, 1.2),
            coord(&format!("elbow_flexion_{s}"), 0.0, 2.6),
        ]);
    }
    c
}

fn segments() -> Vec<Segment> {
    let seg = |name: &str, parent: Option<&str>, offset: Vector3<f64>, joint: Joint, coords: Vec<String>| Segment {
        name: name.into(),
        parent: parent.map(String::from),
        offset,
        joint,
        coordinates: coords,
    };
    let mut out = vec![
        seg(
            "pelvis",
            None,
            v(0.0, 0.0, PELVIS_HEIGHT),
            Joint::Free {
                axes: [Vector3::z(), Vector3::x(), Vector3::y()],
            },
            names(&[
                "pelvis_tx",
                "pelvis_ty",
                "pelvis_tz",
                "pelvis_rotation",
                "pelvis_list",
                "pelvis_tilt",
            ]),
        ),
        seg(
            "torso",
            Some("pelvis"),
            v(0.0, 0.0, 0.10),
            Joint::Gimbal {
                axes: [Vector3::y(), Vector3::x(), Vector3::z()],
            },
            names(&["lumbar_flexion", "lumbar_bending", "lumbar_rotation"]),
        ),
        seg(
            "head",
            Some("torso"),
            v(0.0, 0.0, 0.48),
            Joint::Gimbal {
                axes: [Vector3::y(), Vector3::x(), Vector3::z()],
            },
            names(&["neck_flexion", "neck_bending", "neck_rotation"]),
        ),
    ];
    for (s, side) in [("r", -1.0), ("l", 1.0)] {
        // adduction and internal rotation mirror between sides
        out.extend([
            seg(
                &format!("thigh_{s}"),
                Some("pelvis"),
                v(0.0, side * HIP_HALF_WIDTH, 0.0),
                Joint::Gimbal {
                    axes: [-Vector3::y(), Vector3::x() * -side, Vector3::z() * -side],
                },
                names(&[
                    &format!("hip_flexion_{s}"),
                    &format!("hip_adduction_{s}"),
                    &format!("hip_rotation_{s}"),
                ]),
            ),
            seg(
                &format!("shank_{s}"),
                Some(&format!("thigh_{s}")),
                v(0.0, 0.0, -THIGH),
                Joint::Hinge { axis: Vector3::y() },
                names(&[&format!("knee_angle_{s}")]),
            ),
            seg(
                &format!("foot_{s}"),
                Some(&format!("shank_{s}")),
                v(0.0, 0.0, -SHANK),
                Joint::Hinge { axis: -Vector3::y() },
                names(&[&format!("ankle_angle_{s}")]),
            ),
        ]);
    }
    for (s, side) in [("r", -1.0), ("l", 1.0)] {
        out.extend([
            seg(
                &format!("humerus_{s}"),
                Some("torso"),
                v(0.0, side * 0.18, 0.40),
                Joint::Gimbal {
                    axes: [-Vector3::y(), Vector3::x() * side, Vector3::z() * -side],
                },
                names(&[
                    &format!("shoulder_flexion_{s}"),
                    &format!("shoulder_abduction_{s}"),
                    &format!("shoulder_rotation_{s}"),
                ]),
            ),
            seg(
                &format!("forearm_{s}"),
                Some(&format!("humerus_{s}")),
                v(0.0, 0.0, -HUMERUS),
                Joint::Hinge { axis: -Vector3::y() },
                names(&[&format!("elbow_flexion_{s}")]),
            ),
        ]);
    }
    out
}

fn marker(name: &str, segment: &str, offset: Vector3<f64>) -> VirtualMarker {
    VirtualMarker {
        name: name.into(),
        segment: segment.into(),
        offset,
    }
}

fn markers() -> Vec<VirtualMarker> {
    let mut m = vec![
        marker("LFHD", "head", v(0.09, 0.06, 0.12)),
        marker("RFHD", "head", v(0.09, -0.06, 0.12)),
        marker("LBHD", "head", v(-0.08, 0.06, 0.12)),
        marker("RBHD", "head", v(-0.08, -0.06, 0.12)),
        marker("C7", "torso", v(-0.07, 0.0, 0.46)),
        marker("T10", "torso", v(-0.11, 0.0, 0.20)),
        marker("CLAV", "torso", v(0.07, 0.0, 0.42)),
        marker("STRN", "torso", v(0.11, 0.0, 0.28)),
        marker("RBAK", "torso", v(-0.10, -0.10, 0.32)),
        marker("LBAK", "torso", v(-0.10, 0.08, 0.30)),
        marker("LSHO", "torso", v(0.0, 0.19, 0.45)),
        marker("RSHO", "torso", v(0.0, -0.19, 0.45)),
        marker("LASI", "pelvis", v(0.10, 0.12, 0.08)),
        marker("RASI", "pelvis", v(0.10, -0.12, 0.08)),
        marker("LPSI", "pelvis", v(-0.10, 0.05, 0.10)),
        marker("RPSI", "pelvis", v(-0.10, -0.05, 0.10)),
        marker("SACR", "pelvis", v(-0.11, 0.0, 0.06)),
    ];
    for (s, p, side) in [("r", "R", -1.0), ("l", "L", 1.0)] {
        let thigh = format!("thigh_{s}");
        let shank = format!("shank_{s}");
        let foot = format!("foot_{s}");
        m.extend([
            marker(&format!("{p}THI"), &thigh, v(0.0, side * 0.08, -0.20)),
            marker(&format!("{p}THIA"), &thigh, v(0.07, side * 0.02, -0.25)),
            marker(&format!("{p}KNE"), &thigh, v(0.0, side * 0.05, -THIGH)),
            marker(&format!("{p}KNM"), &thigh, v(0.0, -side * 0.05, -THIGH)),
            marker(&format!("{p}TIB"), &shank, v(0.0, side * 0.06, -0.20)),
            marker(&format!("{p}TIBA"), &shank, v(0.06, side * 0.01, -0.15)),
            marker(&format!("{p}ANK"), &shank, v(0.0, side * 0.04, -SHANK)),
            marker(&format!("{p}ANKM"), &shank, v(0.0, -side * 0.04, -SHANK)),
            marker(&format!("{p}HEE"), &foot, v(-0.06, 0.0, -0.05)),
            marker(&format!("{p}TOE"), &foot, v(0.16, 0.0, -0.06)),
            marker(&format!("{p}MT5"), &foot, v(0.10, side * 0.045, -0.07)),
            marker(&format!("{p}MT1"), &foot, v(0.11, -side * 0.035, -0.07)),
        ]);
    }
    for (s, p, side) in [("r", "R", -1.0), ("l", "L", 1.0)] {
        let humerus = format!("humerus_{s}");
        let forearm = format!("forearm_{s}");
        m.extend([
            marker(&format!("{p}UPA"), &humerus, v(0.0, side * 0.05, -0.15)),
            marker(&format!("{p}UPAF"), &humerus, v(0.05, 0.0, -0.18)),
            marker(&format!("{p}ELB"), &humerus, v(0.0, side * 0.04, -HUMERUS)),
            marker(&format!("{p}ELBM"), &humerus, v(0.0, -side * 0.04, -HUMERUS)),
            marker(&format!("{p}FRA"), &forearm, v(0.0, side * 0.04, -0.12)),
            marker(&format!("{p}WRA"), &forearm, v(0.0, side * 0.03, -FOREARM)),
            marker(&format!("{p}WRB"), &forearm, v(0.0, -side * 0.03, -FOREARM)),
            marker(&format!("{p}FIN"), &forearm, v(0.0, 0.0, -0.33)),
        ]);
    }
    m
}

/// Keypoint attachments in detector order.
fn landmark_markers() -> Vec<VirtualMarker> {
    use Landmark::*;
    Landmark::ALL
        .iter()
        .map(|l| {
            let (seg, off): (&str, Vector3<f64>) = match l {
                Nose => ("head", v(0.10, 0.0, 0.10)),
                LEye => ("head", v(0.08, 0.035, 0.13)),
                REye => ("head", v(0.08, -0.035, 0.13)),
                LEar => ("head", v(0.0, 0.075, 0.10)),
                REar => ("head", v(0.0, -0.075, 0.10)),
                LShoulder => ("humerus_l", Vector3::zeros()),
                RShoulder => ("humerus_r", Vector3::zeros()),
                LElbow => ("forearm_l", Vector3::zeros()),
                RElbow => ("forearm_r", Vector3::zeros()),
                LWrist => ("forearm_l", v(0.0, 0.0, -FOREARM)),
                RWrist => ("forearm_r", v(0.0, 0.0, -FOREARM)),
                LHip => ("thigh_l", Vector3::zeros()),
                RHip => ("thigh_r", Vector3::zeros()),
                LKnee => ("shank_l", Vector3::zeros()),
                RKnee => ("shank_r", Vector3::zeros()),
                LAnkle => ("foot_l", Vector3::zeros()),
                RAnkle => ("foot_r", Vector3::zeros()),
                UpperNeck => ("head", Vector3::zeros()),
                HeadTop => ("head", v(0.0, 0.0, 0.24)),
                // medial is +Y on the right foot, -Y on the left
                LBigToe => ("foot_l", v(0.15, -0.025, -0.07)),
                LSmallToe => ("foot_l", v(0.13, 0.025, -0.07)),
                LHeel => ("foot_l", v(-0.05, 0.0, -0.06)),
                RBigToe => ("foot_r", v(0.15, 0.025, -0.07)),
                RSmallToe => ("foot_r", v(0.13, -0.025, -0.07)),
                RHeel => ("foot_r", v(-0.05, 0.0, -0.06)),
            };
            marker(l.name(), seg, off)
        })
        .collect()
}

fn angles() -> Vec<AngleDefinition> {
    [("hip_flexion", "hip_flexion_r"), ("knee", "knee_angle_r"), ("elbow", "elbow_flexion_r")]
        .iter()
        .map(|(n, c)| AngleDefinition {
            name: n.to_string(),
            coordinate: c.to_string(),
            sign: 1.0,
        })
        .collect()
}

/// Thirteen-segment humanoid, 30 coordinates, carrying the 57 markers.
/// Reported angles are the right hip flexion, knee and elbow.
pub fn humanoid_model() -> SkeletonModel {
    SkeletonModel::new("humanoid", coordinates(), segments(), markers(), angles()).expect("humanoid is valid")
}

/// The same skeleton carrying the 25 detector keypoints instead of markers.
pub fn keypoint_model() -> SkeletonModel {
    SkeletonModel::new("humanoid-keypoints", coordinates(), segments(), landmark_markers(), angles())
        .expect("keypoint skeleton is valid")
}

fn set(model: &SkeletonModel, q: &mut [f64], name: &str, value: f64) {
    q[model.coordinate_index(name).expect("known coordinate")] = value;
}

/// Pose used to derive template offsets: neutral with both elbows bent.
pub fn reference_pose(model: &SkeletonModel) -> Vec<f64> {
    let mut q = model.neutral();
    set(model, &mut q, "elbow_flexion_r", 0.5);
    set(model, &mut q, "elbow_flexion_l", 0.5);
    q
}

/// Template whose offsets reproduce the humanoid's markers exactly from its
/// keypoint-derived segment frames.
pub fn humanoid_template() -> MarkerSetTemplate {
    let model = humanoid_model();
    let keypoints = keypoint_model();
    let q = reference_pose(&model);
    let points: Vec<Option<WorldPoint>> = keypoints
        .forward_kinematics(&q)
        .expect("pose in bounds")
        .into_iter()
        .map(Some)
        .collect();
    let frames = segment_frames(&points);
    let world = model.forward_kinematics(&q).expect("pose in bounds");
    let markers = model
        .markers()
        .iter()
        .zip(world)
        .map(|(m, p)| {
            let frame = frames[m.segment.as_str()].as_ref().expect("reference frames are defined");
            TemplateMarker {
                name: m.name.clone(),
                segment: m.segment.clone(),
                offset: frame.inverse_transform_point(&p).coords,
            }
        })
        .collect();
    MarkerSetTemplate::new(markers).expect("template is valid")
}

// ---------------------------------------------------------------------------
// motion

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Leaning,
    Bending,
    Squatting,
    Walking,
    Custom,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Leaning => "leaning",
            Task::Bending => "bending",
            Task::Squatting => "squatting",
            Task::Walking => "walking",
            Task::Custom => "custom",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "leaning" => Ok(Task::Leaning),
            "bending" => Ok(Task::Bending),
            "squatting" | "squat" => Ok(Task::Squatting),
            "walking" | "walk" => Ok(Task::Walking),
            other => Err(SynthError::InvalidScript(format!("unknown task {other}"))),
        }
    }
}

/// Coordinate curves sampled at `rate_hz` over `duration_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionScript {
    pub task: Task,
    pub duration_s: f64,
    pub rate_hz: f64,
    samples: Option<Vec<Vec<f64>>>,
}

fn raised_cosine(t: f64, period: f64) -> f64 {
    0.5 - 0.5 * (TAU * t / period).cos()
}

impl MotionScript {
    pub fn new(task: Task, duration_s: f64, rate_hz: f64) -> Result<Self, SynthError> {
        if task == Task::Custom {
            return Err(SynthError::InvalidScript("custom scripts need samples".into()));
        }
        if !(duration_s > 0.0 && rate_hz > 0.0) {
            return Err(SynthError::InvalidScript("duration and rate must be positive".into()));
        }
        Ok(Self {
            task,
            duration_s,
            rate_hz,
            samples: None,
        })
    }

    /// Ten seconds at 30 fps.
    pub fn standard(task: Task) -> Self {
        Self::new(task, DEFAULT_DURATION_S, DEFAULT_RATE_HZ).expect("standard script")
    }

    /// Explicit per-frame coordinates, checked against the humanoid bounds.
    pub fn custom(samples: Vec<Vec<f64>>, rate_hz: f64) -> Result<Self, SynthError> {
        let model = humanoid_model();
        if samples.is_empty() || !(rate_hz > 0.0) {
            return Err(SynthError::InvalidScript("need samples and a positive rate".into()));
        }
        for (i, q) in samples.iter().enumerate() {
            if q.len() != model.dof() || !model.in_bounds(q) {
                return Err(SynthError::InvalidScript(format!("frame {i} is not an in-bounds pose")));
            }
        }
        Ok(Self {
            task: Task::Custom,
            duration_s: samples.len() as f64 / rate_hz,
            rate_hz,
            samples: Some(samples),
        })
    }

    pub fn frame_count(&self) -> usize {
        match &self.samples {
            Some(s) => s.len(),
            None => (self.duration_s * self.rate_hz).round() as usize,
        }
    }

    /// Pose at frame `i`.
    pub fn pose(&self, model: &SkeletonModel, keypoints: &SkeletonModel, i: usize) -> Vec<f64> {
        if let Some(s) = &self.samples {
            return s[i].clone();
        }
        let t = i as f64 / self.rate_hz;
        let mut q = model.neutral();
        let mut put = |name: &str, value: f64| set(model, &mut q, name, value);
        // relaxed arms; elbows stay bent well past the straight-arm limit
        for s in ["r", "l"] {
            put(&format!("shoulder_abduction_{s}"), 0.08);
            put(&format!("elbow_flexion_{s}"), 0.45);
        }
        let pin_feet = match self.task {
            Task::Leaning => {
                let list = 0.25 * (TAU * t / 5.0).sin();
                let tilt = 0.15 * raised_cosine(t, 5.0);
                put("pelvis_list", list);
                put("pelvis_tilt", tilt);
                put("hip_adduction_r", -list);
                put("hip_adduction_l", list);
                put("hip_flexion_r", tilt);
                put("hip_flexion_l", tilt);
                put("shoulder_abduction_r", 0.08 + 0.2 * raised_cosine(t, 5.0));
                put("neck_bending", -0.3 * list);
                true
            }
            Task::Bending => {
                let d = raised_cosine(t, 5.0);
                let tilt = 1.0 * d;
                put("pelvis_tilt", tilt);
                for s in ["r", "l"] {
                    put(&format!("hip_flexion_{s}"), tilt + 0.05 * d);
                    put(&format!("knee_angle_{s}"), 0.05 + 0.1 * d);
                    put(&format!("ankle_angle_{s}"), 0.05 + 0.05 * d);
                    put(&format!("shoulder_flexion_{s}"), 0.8 * tilt);
                    put(&format!("elbow_flexion_{s}"), 0.45 + 0.2 * d);
                }
                put("neck_flexion", -0.2 * d);
                true
            }
            Task::Squatting => {
                let d = raised_cosine(t, 4.0);
                let (tilt, knee, ankle) = (0.3 * d, 1.6 * d, 0.45 * d);
                put("pelvis_tilt", tilt);
                for s in ["r", "l"] {
                    // feet stay flat: tilt - hip + knee - ankle = 0
                    put(&format!("hip_flexion_{s}"), tilt + knee - ankle);
                    put(&format!("knee_angle_{s}"), knee);
                    put(&format!("ankle_angle_{s}"), ankle);
                    put(&format!("shoulder_flexion_{s}"), 1.1 * d);
                    put(&format!("elbow_flexion_{s}"), 0.45 + 0.35 * d);
                }
                true
            }
            Task::Walking => {
                let phase = TAU * t;
                for (s, offset) in [("r", 0.0), ("l", PI)] {
                    let p = phase + offset;
                    put(&format!("hip_flexion_{s}"), 0.15 + 0.35 * p.sin());
                    put(&format!("knee_angle_{s}"), 0.55 + 0.45 * (p - 1.9).sin());
                    put(&format!("ankle_angle_{s}"), 0.05 + 0.15 * (p + 0.6).sin());
                    put(&format!("shoulder_flexion_{s}"), -0.25 * p.sin());
                    put(&format!("elbow_flexion_{s}"), 0.45 + 0.15 * (p - 0.5).sin());
                }
                put("pelvis_tz", 0.015 * (2.0 * phase).sin());
                put("pelvis_tx", 0.02 * (2.0 * phase).sin());
                put("pelvis_rotation", 0.08 * phase.sin());
                put("pelvis_list", 0.04 * (2.0 * phase).sin());
                false
            }
            Task::Custom => unreachable!("custom scripts carry samples"),
        };
        if pin_feet {
            let standing = ankle_midpoint(keypoints, &model.neutral());
            let now = ankle_midpoint(keypoints, &q);
            let shift = standing - now;
            for (k, name) in ["pelvis_tx", "pelvis_ty", "pelvis_tz"].iter().enumerate() {
                let i = model.coordinate_index(name).expect("root coordinate");
                q[i] += shift[k];
            }
        }
        q
    }

    pub fn poses(&self, model: &SkeletonModel) -> Vec<Vec<f64>> {
        let keypoints = keypoint_model();
        (0..self.frame_count()).map(|i| self.pose(model, &keypoints, i)).collect()
    }
}

fn ankle_midpoint(keypoints: &SkeletonModel, q: &[f64]) -> Vector3<f64> {
    let p = keypoints.forward_kinematics(q).expect("pose in bounds");
    (p[Landmark::LAnkle.index()].coords + p[Landmark::RAnkle.index()].coords) / 2.0
}

// ---------------------------------------------------------------------------
// cameras

/// Camera placements of the capture rig.
#[derive(Debug, Clone, PartialEq)]
pub struct RigLayout {
    pub rig: Rig,
}

/// Anterior/posterior pair 3.67 m apart, each yawed 5 degrees off the line
/// joining them; lateral pair 2.45 m apart. Lenses 0.9 m high, aimed at the
/// capture-volume centre.
pub fn standard_rig() -> RigLayout {
    let size = [1920, 1080];
    let target = WorldPoint::new(0.0, 0.0, 0.9);
    let yaw = 5f64.to_radians();
    let placements = [
        ("cam_anterior", WorldPoint::new(1.835 * yaw.cos(), 1.835 * yaw.sin(), 0.9), 540.0),
        ("cam_posterior", WorldPoint::new(-1.835 * yaw.cos(), -1.835 * yaw.sin(), 0.9), 550.0),
        ("cam_left", WorldPoint::new(0.0, 1.225, 0.9), 520.0),
        ("cam_right", WorldPoint::new(0.0, -1.225, 0.9), 530.0),
    ];
    let cameras = placements
        .iter()
        .map(|(id, eye, f)| CameraModel::look_at(*id, size, *f, *eye, target, Vector3::z()).expect("valid placement"))
        .collect();
    RigLayout {
        rig: Rig::new(cameras).expect("distinct ids"),
    }
}

/// Same placements with mild radial distortion on every lens.
pub fn standard_rig_distorted() -> RigLayout {
    let cams = standard_rig()
        .rig
        .cameras()
        .iter()
        .map(|c| {
            c.clone()
                .with_distortion(Distortion::new(vec![-0.05, 0.01, 0.0, 0.0, 0.0]).expect("finite"))
                .expect("valid distortion")
        })
        .collect();
    RigLayout {
        rig: Rig::new(cams).expect("distinct ids"),
    }
}

// ---------------------------------------------------------------------------
// detections

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Gaussian pixel noise, px.
    pub pixel_sigma: f64,
    /// Probability that a keypoint is occluded in a frame.
    pub occlusion_rate: f64,
    /// Confidence range of a clean detection.
    pub visible_confidence: [f64; 2],
    /// Confidence range reported by cameras that lose an occluded keypoint.
    pub occluded_confidence: [f64; 2],
    /// Chance that one camera still sees an occluded keypoint.
    pub single_view_survival: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            pixel_sigma: 0.0,
            occlusion_rate: 0.0,
            visible_confidence: [0.7, 1.0],
            occluded_confidence: [0.05, 0.45],
            single_view_survival: 0.5,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn new(pixel_sigma: f64, occlusion_rate: f64, seed: u64) -> Result<Self, SynthError> {
        let spec = Self {
            pixel_sigma,
            occlusion_rate,
            seed,
            ..Self::default()
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let range = |r: [f64; 2]| prob(r[0]) && prob(r[1]) && r[0] <= r[1];
        if !(self.pixel_sigma >= 0.0 && self.pixel_sigma.is_finite()) {
            return Err(SynthError::InvalidNoise(format!("pixel sigma {}", self.pixel_sigma)));
        }
        if !prob(self.occlusion_rate) || !prob(self.single_view_survival) {
            return Err(SynthError::InvalidNoise("probabilities must lie in [0, 1]".into()));
        }
        if !range(self.visible_confidence) || !range(self.occluded_confidence) {
            return Err(SynthError::InvalidNoise("confidence ranges must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Everything generated for one scripted take.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub rate_hz: f64,
    pub q: Vec<Vec<f64>>,
    /// `landmarks[frame][keypoint]`, true positions.
    pub landmarks: Vec<Vec<WorldPoint>>,
    /// `markers[frame][marker]` in model order, true positions.
    pub markers: Vec<Vec<WorldPoint>>,
    pub rig: Rig,
    /// One stream per camera, rig order.
    pub keypoints: Vec<Vec<KeypointFrame>>,
    /// `occluded[frame][keypoint]`.
    pub occluded: Vec<Vec<bool>>,
    pub noise: NoiseSpec,
}

impl Dataset {
    pub fn frame_count(&self) -> usize {
        self.q.len()
    }

    /// Script angles in degrees, `[frame][angle]` in model angle order.
    pub fn true_angles(&self, model: &SkeletonModel) -> Vec<Vec<f64>> {
        self.q
            .iter()
            .map(|q| crate::kin::joint_angles(q, model).into_iter().map(|(_, v)| v).collect())
            .collect()
    }

    /// Fraction of keypoint slots flagged occluded.
    pub fn occlusion_fraction(&self) -> f64 {
        let total = self.occluded.len() * LANDMARK_COUNT;
        let hit = self.occluded.iter().flatten().filter(|o| **o).count();
        hit as f64 / total.max(1) as f64
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        // keep the draw so the stream does not depend on the range
        let _: f64 = rng.random();
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Poses the humanoid along `script`, projects its keypoints through `rig`
/// and corrupts the detections per `noise`. Deterministic in `noise.seed`.
pub fn generate(script: &MotionScript, rig: &RigLayout, noise: &NoiseSpec) -> Result<Dataset, SynthError> {
    noise.validate()?;
    let model = humanoid_model();
    let keypoint_skeleton = keypoint_model();
    let q = script.poses(&model);
    let landmarks: Vec<Vec<WorldPoint>> = q
        .iter()
        .map(|q| keypoint_skeleton.forward_kinematics(q))
        .collect::<Result<_, _>>()?;
    let markers: Vec<Vec<WorldPoint>> = q.iter().map(|q| model.forward_kinematics(q)).collect::<Result<_, _>>()?;

    let cams = rig.rig.cameras();
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let mut keypoints: Vec<Vec<KeypointFrame>> = cams
        .iter()
        .map(|_| Vec::with_capacity(q.len()))
        .collect();
    let mut occluded = Vec::with_capacity(q.len());
    for (frame, points) in landmarks.iter().enumerate() {
        let mut frames: Vec<KeypointFrame> = cams.iter().map(|c| KeypointFrame::empty(c.id(), frame)).collect();
        let mut occ = vec![false; LANDMARK_COUNT];
        for (k, p) in points.iter().enumerate() {
            let hidden = rng.random_bool(noise.occlusion_rate);
            let survivor = rng.random_bool(noise.single_view_survival);
            let survivor_cam = rng.random_range(0..cams.len());
            occ[k] = hidden;
            for (c, cam) in cams.iter().enumerate() {
                let in_front = cam.to_camera(p).z > 0.0;
                let pixel = cam.project(p).ok().filter(|px| in_front && cam.in_image(&px.uv));
                let Some(pixel) = pixel else {
                    return Err(SynthError::SubjectOutOfView {
                        frame,
                        landmark: Landmark::from_index(k).map(|l| l.name()).unwrap_or("?").into(),
                        camera: cam.id().into(),
                    });
                };
                let du = noise.pixel_sigma * gauss.sample(&mut rng);
                let dv = noise.pixel_sigma * gauss.sample(&mut rng);
                let clean = uniform(&mut rng, noise.visible_confidence);
                let lost = uniform(&mut rng, noise.occluded_confidence);
                let confidence = if hidden && !(survivor && survivor_cam == c) {
                    lost
                } else {
                    clean
                };
                frames[c].landmarks[k] = Some(PixelPoint::new(pixel.u() + du, pixel.v() + dv, confidence));
            }
        }
        for (stream, f) in keypoints.iter_mut().zip(frames) {
            stream.push(f);
        }
        occluded.push(occ);
    }
    Ok(Dataset {
        task: script.task,
        rate_hz: script.rate_hz,
        q,
        landmarks,
        markers,
        rig: rig.rig.clone(),
        keypoints,
        occluded,
        noise: noise.clone(),
    })
}

// ---------------------------------------------------------------------------
// body mesh

/// Cross-section of a tube at distance `s` along its axis, with semi-axes
/// `a` (toward the tube's reference direction) and `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ring {
    pub s: f64,
    pub a: f64,
    pub b: f64,
}

const fn ring(s: f64, a: f64, b: f64) -> Ring {
    Ring { s, a, b }
}

/// Dimensions of the T-pose body. Heights in meters above the floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyDims {
    pub stature: f64,
    /// From the crotch plane upward; `a` front-back, `b` side to side.
    pub torso: Vec<Ring>,
    pub torso_base: f64,
    pub neck: Vec<Ring>,
    /// Head ellipsoid semi-axes: front-back, side to side, vertical.
    pub head: [f64; 3],
    pub temple_height: f64,
    /// From the sole upward; circular.
    pub leg: Vec<Ring>,
    pub leg_half_spacing: f64,
    /// From the shoulder outward; circular.
    pub arm: Vec<Ring>,
    pub arm_start: f64,
    pub arm_height: f64,
    pub sides: usize,
    pub head_rings: usize,
}

impl Default for BodyDims {
    fn default() -> Self {
        Self {
            stature: 1.75,
            torso_base: 0.90,
            torso: vec![
                ring(0.0, 0.115, 0.175),
                ring(0.10, 0.105, 0.160),
                ring(0.30, 0.120, 0.175),
                ring(0.50, 0.100, 0.175),
                ring(0.55, 0.070, 0.125),
            ],
            neck: vec![ring(0.0, 0.058, 0.058), ring(0.04, 0.054, 0.054), ring(0.08, 0.058, 0.058)],
            head: [0.095, 0.078, 0.11],
            temple_height: 1.67,
            leg: vec![
                ring(0.0, 0.045, 0.045),
                ring(0.08, 0.038, 0.038),
                ring(0.20, 0.046, 0.046),
                ring(0.36, 0.062, 0.062),
                ring(0.50, 0.052, 0.052),
                ring(0.62, 0.082, 0.082),
                ring(0.90, 0.086, 0.086),
            ],
            leg_half_spacing: 0.09,
            arm: vec![
                ring(0.0, 0.052, 0.052),
                ring(0.14, 0.049, 0.049),
                ring(0.30, 0.039, 0.039),
                ring(0.42, 0.043, 0.043),
                ring(0.56, 0.028, 0.028),
                ring(0.64, 0.032, 0.032),
            ],
            arm_start: 0.19,
            arm_height: 1.40,
            sides: 96,
            head_rings: 40,
        }
    }
}

/// Ring indices used as measurement sites.
mod site {
    pub const WAIST: usize = 1;
    pub const CHEST: usize = 2;
    pub const ADAM: usize = 1;
    pub const ANKLE: usize = 1;
    pub const CALF: usize = 3;
    pub const THIGH: usize = 5;
    pub const HIP: usize = 6;
    pub const ELBOW: usize = 2;
    pub const FOREARM: usize = 3;
    pub const WRIST: usize = 4;
}

/// Analytic values of the generated body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnthroTruth {
    /// Codes A to M.
    pub measurements: BTreeMap<String, f64>,
    pub stature: f64,
    pub volume: f64,
    pub weight: f64,
    /// Torso, left arm and right arm masses (codes O to Q).
    pub segment_weights: BTreeMap<String, f64>,
    pub bmi: f64,
}

/// Ellipse perimeter, Ramanujan's second approximation.
pub fn ellipse_perimeter(a: f64, b: f64) -> f64 {
    let h = ((a - b) / (a + b)).powi(2);
    PI * (a + b) * (1.0 + 3.0 * h / (10.0 + (4.0 - 3.0 * h).sqrt()))
}

/// Volume between consecutive rings whose semi-axes vary linearly.
fn tube_volume(rings: &[Ring]) -> f64 {
    rings
        .windows(2)
        .map(|w| {
            let (p, q) = (w[0], w[1]);
            let (da, db) = (q.a - p.a, q.b - p.b);
            PI * (q.s - p.s) * (p.a * p.b + (p.a * db + p.b * da) / 2.0 + da * db / 3.0)
        })
        .sum()
}

struct MeshBuilder {
    vertices: Vec<WorldPoint>,
    faces: Vec<[usize; 3]>,
    landmarks: BTreeMap<String, usize>,
    segments: BTreeMap<String, BTreeSet<usize>>,
}

struct Tube {
    ring_start: Vec<usize>,
    caps: [usize; 2],
}

impl MeshBuilder {
    /// Closed tube along `axis` from `base`; angle zero points along `u`.
    /// End caps are fans to points on the axis at `caps`.
    #[allow(clippy::too_many_arguments)]
    fn tube(
        &mut self,
        segment: &str,
        base: Vector3<f64>,
        axis: Vector3<f64>,
        u: Vector3<f64>,
        rings: &[Ring],
        caps: [f64; 2],
        sides: usize,
    ) -> Tube {
        let w = axis.cross(&u);
        let first = self.vertices.len();
        let mut ring_start = Vec::with_capacity(rings.len());
        for r in rings {
            ring_start.push(self.vertices.len());
            for j in 0..sides {
                let t = TAU * j as f64 / sides as f64;
                let p = base + axis * r.s + u * (r.a * t.cos()) + w * (r.b * t.sin());
                self.vertices.push(WorldPoint::from(p));
            }
        }
        let bottom = self.vertices.len();
        self.vertices.push(WorldPoint::from(base + axis * caps[0]));
        let top = self.vertices.len();
        self.vertices.push(WorldPoint::from(base + axis * caps[1]));
        for k in 0..rings.len() - 1 {
            for j in 0..sides {
                let a = ring_start[k] + j;
                let b = ring_start[k] + (j + 1) % sides;
                let (c, d) = (a + sides, b + sides);
                self.faces.push([a, b, d]);
                self.faces.push([a, d, c]);
            }
        }
        let last = ring_start[rings.len() - 1];
        for j in 0..sides {
            self.faces.push([bottom, ring_start[0] + (j + 1) % sides, ring_start[0] + j]);
            self.faces.push([top, last + j, last + (j + 1) % sides]);
        }
        self.segments
            .entry(segment.to_string())
            .or_default()
            .extend(first..self.vertices.len());
        Tube {
            ring_start,
            caps: [bottom, top],
        }
    }

    fn mark(&mut self, name: &str, vertex: usize) {
        self.landmarks.insert(name.to_string(), vertex);
    }
}

fn head_rings(dims: &BodyDims) -> Vec<Ring> {
    let [a, b, c] = dims.head;
    let centre = dims.stature - c;
    let mut heights: Vec<f64> = (1..dims.head_rings)
        .map(|k| centre - c * (PI * k as f64 / dims.head_rings as f64).cos())
        .filter(|z| (z - dims.temple_height).abs() > 1e-3)
        .collect();
    heights.push(dims.temple_height);
    heights.sort_by(f64::total_cmp);
    let base = centre - c;
    heights
        .into_iter()
        .map(|z| {
            let k = (1.0 - ((z - centre) / c).powi(2)).max(0.0).sqrt();
            ring(z - base, a * k, b * k)
        })
        .collect()
}

/// Watertight T-pose body built from non-overlapping closed tubes: torso,
/// neck, head, two legs and two arms. Returns the mesh and its analytic
/// measurements at `density`.
pub fn body_mesh(dims: &BodyDims, density: f64) -> Result<(BodyMesh, AnthroTruth), SynthError> {
    let n = dims.sides;
    if n < 8 || n % 4 != 0 {
        return Err(SynthError::InvalidScript("mesh sides must be a multiple of 4, at least 8".into()));
    }
    let mut mb = MeshBuilder {
        vertices: Vec::new(),
        faces: Vec::new(),
        landmarks: BTreeMap::new(),
        segments: BTreeMap::new(),
    };
    let (x, y, z) = (Vector3::x(), Vector3::y(), Vector3::z());
    let left = n / 4;

    let torso_top = dims.torso.last().expect("torso rings").s;
    let torso = mb.tube("torso", z * dims.torso_base, z, x, &dims.torso, [0.0, torso_top], n);
    mb.mark("PELVIS CENTER", torso.caps[0]);
    mb.mark("SHOULDER TOP", torso.caps[1]);
    mb.mark("WAIST", torso.ring_start[site::WAIST]);
    mb.mark("CHEST", torso.ring_start[site::CHEST]);

    let neck_base = dims.torso_base + torso_top;
    let neck_top = dims.neck.last().expect("neck rings").s;
    let neck = mb.tube("head", z * neck_base, z, x, &dims.neck, [0.0, neck_top], n);
    mb.mark("NECK ADAM APPLE", neck.ring_start[site::ADAM]);

    let head_base = dims.stature - 2.0 * dims.head[2];
    if (head_base - neck_base - neck_top).abs() > 1e-9 {
        return Err(SynthError::InvalidScript("head must rest on the neck".into()));
    }
    let hr = head_rings(dims);
    let head = mb.tube("head", z * head_base, z, x, &hr, [0.0, 2.0 * dims.head[2]], n);
    mb.mark("HEAD TOP", head.caps[1]);
    let temple = hr
        .iter()
        .position(|r| (r.s + head_base - dims.temple_height).abs() < 1e-12)
        .expect("temple ring");
    mb.mark("HEAD LEFT TEMPLE", head.ring_start[temple] + left);

    let leg_top = dims.leg.last().expect("leg rings").s;
    for (side, sign, prefix) in [("left", 1.0, "LEFT"), ("right", -1.0, "RIGHT")] {
        let leg = mb.tube(
            &format!("{side}_leg"),
            y * (sign * dims.leg_half_spacing),
            z,
            x,
            &dims.leg,
            [0.0, leg_top],
            n,
        );
        mb.mark(&format!("{prefix} HEEL"), leg.caps[0]);
        mb.mark(&format!("{prefix} HIP"), leg.ring_start[site::HIP]);
        mb.mark(&format!("{prefix}_ANKLE"), leg.ring_start[site::ANKLE]);
        if side == "left" {
            mb.mark("LEFT THIGH", leg.ring_start[site::THIGH]);
            mb.mark("LEFT CALF", leg.ring_start[site::CALF]);
        }
    }
    let arm_end = dims.arm.last().expect("arm rings").s;
    for (side, sign, prefix) in [("left", 1.0, "LEFT"), ("right", -1.0, "RIGHT")] {
        let base = y * (sign * dims.arm_start) + z * dims.arm_height;
        let arm = mb.tube(&format!("{side}_arm"), base, y * sign, x, &dims.arm, [0.0, arm_end], n);
        mb.mark(&format!("{prefix} SHOULDER"), arm.ring_start[0]);
        mb.mark(&format!("{prefix} ELBOW"), arm.ring_start[site::ELBOW]);
        mb.mark(&format!("{prefix} WRIST"), arm.ring_start[site::WRIST]);
        if side == "left" {
            mb.mark("LEFT FOREARM", arm.ring_start[site::FOREARM]);
        }
    }
    let mesh = BodyMesh::new(mb.vertices, mb.faces, mb.landmarks, mb.segments)?;

    // analytic values
    let [ha, hb, hc] = dims.head;
    let torso_v = tube_volume(&dims.torso);
    let neck_v = tube_volume(&dims.neck);
    let head_v = 4.0 / 3.0 * PI * ha * hb * hc;
    let leg_v = tube_volume(&dims.leg);
    let arm_v = tube_volume(&dims.arm);
    let volume = torso_v + neck_v + head_v + 2.0 * leg_v + 2.0 * arm_v;
    let weight = density * volume;

    let temple_k = (1.0 - ((dims.temple_height - (dims.stature - hc)) / hc).powi(2)).sqrt();
    let circle = |r: &Ring| ellipse_perimeter(r.a, r.b);
    let arm_point = |r: &Ring| v(r.a, dims.arm_start + r.s, dims.arm_height);
    let shoulder = arm_point(&dims.arm[0]);
    let elbow = arm_point(&dims.arm[site::ELBOW]);
    let wrist = arm_point(&dims.arm[site::WRIST]);
    let heel = v(0.0, dims.leg_half_spacing, 0.0);
    let measurements = BTreeMap::from([
        ("A".to_string(), ellipse_perimeter(ha * temple_k, hb * temple_k)),
        ("B".to_string(), circle(&dims.neck[site::ADAM])),
        ("C".to_string(), torso_top),
        ("D".to_string(), circle(&dims.torso[site::CHEST])),
        ("E".to_string(), circle(&dims.torso[site::WAIST])),
        ("F".to_string(), 2.0 * dims.arm_start),
        ("G".to_string(), circle(&dims.arm[site::WRIST])),
        ("H".to_string(), circle(&dims.arm[site::FOREARM])),
        ("I".to_string(), (elbow - shoulder).norm() + (wrist - elbow).norm()),
        ("J".to_string(), circle(&dims.leg[site::THIGH])),
        ("K".to_string(), circle(&dims.leg[site::CALF])),
        ("L".to_string(), circle(&dims.leg[site::ANKLE])),
        ("M".to_string(), (v(0.0, 0.0, dims.stature) - heel).norm()),
    ]);
    let segment_weights = BTreeMap::from([
        ("O".to_string(), density * torso_v),
        ("P".to_string(), density * arm_v),
        ("Q".to_string(), density * arm_v),
    ]);
    let truth = AnthroTruth {
        measurements,
        stature: dims.stature,
        volume,
        weight,
        segment_weights,
        bmi: weight / (dims.stature * dims.stature),
    };
    Ok((mesh, truth))
}

/// Default body at the default density.
pub fn default_body() -> (BodyMesh, AnthroTruth) {
    body_mesh(&BodyDims::default(), BODY_DENSITY).expect("default body is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anthro::{measure_all, mesh_volume, DensityModel, VolumeSubset};
    use crate::augment::{augment_baseline, LandmarkSequence};
    use crate::kin::joint_angles;
    use crate::rig::reprojection_error;

    #[test]
    fn humanoid_shape() {
        let m = humanoid_model();
        assert_eq!(m.dof(), 30);
        assert_eq!(m.markers().len(), 57);
        assert_eq!(m.segments().len(), 13);
        let k = keypoint_model();
        let p = k.forward_kinematics(&k.neutral()).unwrap();
        assert!((p[Landmark::HeadTop.index()].z - 1.75).abs() < 1e-12);
        assert!((p[Landmark::LAnkle.index()].z - 0.08).abs() < 1e-12);
        assert!((p[Landmark::RShoulder.index()].coords - v(0.0, -0.18, 1.43)).norm() < 1e-12);
        let names: Vec<_> = joint_angles(&m.neutral(), &m).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["hip_flexion", "knee", "elbow"]);
    }

    #[test]
    fn joint_signs() {
        let m = keypoint_model();
        let mut q = m.neutral();
        set(&m, &mut q, "hip_flexion_r", 0.5);
        set(&m, &mut q, "elbow_flexion_l", 0.5);
        set(&m, &mut q, "hip_adduction_l", 0.2);
        set(&m, &mut q, "shoulder_abduction_r", 0.4);
        let p = m.forward_kinematics(&q).unwrap();
        assert!(p[Landmark::RKnee.index()].x > 0.1, "hip flexion swings the knee forward");
        assert!(p[Landmark::LWrist.index()].x > 0.1, "elbow flexion brings the wrist forward");
        assert!(p[Landmark::LKnee.index()].y < 0.09, "adduction moves the left knee medially");
        assert!(p[Landmark::RElbow.index()].y < -0.2, "abduction lifts the right arm sideways");
    }

    #[test]
    fn template_reproduces_markers_across_scripts() {
        let model = humanoid_model();
        let keypoints = keypoint_model();
        let template = humanoid_template();
        for task in [Task::Leaning, Task::Bending, Task::Squatting, Task::Walking] {
            let script = MotionScript::new(task, 5.0, 10.0).unwrap();
            let q = script.poses(&model);
            let seq = LandmarkSequence {
                rate_hz: 10.0,
                frames: (0..q.len()).collect(),
                points: q
                    .iter()
                    .map(|q| keypoints.forward_kinematics(q).unwrap().into_iter().map(Some).collect())
                    .collect(),
            };
            let trajs = augment_baseline(&seq, &template);
            for (i, q) in q.iter().enumerate() {
                assert!(model.in_bounds(q), "{task:?} frame {i} out of bounds");
                let truth = model.forward_kinematics(q).unwrap();
                for (t, p) in trajs.iter().zip(&truth) {
                    assert!((t.positions[i] - p.coords).norm() < 1e-9, "{task:?} {} frame {i}", t.marker_id);
                }
            }
        }
    }

    #[test]
    fn feet_stay_pinned_when_scripted() {
        let model = humanoid_model();
        let k = keypoint_model();
        let start = ankle_midpoint(&k, &model.neutral());
        for task in [Task::Squatting, Task::Bending, Task::Leaning] {
            for q in MotionScript::new(task, 5.0, 10.0).unwrap().poses(&model) {
                assert!((ankle_midpoint(&k, &q) - start).norm() < 1e-12);
            }
        }
        let squat = MotionScript::new(Task::Squatting, 4.0, 10.0).unwrap().poses(&model);
        let deep = &squat[20];
        let knee = deep[model.coordinate_index("knee_angle_r").unwrap()];
        assert!((knee - 1.6).abs() < 1e-12);
        let p = k.forward_kinematics(deep).unwrap();
        let heel = p[Landmark::RHeel.index()];
        let toe = p[Landmark::RBigToe.index()];
        assert!((heel.z - toe.z - 0.01).abs() < 1e-9, "foot stays flat");
    }

    #[test]
    fn zero_noise_keypoints_are_exact() {
        let script = MotionScript::new(Task::Walking, 1.0, 30.0).unwrap();
        let data = generate(&script, &standard_rig(), &NoiseSpec::default()).unwrap();
        assert_eq!(data.keypoints.len(), 4);
        for (cam, stream) in data.rig.cameras().iter().zip(&data.keypoints) {
            assert_eq!(stream.len(), 30);
            for (f, frame) in stream.iter().enumerate() {
                for (k, px) in frame.landmarks.iter().enumerate() {
                    let px = px.unwrap();
                    assert!(px.confidence >= 0.7);
                    assert!(reprojection_error(cam, &data.landmarks[f][k], &px).unwrap() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn occlusion_rate_and_determinism() {
        let script = MotionScript::new(Task::Squatting, 4.0, 30.0).unwrap();
        let noise = NoiseSpec::new(1.0, 0.25, 7).unwrap();
        let a = generate(&script, &standard_rig(), &noise).unwrap();
        let b = generate(&script, &standard_rig(), &noise).unwrap();
        assert_eq!(a, b);
        // 3000 Bernoulli(0.25) draws: sd 0.0079
        assert!((a.occlusion_fraction() - 0.25).abs() < 0.03);
        let c = generate(&script, &standard_rig(), &NoiseSpec::new(1.0, 0.25, 8).unwrap()).unwrap();
        assert_ne!(a.keypoints, c.keypoints);
        for (f, occ) in a.occluded.iter().enumerate() {
            for (k, hidden) in occ.iter().enumerate() {
                let confident = a.keypoints.iter().filter(|s| s[f].landmarks[k].unwrap().confidence >= 0.6).count();
                if *hidden {
                    assert!(confident <= 1);
                } else {
                    assert_eq!(confident, 4);
                }
            }
        }
    }

    #[test]
    fn out_of_view_is_reported() {
        let model = humanoid_model();
        let mut q = model.neutral();
        set(&model, &mut q, "pelvis_tx", 2.5);
        let script = MotionScript::custom(vec![q], 30.0).unwrap();
        assert!(matches!(
            generate(&script, &standard_rig(), &NoiseSpec::default()),
            Err(SynthError::SubjectOutOfView { .. })
        ));
        assert!(NoiseSpec::new(1.0, 1.5, 0).is_err());
        assert!(MotionScript::custom(vec![vec![0.0; 3]], 30.0).is_err());
    }

    #[test]
    fn rig_layout() {
        let rig = standard_rig().rig;
        let c = rig.cameras();
        assert!(((c[0].center() - c[1].center()).norm() - 3.67).abs() < 1e-12);
        assert!(((c[2].center() - c[3].center()).norm() - 2.45).abs() < 1e-12);
        for cam in c {
            assert!((cam.center().z - 0.9).abs() < 1e-12);
        }
    }

    #[test]
    fn body_mesh_matches_analytic_values() {
        let (mesh, truth) = default_body();
        assert_eq!(mesh.non_manifold_edges(), 0);
        let vol = mesh_volume(&mesh, &VolumeSubset::Whole).unwrap();
        assert!((vol - truth.volume).abs() / truth.volume < 0.005, "{vol} vs {}", truth.volume);
        let report = measure_all(&mesh, &DensityModel::default());
        assert!(report.missing.is_empty(), "{:?}", report.missing);
        for (code, expected) in &truth.measurements {
            let got = report.values[code].value;
            assert!((got - expected).abs() / expected < 0.02, "{code}: {got} vs {expected}");
        }
        let m = report.values["M"].value;
        assert!((m - truth.measurements["M"]).abs() < 1e-9);
        assert!((truth.bmi - 21.5).abs() < 0.5, "bmi {}", truth.bmi);
        for code in ["O", "P", "Q"] {
            let got = report.values[code].value;
            let expected = truth.segment_weights[code];
            assert!((got - expected).abs() / expected < 0.01, "{code}: {got} vs {expected}");
        }
    }
}
