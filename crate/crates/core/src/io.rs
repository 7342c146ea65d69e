//! File formats: keypoints, calibration, correspondences, trajectories, TRC,
//! meshes, reports and run manifests.
//!
//! Every JSON document carries a `schema_version` field.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use regex::Regex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::anthro::{BodyMesh, LandmarkSidecar, MeasurementReport, SIDECAR_SCHEMA_VERSION};
use crate::calib::{CalibrationReport, CorrespondenceSet, CorrespondenceSource};
use crate::filt::MarkerTrajectory;
use crate::kin::JointAngleSeries;
use crate::landmarks::LANDMARK_COUNT;
use crate::rig::{CameraModel, Distortion, PixelPoint, Rig, WorldPoint};
use crate::triang::{ExclusionSummary, FrameResult, KeypointFrame};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Fs {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed document at line {line}, column {column}: {reason}")]
    MalformedDocument {
        path: PathBuf,
        line: usize,
        column: usize,
        reason: String,
    },
    #[error("{path}: {found} keypoints, expected {expected}")]
    InconsistentLandmarkCount {
        path: PathBuf,
        found: usize,
        expected: usize,
    },
    #[error("{path}: unsupported schema version {found}")]
    SchemaVersion { path: PathBuf, found: u32 },
    #[error("ragged trajectories: {0}")]
    RaggedTrajectories(String),
    #[error("{path}: invalid content: {reason}")]
    Invalid { path: PathBuf, reason: String },
}

fn fs_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Fs {
        path: path.to_path_buf(),
        source,
    }
}

fn invalid(path: &Path, reason: impl Into<String>) -> IoError {
    IoError::Invalid {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn malformed(path: &Path, line: usize, column: usize, reason: impl Into<String>) -> IoError {
    IoError::MalformedDocument {
        path: path.to_path_buf(),
        line,
        column,
        reason: reason.into(),
    }
}

pub fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(fs_err(path))
}

/// Writes `contents`, creating parent directories.
pub fn write_text(path: &Path, contents: &str) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(fs_err(dir))?;
    }
    fs::write(path, contents).map_err(fs_err(path))
}

fn parse_json<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T, IoError> {
    serde_json::from_str(text).map_err(|e| malformed(path, e.line(), e.column(), e.to_string()))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("documents serialize");
    s.push('\n');
    s
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: u32,
}

/// Reads a versioned JSON document.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = read_text(path)?;
    let probe: VersionProbe = parse_json(path, &text)?;
    if probe.schema_version != SCHEMA_VERSION {
        return Err(IoError::SchemaVersion {
            path: path.to_path_buf(),
            found: probe.schema_version,
        });
    }
    parse_json(path, &text)
}

/// Writes a document that already carries its own `schema_version`.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    write_text(path, &to_json(value))
}

#[derive(Serialize, Deserialize)]
struct Versioned<T> {
    schema_version: u32,
    #[serde(flatten)]
    body: T,
}

fn write_versioned<T: Serialize>(path: &Path, body: T) -> Result<(), IoError> {
    write_json(
        path,
        &Versioned {
            schema_version: SCHEMA_VERSION,
            body,
        },
    )
}

fn read_versioned<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    Ok(read_json::<Versioned<T>>(path)?.body)
}

// ---------------------------------------------------------------------------
// keypoints

#[derive(Serialize, Deserialize)]
struct Person {
    pose_keypoints_2d: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct KeypointDocument {
    schema_version: u32,
    camera: String,
    frame: usize,
    people: Vec<Person>,
}

pub fn keypoint_file_name(camera: &str, frame: usize) -> String {
    format!("{camera}_{frame:06}.json")
}

/// One detector frame as `{camera}_{frame:06}.json`: a single person with
/// 25 flattened `(x, y, confidence)` triples. Missing keypoints are zeros.
pub fn write_keypoint_frame(dir: &Path, frame: &KeypointFrame) -> Result<PathBuf, IoError> {
    let mut flat = Vec::with_capacity(3 * frame.landmarks.len());
    for p in &frame.landmarks {
        match p {
            Some(p) => flat.extend([p.u(), p.v(), p.confidence]),
            None => flat.extend([0.0, 0.0, 0.0]),
        }
    }
    let doc = KeypointDocument {
        schema_version: SCHEMA_VERSION,
        camera: frame.camera_id.clone(),
        frame: frame.frame_index,
        people: vec![Person {
            pose_keypoints_2d: flat,
        }],
    };
    let path = dir.join(keypoint_file_name(&frame.camera_id, frame.frame_index));
    write_json(&path, &doc)?;
    Ok(path)
}

pub fn write_keypoints(dir: &Path, streams: &[Vec<KeypointFrame>]) -> Result<(), IoError> {
    for frame in streams.iter().flatten() {
        write_keypoint_frame(dir, frame)?;
    }
    Ok(())
}

fn parse_keypoint_file(path: &Path, camera: &str, frame: usize) -> Result<KeypointFrame, IoError> {
    let doc: KeypointDocument = read_json(path)?;
    let mut out = KeypointFrame::empty(camera, frame);
    // the most confident person is the subject
    let person = doc.people.iter().max_by(|a, b| {
        let score = |p: &Person| p.pose_keypoints_2d.iter().skip(2).step_by(3).sum::<f64>();
        score(a).total_cmp(&score(b))
    });
    let Some(person) = person else {
        return Ok(out);
    };
    let values = &person.pose_keypoints_2d;
    if values.len() != 3 * LANDMARK_COUNT {
        return Err(IoError::InconsistentLandmarkCount {
            path: path.to_path_buf(),
            found: values.len() / 3,
            expected: LANDMARK_COUNT,
        });
    }
    for (k, t) in values.chunks(3).enumerate() {
        if t[2] > 0.0 {
            if !(t[2] <= 1.0) || !t[0].is_finite() || !t[1].is_finite() {
                return Err(invalid(path, format!("keypoint {k} is not a valid detection")));
            }
            out.landmarks[k] = Some(PixelPoint::new(t[0], t[1], t[2]));
        }
    }
    Ok(out)
}

/// Reads every `{camera}_{frame:06}.json` in `dir` into per-camera streams
/// sorted by camera id. Each stream covers frames 0 to the last frame seen
/// in any camera; missing files become empty frames.
pub fn read_keypoints(dir: &Path) -> Result<BTreeMap<String, Vec<KeypointFrame>>, IoError> {
    let pattern = Regex::new(r"^(.+)_(\d{6})\.json$").expect("static regex");
    let mut found: BTreeMap<String, BTreeMap<usize, PathBuf>> = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(fs_err(dir))?;
    for entry in entries {
        let path = entry.map_err(fs_err(dir))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(c) = pattern.captures(name) {
            let frame: usize = c[2].parse().expect("six digits");
            found.entry(c[1].to_string()).or_default().insert(frame, path.clone());
        }
    }
    if found.is_empty() {
        return Err(invalid(dir, "no keypoint files"));
    }
    let last = found
        .values()
        .filter_map(|m| m.keys().next_back())
        .max()
        .copied()
        .unwrap_or(0);
    let mut streams = BTreeMap::new();
    for (camera, files) in found {
        let mut stream = Vec::with_capacity(last + 1);
        for frame in 0..=last {
            stream.push(match files.get(&frame) {
                Some(path) => parse_keypoint_file(path, &camera, frame)?,
                None => KeypointFrame::empty(&camera, frame),
            });
        }
        streams.insert(camera, stream);
    }
    Ok(streams)
}

/// Regroups camera streams into synchronized per-frame sets in rig order.
pub fn synchronize(streams: &BTreeMap<String, Vec<KeypointFrame>>, rig: &Rig) -> Result<Vec<Vec<KeypointFrame>>, IoError> {
    let ordered: Vec<&Vec<KeypointFrame>> = rig
        .cameras()
        .iter()
        .map(|c| {
            streams
                .get(c.id())
                .ok_or_else(|| invalid(Path::new(c.id()), "no keypoints for this camera"))
        })
        .collect::<Result<_, _>>()?;
    let n = ordered.iter().map(|s| s.len()).max().unwrap_or(0);
    Ok((0..n)
        .map(|i| {
            ordered
                .iter()
                .zip(rig.cameras())
                .map(|(s, c)| s.get(i).cloned().unwrap_or_else(|| KeypointFrame::empty(c.id(), i)))
                .collect()
        })
        .collect())
}

// ---------------------------------------------------------------------------
// calibration

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    id: String,
    image_size: [u32; 2],
    #[serde(rename = "K")]
    k: [f64; 9],
    #[serde(rename = "R")]
    r: [f64; 9],
    #[serde(rename = "K0")]
    k0: [f64; 3],
    distortion: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CalibrationDocument {
    schema_version: u32,
    cameras: Vec<CameraRecord>,
}

fn row_major(m: &Matrix3<f64>) -> [f64; 9] {
    std::array::from_fn(|i| m[(i / 3, i % 3)])
}

/// Rig calibration: per camera `K` and `R` row-major, projection centre
/// `K0` in meters and up to five distortion coefficients.
pub fn write_calibration(path: &Path, rig: &Rig) -> Result<(), IoError> {
    let cameras = rig
        .cameras()
        .iter()
        .map(|c| CameraRecord {
            id: c.id().to_string(),
            image_size: c.image_size(),
            k: row_major(c.intrinsics()),
            r: row_major(c.rotation()),
            k0: [c.center().x, c.center().y, c.center().z],
            distortion: c.distortion().coefficients().to_vec(),
        })
        .collect();
    write_json(
        path,
        &CalibrationDocument {
            schema_version: SCHEMA_VERSION,
            cameras,
        },
    )
}

pub fn read_calibration(path: &Path) -> Result<Rig, IoError> {
    let doc: CalibrationDocument = read_json(path)?;
    let cameras = doc
        .cameras
        .into_iter()
        .map(|c| {
            let distortion = Distortion::new(c.distortion).ok_or_else(|| invalid(path, "non-finite distortion"))?;
            CameraModel::new(
                c.id,
                c.image_size,
                Matrix3::from_row_slice(&c.k),
                Matrix3::from_row_slice(&c.r),
                WorldPoint::new(c.k0[0], c.k0[1], c.k0[2]),
                distortion,
            )
            .map_err(|e| invalid(path, e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Rig::new(cameras).map_err(|e| invalid(path, e.to_string()))
}

#[derive(Serialize, Deserialize)]
struct AuditDocument {
    cameras: Vec<CalibrationReport>,
}

/// Per-camera reprojection audits.
pub fn write_audit(path: &Path, reports: &[CalibrationReport]) -> Result<(), IoError> {
    write_versioned(
        path,
        AuditDocument {
            cameras: reports.to_vec(),
        },
    )
}

pub fn read_audit(path: &Path) -> Result<Vec<CalibrationReport>, IoError> {
    Ok(read_versioned::<AuditDocument>(path)?.cameras)
}

/// Correspondences of one camera with the metadata needed to build it.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceFile {
    pub camera_id: String,
    pub image_size: [u32; 2],
    pub set: CorrespondenceSet,
}

/// Plain-text correspondences:
///
/// ```text
/// # x y z in meters, u v in pixels
/// camera cam_left
/// image_size 1920 1080
/// source synthetic
/// 0.1 0.2 0.3 812.5 402.25
/// ```
pub fn write_correspondences(path: &Path, file: &CorrespondenceFile) -> Result<(), IoError> {
    let source = match file.set.source {
        CorrespondenceSource::Checkerboard => "checkerboard",
        CorrespondenceSource::Synthetic => "synthetic",
        CorrespondenceSource::Manual => "manual",
    };
    let mut s = String::from("# x y z in meters, u v in pixels\n");
    let _ = writeln!(s, "camera {}", file.camera_id);
    let _ = writeln!(s, "image_size {} {}", file.image_size[0], file.image_size[1]);
    let _ = writeln!(s, "source {source}");
    for (w, p) in &file.set.pairs {
        let _ = writeln!(s, "{} {} {} {} {}", w.x, w.y, w.z, p.u(), p.v());
    }
    write_text(path, &s)
}

pub fn read_correspondences(path: &Path) -> Result<CorrespondenceFile, IoError> {
    let text = read_text(path)?;
    let mut camera_id = None;
    let mut image_size = None;
    let mut source = CorrespondenceSource::Manual;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields[0] {
            "camera" if fields.len() == 2 => camera_id = Some(fields[1].to_string()),
            "image_size" if fields.len() == 3 => {
                let w = fields[1].parse().map_err(|_| malformed(path, line_no, 1, "bad width"))?;
                let h = fields[2].parse().map_err(|_| malformed(path, line_no, 1, "bad height"))?;
                image_size = Some([w, h]);
            }
            "source" if fields.len() == 2 => {
                source = match fields[1] {
                    "checkerboard" => CorrespondenceSource::Checkerboard,
                    "synthetic" => CorrespondenceSource::Synthetic,
                    "manual" => CorrespondenceSource::Manual,
                    other => return Err(malformed(path, line_no, 8, format!("unknown source {other}"))),
                }
            }
            _ => {
                if fields.len() != 5 {
                    return Err(malformed(path, line_no, 1, format!("{} fields, expected 5", fields.len())));
                }
                let mut v = [0.0; 5];
                for (k, f) in fields.iter().enumerate() {
                    v[k] = f
                        .parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| malformed(path, line_no, k + 1, format!("not a number: {f}")))?;
                }
                pairs.push((WorldPoint::new(v[0], v[1], v[2]), PixelPoint::new(v[3], v[4], 1.0)));
            }
        }
    }
    let camera_id = camera_id.ok_or_else(|| invalid(path, "missing camera line"))?;
    let image_size = image_size.ok_or_else(|| invalid(path, "missing image_size line"))?;
    Ok(CorrespondenceFile {
        camera_id,
        image_size,
        set: CorrespondenceSet::new(pairs, source),
    })
}

// ---------------------------------------------------------------------------
// stage artifacts

/// Triangulated keypoints of a take.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangulationDocument {
    pub task: String,
    pub rate_hz: f64,
    pub frames: Vec<FrameResult>,
}

pub fn write_triangulation(path: &Path, doc: &TriangulationDocument) -> Result<(), IoError> {
    write_versioned(path, doc)
}

pub fn read_triangulation(path: &Path) -> Result<TriangulationDocument, IoError> {
    read_versioned(path)
}

#[derive(Serialize, Deserialize)]
struct TrajectorySet {
    trajectories: Vec<MarkerTrajectory>,
}

/// Marker trajectories as JSON; gap samples are `null`.
pub fn write_trajectories(path: &Path, trajectories: &[MarkerTrajectory]) -> Result<(), IoError> {
    write_versioned(
        path,
        TrajectorySet {
            trajectories: trajectories.to_vec(),
        },
    )
}

pub fn read_trajectories(path: &Path) -> Result<Vec<MarkerTrajectory>, IoError> {
    Ok(read_versioned::<TrajectorySet>(path)?.trajectories)
}

// ---------------------------------------------------------------------------
// TRC

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TrcUnits {
    #[default]
    M,
    Mm,
}

impl TrcUnits {
    fn scale(self) -> f64 {
        match self {
            TrcUnits::M => 1.0,
            TrcUnits::Mm => 1000.0,
        }
    }

    fn label(self) -> &'static str {
        match self {
            TrcUnits::M => "m",
            TrcUnits::Mm => "mm",
        }
    }
}

impl std::str::FromStr for TrcUnits {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "m" => Ok(TrcUnits::M),
            "mm" => Ok(TrcUnits::Mm),
            other => Err(format!("unknown units {other}")),
        }
    }
}

/// Parsed TRC contents. Positions are in meters; gaps are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrcDocument {
    pub rate_hz: f64,
    pub camera_rate_hz: f64,
    pub units: TrcUnits,
    pub markers: Vec<String>,
    pub times: Vec<f64>,
    /// `positions[frame][marker]`
    pub positions: Vec<Vec<Option<Vector3<f64>>>>,
}

impl TrcDocument {
    pub fn frame_count(&self) -> usize {
        self.positions.len()
    }

    /// One trajectory per marker, frames numbered from zero.
    pub fn trajectories(&self) -> Result<Vec<MarkerTrajectory>, IoError> {
        self.markers
            .iter()
            .enumerate()
            .map(|(m, name)| {
                let positions = self
                    .positions
                    .iter()
                    .map(|f| f[m].unwrap_or(Vector3::repeat(f64::NAN)))
                    .collect();
                let gaps = self.positions.iter().map(|f| f[m].is_none()).collect();
                MarkerTrajectory::new(name.clone(), (0..self.frame_count()).collect(), positions, gaps, self.rate_hz)
                    .map_err(|e| IoError::RaggedTrajectories(e.to_string()))
            })
            .collect()
    }
}

fn check_aligned(trajectories: &[MarkerTrajectory]) -> Result<&MarkerTrajectory, IoError> {
    let first = trajectories
        .first()
        .ok_or_else(|| IoError::RaggedTrajectories("no trajectories".into()))?;
    if let Some(t) = trajectories
        .iter()
        .find(|t| t.len() != first.len() || t.frames != first.frames || t.rate_hz != first.rate_hz)
    {
        return Err(IoError::RaggedTrajectories(format!(
            "{} does not share the frame range of {}",
            t.marker_id, first.marker_id
        )));
    }
    Ok(first)
}

/// Tab-separated TRC with a five-line header. Frame numbers count from 1;
/// times come from the trajectories' frame indices. Gaps are left blank.
pub fn trc_string(trajectories: &[MarkerTrajectory], units: TrcUnits, file_name: &str) -> Result<String, IoError> {
    let first = check_aligned(trajectories)?;
    let n = first.len();
    let rate = first.rate_hz;
    let scale = units.scale();
    let mut s = String::new();
    let _ = writeln!(s, "PathFileType\t4\t(X/Y/Z)\t{file_name}");
    s.push_str("DataRate\tCameraRate\tNumFrames\tNumMarkers\tUnits\tOrigDataRate\tOrigDataStartFrame\tOrigNumFrames\n");
    let _ = writeln!(
        s,
        "{rate}\t{rate}\t{n}\t{}\t{}\t{rate}\t1\t{n}",
        trajectories.len(),
        units.label()
    );
    s.push_str("Frame#\tTime");
    for t in trajectories {
        let _ = write!(s, "\t{}\t\t", t.marker_id);
    }
    s.push_str("\n\t");
    for k in 1..=trajectories.len() {
        let _ = write!(s, "\tX{k}\tY{k}\tZ{k}");
    }
    s.push_str("\n\n");
    for i in 0..n {
        let _ = write!(s, "{}\t{}", i + 1, first.frames[i] as f64 / rate);
        for t in trajectories {
            let p = t.positions[i];
            if t.gap_mask[i] || !p.iter().all(|c| c.is_finite()) {
                s.push_str("\t\t\t");
            } else {
                let _ = write!(s, "\t{}\t{}\t{}", p.x * scale, p.y * scale, p.z * scale);
            }
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn write_trc(path: &Path, trajectories: &[MarkerTrajectory], units: TrcUnits) -> Result<(), IoError> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("markers.trc");
    write_text(path, &trc_string(trajectories, units, name)?)
}

pub fn read_trc(path: &Path) -> Result<TrcDocument, IoError> {
    parse_trc(path, &read_text(path)?)
}

pub fn parse_trc(path: &Path, text: &str) -> Result<TrcDocument, IoError> {
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() < 5 || !lines[0].starts_with("PathFileType") {
        return Err(malformed(path, 1, 1, "missing TRC header"));
    }
    let header: Vec<&str> = lines[1].split('\t').collect();
    let values: Vec<&str> = lines[2].split('\t').collect();
    let field = |name: &str| -> Result<&str, IoError> {
        header
            .iter()
            .position(|h| h.trim() == name)
            .and_then(|i| values.get(i))
            .map(|v| v.trim())
            .ok_or_else(|| malformed(path, 3, 1, format!("missing {name}")))
    };
    let num = |name: &str| -> Result<f64, IoError> {
        field(name)?
            .parse::<f64>()
            .map_err(|_| malformed(path, 3, 1, format!("bad {name}")))
    };
    let rate_hz = num("DataRate")?;
    let camera_rate_hz = num("CameraRate")?;
    let frames = num("NumFrames")? as usize;
    let marker_count = num("NumMarkers")? as usize;
    let units: TrcUnits = field("Units")?
        .parse()
        .map_err(|e: String| malformed(path, 3, 1, e))?;
    let markers: Vec<String> = lines[3]
        .split('\t')
        .skip(2)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    if markers.len() != marker_count {
        return Err(malformed(path, 4, 1, format!("{} names for {marker_count} markers", markers.len())));
    }
    let scale = units.scale();
    let mut times = Vec::with_capacity(frames);
    let mut positions = Vec::with_capacity(frames);
    let columns = 2 + 3 * marker_count;
    for (i, line) in lines.iter().enumerate().skip(5) {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let mut cells: Vec<&str> = line.split('\t').collect();
        if cells.len() > columns && cells[columns..].iter().all(|c| c.trim().is_empty()) {
            cells.truncate(columns);
        }
        if cells.len() != columns {
            return Err(malformed(path, line_no, 1, format!("{} columns, expected {columns}", cells.len())));
        }
        let frame_no: usize = cells[0]
            .trim()
            .parse()
            .map_err(|_| malformed(path, line_no, 1, "bad frame number"))?;
        if frame_no != positions.len() + 1 {
            return Err(malformed(path, line_no, 1, "frame numbers must be contiguous from 1"));
        }
        let time: f64 = cells[1]
            .trim()
            .parse()
            .map_err(|_| malformed(path, line_no, 2, "bad time"))?;
        let mut row = Vec::with_capacity(marker_count);
        for m in 0..marker_count {
            let c = &cells[2 + 3 * m..5 + 3 * m];
            if c.iter().all(|v| v.trim().is_empty()) {
                row.push(None);
                continue;
            }
            let mut p = Vector3::zeros();
            for k in 0..3 {
                p[k] = c[k]
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| malformed(path, line_no, 3 + 3 * m + k, "bad coordinate"))?
                    / scale;
            }
            row.push(Some(p));
        }
        times.push(time);
        positions.push(row);
    }
    if positions.len() != frames {
        return Err(malformed(path, 3, 1, format!("header says {frames} frames, found {}", positions.len())));
    }
    Ok(TrcDocument {
        rate_hz,
        camera_rate_hz,
        units,
        markers,
        times,
        positions,
    })
}

// ---------------------------------------------------------------------------
// reports

fn cell(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

/// Wide CSV: `frame,time,<angles>,residual`, angles in degrees.
pub fn angles_csv(series: &JointAngleSeries) -> String {
    let mut s = String::from("frame,time");
    for n in &series.names {
        let _ = write!(s, ",{n}");
    }
    s.push_str(",residual\n");
    for i in 0..series.len() {
        let _ = write!(s, "{},{}", series.frames[i], series.time(i));
        for v in &series.values[i] {
            let _ = write!(s, ",{}", cell(*v));
        }
        let _ = writeln!(s, ",{}", cell(series.residual[i]));
    }
    s
}

pub fn write_angles_csv(path: &Path, series: &JointAngleSeries) -> Result<(), IoError> {
    write_text(path, &angles_csv(series))
}

/// Columns and rows of an angle CSV; blank cells read as NaN.
pub fn read_angles_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), IoError> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| malformed(path, 1, 1, "empty file"))?
        .split(',')
        .map(String::from)
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row: Vec<f64> = line
            .split(',')
            .enumerate()
            .map(|(k, c)| {
                if c.is_empty() {
                    Ok(f64::NAN)
                } else {
                    c.parse().map_err(|_| malformed(path, i + 2, k + 1, "bad number"))
                }
            })
            .collect::<Result<_, _>>()?;
        if row.len() != header.len() {
            return Err(malformed(path, i + 2, 1, "column count differs from header"));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

/// Anthropometric report with the frame the subject was measured in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnthroDocument {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measurement_frame: Option<usize>,
    #[serde(flatten)]
    pub report: MeasurementReport,
}

pub fn write_anthro_report(path: &Path, doc: &AnthroDocument) -> Result<(), IoError> {
    write_versioned(path, doc)
}

pub fn read_anthro_report(path: &Path) -> Result<AnthroDocument, IoError> {
    read_versioned(path)
}

pub fn write_stats(path: &Path, stats: &ExclusionSummary) -> Result<(), IoError> {
    write_versioned(path, stats)
}

pub fn read_stats(path: &Path) -> Result<ExclusionSummary, IoError> {
    read_versioned(path)
}

// ---------------------------------------------------------------------------
// meshes

/// Wavefront-style indexed triangles: `v x y z` and 1-based `f a b c`.
pub fn obj_string(mesh: &BodyMesh) -> String {
    let mut s = String::new();
    for v in &mesh.vertices {
        let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
    }
    for f in &mesh.faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

fn parse_obj(path: &Path, text: &str) -> Result<(Vec<WorldPoint>, Vec<[usize; 3]>), IoError> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it
                    .map(|t| t.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| malformed(path, line_no, 3, "bad vertex"))?;
                if c.len() < 3 {
                    return Err(malformed(path, line_no, 1, "vertex needs three coordinates"));
                }
                vertices.push(WorldPoint::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = it
                    .map(|t| t.split('/').next().unwrap_or("").parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| malformed(path, line_no, 3, "bad face index"))?;
                if idx.len() < 3 || idx.contains(&0) {
                    return Err(malformed(path, line_no, 1, "faces need three 1-based indices"));
                }
                // fan-triangulate polygons
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0] - 1, idx[k] - 1, idx[k + 1] - 1]);
                }
            }
            _ => {}
        }
    }
    Ok((vertices, faces))
}

/// Mesh plus sidecar: `<stem>.obj` and `<stem>.landmarks.json`.
pub fn write_mesh(obj_path: &Path, mesh: &BodyMesh, topology: &str) -> Result<PathBuf, IoError> {
    write_text(obj_path, &obj_string(mesh))?;
    let sidecar = LandmarkSidecar {
        schema_version: SIDECAR_SCHEMA_VERSION,
        topology: topology.to_string(),
        vertex_count: mesh.vertices.len(),
        landmarks: mesh.landmarks.clone(),
        flagged: BTreeMap::new(),
        segments: mesh.segments.clone(),
    };
    let side = sidecar_path(obj_path);
    write_json(&side, &sidecar)?;
    Ok(side)
}

pub fn sidecar_path(obj_path: &Path) -> PathBuf {
    obj_path.with_extension("landmarks.json")
}

/// Reads a mesh and its sidecar. Flagged landmarks are dropped so that
/// measurements depending on them report as missing.
pub fn read_mesh(obj_path: &Path, sidecar: &Path) -> Result<BodyMesh, IoError> {
    let (vertices, faces) = parse_obj(obj_path, &read_text(obj_path)?)?;
    let side: LandmarkSidecar = read_json(sidecar)?;
    if side.vertex_count != vertices.len() {
        return Err(invalid(
            sidecar,
            format!("sidecar is for {} vertices, mesh has {}", side.vertex_count, vertices.len()),
        ));
    }
    let landmarks = side
        .landmarks
        .into_iter()
        .filter(|(k, _)| !side.flagged.contains_key(k))
        .collect();
    let segments: BTreeMap<String, BTreeSet<usize>> = side.segments;
    BodyMesh::new(vertices, faces, landmarks, segments).map_err(|e| invalid(obj_path, e.to_string()))
}

// ---------------------------------------------------------------------------
// manifests

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn sha256_file(path: &Path) -> Result<String, IoError> {
    Ok(sha256_hex(&fs::read(path).map_err(fs_err(path))?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Record of one run: what went in, which configuration, what came out.
/// Holds no timestamps so identical runs produce identical manifests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_sha256: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

impl RunManifest {
    pub fn new(command: &str, config_json: &str) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            tool: "markerless".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_sha256: sha256_hex(config_json.as_bytes()),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Digests files, listing each by its path relative to `base` when
    /// possible. Directories contribute every file inside, sorted.
    pub fn digest(paths: &[PathBuf], base: &Path) -> Result<Vec<FileDigest>, IoError> {
        let mut files = Vec::new();
        for p in paths {
            collect_files(p, &mut files)?;
        }
        files.sort();
        files.dedup();
        files
            .iter()
            .map(|f| {
                let shown = f.strip_prefix(base).unwrap_or(f);
                Ok(FileDigest {
                    path: shown.to_string_lossy().replace('\\', "/"),
                    sha256: sha256_file(f)?,
                })
            })
            .collect()
    }
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<(), IoError> {
    if path.is_dir() {
        for entry in fs::read_dir(path).map_err(fs_err(path))? {
            collect_files(&entry.map_err(fs_err(path))?.path(), out)?;
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}
