//! Anthropometric measurements from a landmark-indexed triangle mesh.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::landmarks::Landmark;
use crate::rig::WorldPoint;

pub const SIDECAR_SCHEMA_VERSION: u32 = 1;

/// Body density, kg/m^3.
pub const BODY_DENSITY: f64 = 985.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnthroError {
    #[error("unknown landmark {0}")]
    UnknownLandmark(String),
    #[error("unknown segment {0}")]
    UnknownSegment(String),
    #[error("slicing plane does not intersect the mesh")]
    NoIntersection,
    #[error("slice contour does not close")]
    OpenLoop,
    #[error("surface is not watertight: {0}")]
    NotWatertight(String),
    #[error("{0} must be positive")]
    NonPositiveInput(&'static str),
    #[error("no frame has hip, shoulder and ankle keypoints")]
    NoValidFrame,
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("invalid density model: {0}")]
    InvalidDensity(String),
}

/// Triangle mesh with named landmark vertices and segment vertex sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyMesh {
    pub vertices: Vec<WorldPoint>,
    pub faces: Vec<[usize; 3]>,
    pub landmarks: BTreeMap<String, usize>,
    pub segments: BTreeMap<String, BTreeSet<usize>>,
}

impl BodyMesh {
    pub fn new(
        vertices: Vec<WorldPoint>,
        faces: Vec<[usize; 3]>,
        landmarks: BTreeMap<String, usize>,
        segments: BTreeMap<String, BTreeSet<usize>>,
    ) -> Result<Self, AnthroError> {
        let n = vertices.len();
        if let Some(f) = faces.iter().find(|f| f.iter().any(|i| *i >= n)) {
            return Err(AnthroError::InvalidMesh(format!("face {f:?} indexes past {n} vertices")));
        }
        if let Some((name, i)) = landmarks.iter().find(|(_, i)| **i >= n) {
            return Err(AnthroError::InvalidMesh(format!("landmark {name} at vertex {i} of {n}")));
        }
        for (name, set) in &segments {
            if set.iter().any(|i| *i >= n) {
                return Err(AnthroError::InvalidMesh(format!("segment {name} indexes past {n} vertices")));
            }
        }
        if vertices.iter().any(|v| !v.coords.iter().all(|c| c.is_finite())) {
            return Err(AnthroError::InvalidMesh("non-finite vertex".into()));
        }
        Ok(Self {
            vertices,
            faces,
            landmarks,
            segments,
        })
    }

    pub fn landmark(&self, name: &str) -> Result<WorldPoint, AnthroError> {
        self.landmarks
            .get(name)
            .map(|i| self.vertices[*i])
            .ok_or_else(|| AnthroError::UnknownLandmark(name.to_string()))
    }

    /// Copy with every vertex multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            vertices: self.vertices.iter().map(|v| WorldPoint::from(v.coords * s)).collect(),
            ..self.clone()
        }
    }

    fn faces_in(&self, segment: Option<&str>) -> Result<Vec<[usize; 3]>, AnthroError> {
        match segment {
            None => Ok(self.faces.clone()),
            Some(name) => {
                let set = self
                    .segments
                    .get(name)
                    .ok_or_else(|| AnthroError::UnknownSegment(name.to_string()))?;
                Ok(self
                    .faces
                    .iter()
                    .filter(|f| f.iter().all(|i| set.contains(i)))
                    .copied()
                    .collect())
            }
        }
    }

    /// Edges used by a number of faces other than two.
    pub fn non_manifold_edges(&self) -> usize {
        edge_counts(&self.faces).values().filter(|c| **c != 2).count()
    }
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

fn edge_counts(faces: &[[usize; 3]]) -> HashMap<(usize, usize), usize> {
    let mut counts = HashMap::new();
    for f in faces {
        for k in 0..3 {
            *counts.entry(edge_key(f[k], f[(k + 1) % 3])).or_insert(0) += 1;
        }
    }
    counts
}

/// Euclidean distance between two landmark vertices.
pub fn landmark_distance(mesh: &BodyMesh, a: &str, b: &str) -> Result<f64, AnthroError> {
    Ok((mesh.landmark(a)? - mesh.landmark(b)?).norm())
}

/// Sum of distances along a chain of landmarks.
pub fn landmark_path_length(mesh: &BodyMesh, chain: &[&str]) -> Result<f64, AnthroError> {
    chain.windows(2).map(|w| landmark_distance(mesh, w[0], w[1])).sum()
}

fn distance_to_segment(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let ab = b - a;
    let t = if ab.norm_squared() > 0.0 {
        ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (a + ab * t - p).norm()
}

/// Perimeter of the closed contour cut by the plane through `point` with
/// normal `axis`, choosing the contour nearest `point`. With `segment`, only
/// faces whose vertices all belong to that segment are sliced.
pub fn slice_perimeter(
    mesh: &BodyMesh,
    point: &WorldPoint,
    axis: &Vector3<f64>,
    segment: Option<&str>,
) -> Result<f64, AnthroError> {
    let n = axis
        .try_normalize(1e-12)
        .ok_or(AnthroError::NonPositiveInput("slice normal length"))?;
    let faces = mesh.faces_in(segment)?;
    let d: Vec<f64> = mesh.vertices.iter().map(|v| (v - point).dot(&n)).collect();
    // vertices exactly on the plane count as above, so every crossing
    // edge has one strictly negative end
    let above = |i: usize| d[i] >= 0.0;
    let crossing = |a: usize, b: usize| -> Vector3<f64> {
        let (va, vb) = (mesh.vertices[a].coords, mesh.vertices[b].coords);
        let t = d[a] / (d[a] - d[b]);
        va + (vb - va) * t
    };
    let mut links: HashMap<(usize, usize), Vec<(usize, usize)>> = HashMap::new();
    let mut points: HashMap<(usize, usize), Vector3<f64>> = HashMap::new();
    for f in &faces {
        let mut cut = Vec::with_capacity(2);
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            if above(a) != above(b) {
                let key = edge_key(a, b);
                points.entry(key).or_insert_with(|| crossing(key.0, key.1));
                cut.push(key);
            }
        }
        if cut.len() == 2 {
            links.entry(cut[0]).or_default().push(cut[1]);
            links.entry(cut[1]).or_default().push(cut[0]);
        }
    }
    if links.is_empty() {
        return Err(AnthroError::NoIntersection);
    }
    if links.values().any(|l| l.len() != 2) {
        return Err(AnthroError::OpenLoop);
    }
    let mut keys: Vec<(usize, usize)> = links.keys().copied().collect();
    keys.sort_unstable();
    let mut visited: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut best: Option<(f64, f64)> = None;
    for start in keys {
        if visited.contains(&start) {
            continue;
        }
        let mut perimeter = 0.0;
        let mut nearest = f64::INFINITY;
        let (mut prev, mut cur) = (start, links[&start][0]);
        visited.insert(start);
        loop {
            let (a, b) = (points[&prev], points[&cur]);
            perimeter += (b - a).norm();
            nearest = nearest.min(distance_to_segment(&point.coords, &a, &b));
            if cur == start {
                break;
            }
            visited.insert(cur);
            let next = if links[&cur][0] == prev { links[&cur][1] } else { links[&cur][0] };
            prev = cur;
            cur = next;
        }
        if best.is_none_or(|(dist, _)| nearest < dist) {
            best = Some((nearest, perimeter));
        }
    }
    Ok(best.expect("at least one loop").1)
}

/// Circumference at a landmark, sliced normal to `axis`.
pub fn circumference(
    mesh: &BodyMesh,
    landmark: &str,
    axis: &Vector3<f64>,
    segment: Option<&str>,
) -> Result<f64, AnthroError> {
    slice_perimeter(mesh, &mesh.landmark(landmark)?, axis, segment)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeSubset {
    Whole,
    Segment(String),
}

/// Enclosed volume by the signed-tetrahedron sum over faces.
///
/// The whole mesh must be watertight. A segment subset is closed first by
/// capping each boundary loop with a fan around its centroid. Each connected
/// component contributes its absolute volume, so the result does not depend
/// on face winding.
pub fn mesh_volume(mesh: &BodyMesh, subset: &VolumeSubset) -> Result<f64, AnthroError> {
    let faces = match subset {
        VolumeSubset::Whole => mesh.faces.clone(),
        VolumeSubset::Segment(name) => mesh.faces_in(Some(name))?,
    };
    if faces.is_empty() {
        return Err(AnthroError::NotWatertight("no faces".into()));
    }
    let counts = edge_counts(&faces);
    if let Some((e, c)) = counts.iter().find(|(_, c)| **c > 2) {
        return Err(AnthroError::NotWatertight(format!("edge {e:?} shared by {c} faces")));
    }
    let mut triangles: Vec<[Vector3<f64>; 3]> = faces
        .iter()
        .map(|f| f.map(|i| mesh.vertices[i].coords))
        .collect();
    let mut owner: Vec<usize> = faces.iter().map(|f| f[0]).collect();

    let boundary: Vec<(usize, usize)> = faces
        .iter()
        .flat_map(|f| (0..3).map(move |k| (f[k], f[(k + 1) % 3])))
        .filter(|(a, b)| counts[&edge_key(*a, *b)] == 1)
        .collect();
    if !boundary.is_empty() {
        if *subset == VolumeSubset::Whole {
            return Err(AnthroError::NotWatertight(format!("{} boundary edges", boundary.len())));
        }
        let mut next: HashMap<usize, usize> = HashMap::new();
        for (a, b) in &boundary {
            if next.insert(*a, *b).is_some() {
                return Err(AnthroError::NotWatertight("boundary is not a simple loop".into()));
            }
        }
        let mut done: BTreeSet<usize> = BTreeSet::new();
        let mut starts: Vec<usize> = next.keys().copied().collect();
        starts.sort_unstable();
        for start in starts {
            if done.contains(&start) {
                continue;
            }
            let mut ring = vec![start];
            let mut cur = start;
            loop {
                cur = *next
                    .get(&cur)
                    .ok_or_else(|| AnthroError::NotWatertight("boundary loop does not close".into()))?;
                if cur == start {
                    break;
                }
                if !done.insert(cur) {
                    return Err(AnthroError::NotWatertight("boundary loops intersect".into()));
                }
                ring.push(cur);
            }
            done.insert(start);
            let centroid = ring.iter().map(|i| mesh.vertices[*i].coords).sum::<Vector3<f64>>() / ring.len() as f64;
            for k in 0..ring.len() {
                let (a, b) = (ring[k], ring[(k + 1) % ring.len()]);
                // reversed boundary edge keeps the cap's winding consistent
                triangles.push([mesh.vertices[b].coords, mesh.vertices[a].coords, centroid]);
                owner.push(a);
            }
        }
    }

    // connected components over shared vertices
    let mut parent: HashMap<usize, usize> = HashMap::new();
    fn find(parent: &mut HashMap<usize, usize>, x: usize) -> usize {
        let p = *parent.entry(x).or_insert(x);
        if p == x {
            return x;
        }
        let r = find(parent, p);
        parent.insert(x, r);
        r
    }
    for f in &faces {
        let r0 = find(&mut parent, f[0]);
        for v in &f[1..] {
            let r = find(&mut parent, *v);
            if r != r0 {
                parent.insert(r, r0);
            }
        }
    }
    let mut per_component: BTreeMap<usize, f64> = BTreeMap::new();
    for (t, o) in triangles.iter().zip(&owner) {
        let root = find(&mut parent, *o);
        *per_component.entry(root).or_insert(0.0) += t[0].dot(&t[1].cross(&t[2])) / 6.0;
    }
    Ok(per_component.values().map(|v| v.abs()).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BmiCategory {
    Underweight,
    Normal,
    Overweight,
    Obese,
}

impl BmiCategory {
    pub const ALL: [BmiCategory; 4] = [
        BmiCategory::Underweight,
        BmiCategory::Normal,
        BmiCategory::Overweight,
        BmiCategory::Obese,
    ];

    /// Bands: below 18.5, [18.5, 25), [25, 30), 30 and above.
    pub fn of(bmi: f64) -> Self {
        if bmi < 18.5 {
            BmiCategory::Underweight
        } else if bmi < 25.0 {
            BmiCategory::Normal
        } else if bmi < 30.0 {
            BmiCategory::Overweight
        } else {
            BmiCategory::Obese
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityModel {
    pub rho: f64,
    /// Median BMI of each category, in [`BmiCategory::ALL`] order.
    pub bmi_medians: [f64; 4],
}

impl Default for DensityModel {
    fn default() -> Self {
        Self {
            rho: BODY_DENSITY,
            bmi_medians: [17.0, 21.7, 27.5, 35.0],
        }
    }
}

impl DensityModel {
    pub fn new(rho: f64, bmi_medians: [f64; 4]) -> Result<Self, AnthroError> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(AnthroError::InvalidDensity(format!("rho {rho}")));
        }
        if bmi_medians.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(AnthroError::InvalidDensity("medians must increase".into()));
        }
        Ok(Self { rho, bmi_medians })
    }

    pub fn median(&self, c: BmiCategory) -> f64 {
        self.bmi_medians[c.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightEstimate {
    pub extracted: f64,
    pub bmi_extracted: f64,
    pub category: BmiCategory,
    pub weight: f64,
}

/// Mass from volume and density, shifted by the gap between the implied
/// BMI and the median of its category.
pub fn weight_estimate(volume: f64, height: f64, density: &DensityModel) -> Result<WeightEstimate, AnthroError> {
    if !(volume > 0.0) {
        return Err(AnthroError::NonPositiveInput("volume"));
    }
    if !(height > 0.0) {
        return Err(AnthroError::NonPositiveInput("height"));
    }
    let h2 = height * height;
    let extracted = density.rho * volume;
    let bmi = extracted / h2;
    let category = BmiCategory::of(bmi);
    Ok(WeightEstimate {
        extracted,
        bmi_extracted: bmi,
        category,
        weight: extracted + (bmi - density.median(category)) * h2,
    })
}

fn angle_from_vertical(v: &Vector3<f64>) -> Option<f64> {
    let n = v.norm();
    (n > 1e-12).then(|| (v.z / n).clamp(-1.0, 1.0).acos())
}

/// Index of the most upright frame: the smallest sum of trunk tilt
/// (hips to shoulders) and leg tilt (ankles to hips) from vertical.
/// `frames[i]` holds keypoints in detector order.
pub fn select_measurement_frame(frames: &[Vec<Option<WorldPoint>>]) -> Result<usize, AnthroError> {
    use Landmark::*;
    let mut best: Option<(usize, f64)> = None;
    for (i, f) in frames.iter().enumerate() {
        let get = |l: Landmark| f.get(l.index()).copied().flatten();
        let pair = |a, b| Some(nalgebra::center(&get(a)?, &get(b)?));
        let (Some(hip), Some(shoulder), Some(ankle)) = (
            pair(LHip, RHip),
            pair(LShoulder, RShoulder),
            pair(LAnkle, RAnkle),
        ) else {
            continue;
        };
        let (Some(trunk), Some(leg)) = (angle_from_vertical(&(shoulder - hip)), angle_from_vertical(&(hip - ankle)))
        else {
            continue;
        };
        let score = trunk + leg;
        if best.is_none_or(|(_, s)| score < s) {
            best = Some((i, score));
        }
    }
    best.map(|(i, _)| i).ok_or(AnthroError::NoValidFrame)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Length,
    Circumference,
    VolumeWeight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Unit {
    #[serde(rename = "m")]
    Meter,
    #[serde(rename = "kg")]
    Kilogram,
}

impl Unit {
    pub fn symbol(self) -> &'static str {
        match self {
            Unit::Meter => "m",
            Unit::Kilogram => "kg",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub name: String,
    pub value: f64,
    pub unit: Unit,
    pub method: Method,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementReport {
    /// Keyed by code `A` to `Q`.
    pub values: BTreeMap<String, Measurement>,
    /// Final weight over squared height; absent without both.
    pub bmi: Option<f64>,
    pub bmi_category: Option<BmiCategory>,
    /// Codes that could not be measured, with the reason.
    pub missing: BTreeMap<String, String>,
}

/// Slicing axis from one landmark toward another.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis(pub &'static str, pub &'static str);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Definition {
    Circumference {
        landmark: &'static str,
        axis: Axis,
        segment: &'static str,
    },
    Length(&'static [&'static str]),
    BodyWeight,
    SegmentWeight(&'static str),
}

/// Long axis of the trunk, used for head, neck, chest and waist slices.
const TRUNK: Axis = Axis("PELVIS CENTER", "SHOULDER TOP");
const LEFT_ARM: Axis = Axis("LEFT SHOULDER", "LEFT WRIST");
const LEFT_LEG: Axis = Axis("LEFT HIP", "LEFT_ANKLE");

/// The seventeen measurements, codes A to Q.
pub const DEFINITIONS: [(&str, &str, Definition); 17] = [
    ("A", "head circumference", Definition::Circumference { landmark: "HEAD LEFT TEMPLE", axis: TRUNK, segment: "head" }),
    ("B", "neck circumference", Definition::Circumference { landmark: "NECK ADAM APPLE", axis: TRUNK, segment: "head" }),
    ("C", "full torso length", Definition::Length(&["SHOULDER TOP", "PELVIS CENTER"])),
    ("D", "chest circumference", Definition::Circumference { landmark: "CHEST", axis: TRUNK, segment: "torso" }),
    ("E", "waist circumference", Definition::Circumference { landmark: "WAIST", axis: TRUNK, segment: "torso" }),
    ("F", "shoulder to shoulder length", Definition::Length(&["LEFT SHOULDER", "RIGHT SHOULDER"])),
    ("G", "wrist circumference", Definition::Circumference { landmark: "LEFT WRIST", axis: LEFT_ARM, segment: "left_arm" }),
    ("H", "forearm circumference", Definition::Circumference { landmark: "LEFT FOREARM", axis: LEFT_ARM, segment: "left_arm" }),
    ("I", "arm length", Definition::Length(&["LEFT SHOULDER", "LEFT ELBOW", "LEFT WRIST"])),
    ("J", "thigh circumference", Definition::Circumference { landmark: "LEFT THIGH", axis: LEFT_LEG, segment: "left_leg" }),
    ("K", "calf circumference", Definition::Circumference { landmark: "LEFT CALF", axis: LEFT_LEG, segment: "left_leg" }),
    ("L", "ankle circumference", Definition::Circumference { landmark: "LEFT_ANKLE", axis: LEFT_LEG, segment: "left_leg" }),
    ("M", "height", Definition::Length(&["HEAD TOP", "LEFT HEEL"])),
    ("N", "weight", Definition::BodyWeight),
    ("O", "torso weight", Definition::SegmentWeight("torso")),
    ("P", "left arm weight", Definition::SegmentWeight("left_arm")),
    ("Q", "right arm weight", Definition::SegmentWeight("right_arm")),
];

fn measure_one(mesh: &BodyMesh, density: &DensityModel, def: &Definition) -> Result<(f64, Unit, Method), AnthroError> {
    match def {
        Definition::Circumference { landmark, axis, segment } => {
            let dir = mesh.landmark(axis.1)? - mesh.landmark(axis.0)?;
            let seg = mesh.segments.contains_key(*segment).then_some(*segment);
            Ok((circumference(mesh, landmark, &dir, seg)?, Unit::Meter, Method::Circumference))
        }
        Definition::Length(chain) => Ok((landmark_path_length(mesh, chain)?, Unit::Meter, Method::Length)),
        Definition::BodyWeight => {
            let height = landmark_distance(mesh, "HEAD TOP", "LEFT HEEL")?;
            let volume = mesh_volume(mesh, &VolumeSubset::Whole)?;
            Ok((weight_estimate(volume, height, density)?.weight, Unit::Kilogram, Method::VolumeWeight))
        }
        Definition::SegmentWeight(seg) => {
            let volume = mesh_volume(mesh, &VolumeSubset::Segment(seg.to_string()))?;
            Ok((density.rho * volume, Unit::Kilogram, Method::VolumeWeight))
        }
    }
}

/// All measurements A to Q. Failures are listed in `missing` rather than
/// aborting the report.
pub fn measure_all(mesh: &BodyMesh, density: &DensityModel) -> MeasurementReport {
    let mut values = BTreeMap::new();
    let mut missing = BTreeMap::new();
    for (code, name, def) in DEFINITIONS.iter() {
        match measure_one(mesh, density, def) {
            Ok((value, unit, method)) => {
                values.insert(
                    code.to_string(),
                    Measurement {
                        name: name.to_string(),
                        value,
                        unit,
                        method,
                    },
                );
            }
            Err(e) => {
                missing.insert(code.to_string(), e.to_string());
            }
        }
    }
    let bmi = match (values.get("N"), values.get("M")) {
        (Some(w), Some(h)) => Some(w.value / (h.value * h.value)),
        _ => None,
    };
    MeasurementReport {
        values,
        bmi,
        bmi_category: bmi.map(BmiCategory::of),
        missing,
    }
}

/// Landmark sidecar document: name to vertex index for one mesh topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSidecar {
    pub schema_version: u32,
    pub topology: String,
    pub vertex_count: usize,
    pub landmarks: BTreeMap<String, usize>,
    /// Landmarks whose index is known to be unreliable, with a note.
    #[serde(default)]
    pub flagged: BTreeMap<String, String>,
    /// Vertex sets of named body segments.
    #[serde(default)]
    pub segments: BTreeMap<String, BTreeSet<usize>>,
}

/// Reference landmark table for the 10,475-vertex parametric body topology.
pub fn reference_sidecar() -> LandmarkSidecar {
    serde_json::from_str(include_str!("../data/reference_landmarks.json")).expect("bundled sidecar parses")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn cube() -> BodyMesh {
        let v: Vec<WorldPoint> = (0..8)
            .map(|i| WorldPoint::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64))
            .collect();
        let faces = vec![
            [0, 2, 1],
            [1, 2, 3],
            [4, 5, 6],
            [5, 7, 6],
            [0, 1, 4],
            [1, 5, 4],
            [2, 6, 3],
            [3, 6, 7],
            [0, 4, 2],
            [2, 4, 6],
            [1, 3, 5],
            [3, 7, 5],
        ];
        let landmarks = BTreeMap::from([("A".to_string(), 0), ("B".to_string(), 7)]);
        BodyMesh::new(v, faces, landmarks, BTreeMap::new()).unwrap()
    }

    /// Closed cylinder about z with `n` sides and `rings` levels.
    fn cylinder(r: f64, h: f64, n: usize, rings: usize) -> BodyMesh {
        let mut v = Vec::new();
        for k in 0..rings {
            let z = h * k as f64 / (rings - 1) as f64;
            for j in 0..n {
                let t = 2.0 * PI * j as f64 / n as f64;
                v.push(WorldPoint::new(r * t.cos(), r * t.sin(), z));
            }
        }
        let bottom = v.len();
        v.push(WorldPoint::new(0.0, 0.0, 0.0));
        let top = v.len();
        v.push(WorldPoint::new(0.0, 0.0, h));
        let mut f = Vec::new();
        for k in 0..rings - 1 {
            for j in 0..n {
                let (a, b) = (k * n + j, k * n + (j + 1) % n);
                let (c, d) = (a + n, b + n);
                f.push([a, b, d]);
                f.push([a, d, c]);
            }
        }
        for j in 0..n {
            f.push([bottom, (j + 1) % n, j]);
            let base = (rings - 1) * n;
            f.push([top, base + j, base + (j + 1) % n]);
        }
        let mid = (rings / 2) * n;
        let landmarks = BTreeMap::from([("MID".to_string(), mid)]);
        let segments = BTreeMap::from([("all".to_string(), (0..v.len()).collect())]);
        BodyMesh::new(v, f, landmarks, segments).unwrap()
    }

    #[test]
    fn distances() {
        let mut m = cube();
        assert_eq!(landmark_distance(&m, "A", "A").unwrap(), 0.0);
        m.vertices[7] = WorldPoint::new(1.0, 2.0, 2.0);
        assert!((landmark_distance(&m, "A", "B").unwrap() - 3.0).abs() < 1e-15);
        assert_eq!(
            landmark_distance(&m, "A", "nope").unwrap_err(),
            AnthroError::UnknownLandmark("nope".into())
        );
    }

    #[test]
    fn cube_volume_and_open_cube() {
        let m = cube();
        assert!((mesh_volume(&m, &VolumeSubset::Whole).unwrap() - 1.0).abs() < 1e-12);
        let mut flipped = m.clone();
        for f in flipped.faces.iter_mut() {
            f.swap(1, 2);
        }
        assert!((mesh_volume(&flipped, &VolumeSubset::Whole).unwrap() - 1.0).abs() < 1e-12);
        let mut open = m.clone();
        open.faces.truncate(10);
        assert!(matches!(
            mesh_volume(&open, &VolumeSubset::Whole),
            Err(AnthroError::NotWatertight(_))
        ));
    }

    #[test]
    fn cylinder_slices() {
        let m = cylinder(0.1, 0.6, 128, 13);
        let c = circumference(&m, "MID", &Vector3::z(), None).unwrap();
        assert!((c - 2.0 * PI * 0.1).abs() / (2.0 * PI * 0.1) < 0.01);

        // 45 degree slice: ellipse with semi-axes r and r*sqrt(2)
        let (a, b) = (0.1 * 2f64.sqrt(), 0.1);
        let h = ((a - b) / (a + b)).powi(2);
        let ramanujan = PI * (a + b) * (1.0 + 3.0 * h / (10.0 + (4.0 - 3.0 * h).sqrt()));
        let tilted = circumference(&m, "MID", &Vector3::new(1.0, 0.0, 1.0), None).unwrap();
        assert!((tilted - ramanujan).abs() / ramanujan < 0.015, "{tilted} vs {ramanujan}");

        let far = slice_perimeter(&m, &WorldPoint::new(0.0, 0.0, 5.0), &Vector3::z(), None);
        assert_eq!(far.unwrap_err(), AnthroError::NoIntersection);
    }

    #[test]
    fn capped_segment_volume() {
        let m = cylinder(0.1, 0.6, 64, 7);
        let whole = mesh_volume(&m, &VolumeSubset::Whole).unwrap();
        let polygon = 0.5 * 64.0 * (2.0 * PI / 64.0).sin() * 0.01 * 0.6;
        assert!((whole - polygon).abs() < 1e-12);
        // drop the lower part and its cap; capping restores a closed top piece
        let mut open = m.clone();
        let keep: BTreeSet<usize> = (3 * 64..7 * 64).chain([7 * 64 + 1]).collect();
        open.segments.insert("top".into(), keep);
        let top = mesh_volume(&open, &VolumeSubset::Segment("top".into())).unwrap();
        assert!((top - polygon / 2.0).abs() < 1e-12, "{top}");
    }

    #[test]
    fn sphere_volume() {
        let (r, n_lat, n_lon) = (0.2, 120, 240);
        let mut v = vec![WorldPoint::new(0.0, 0.0, r)];
        for i in 1..n_lat {
            let th = PI * i as f64 / n_lat as f64;
            for j in 0..n_lon {
                let ph = 2.0 * PI * j as f64 / n_lon as f64;
                v.push(WorldPoint::new(r * th.sin() * ph.cos(), r * th.sin() * ph.sin(), r * th.cos()));
            }
        }
        let south = v.len();
        v.push(WorldPoint::new(0.0, 0.0, -r));
        let ring = |i: usize, j: usize| 1 + (i - 1) * n_lon + j % n_lon;
        let mut f = Vec::new();
        for j in 0..n_lon {
            f.push([0, ring(1, j), ring(1, j + 1)]);
            f.push([south, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)]);
        }
        for i in 1..n_lat - 1 {
            for j in 0..n_lon {
                f.push([ring(i, j), ring(i + 1, j), ring(i + 1, j + 1)]);
                f.push([ring(i, j), ring(i + 1, j + 1), ring(i, j + 1)]);
            }
        }
        let m = BodyMesh::new(v, f, BTreeMap::new(), BTreeMap::new()).unwrap();
        let vol = mesh_volume(&m, &VolumeSubset::Whole).unwrap();
        let exact = 4.0 / 3.0 * PI * r.powi(3);
        assert!((vol - exact).abs() / exact < 0.005);
    }

    #[test]
    fn weight_examples() {
        let d = DensityModel::default();
        assert_eq!(d.rho, 985.0);
        let w = weight_estimate(0.075, 1.75, &d).unwrap();
        assert!((w.extracted - 73.875).abs() < 1e-9);
        assert!((w.bmi_extracted - 24.122_448_979_591_837).abs() < 1e-9);
        assert_eq!(w.category, BmiCategory::Normal);
        let expected = 73.875 + (24.122_448_979_591_837 - 21.7) * 3.0625;
        assert!((w.weight - expected).abs() < 1e-9);

        // at the category median the correction vanishes
        let v = 21.7 * 1.75 * 1.75 / 985.0;
        let w = weight_estimate(v, 1.75, &d).unwrap();
        assert!((w.weight - w.extracted).abs() < 1e-9);

        assert_eq!(
            weight_estimate(0.0, 1.7, &d).unwrap_err(),
            AnthroError::NonPositiveInput("volume")
        );
        assert!(DensityModel::new(985.0, [17.0, 30.0, 27.5, 35.0]).is_err());
    }

    #[test]
    fn weight_jumps_only_at_band_edges() {
        let d = DensityModel::default();
        let h: f64 = 1.8;
        let volume_at = |bmi: f64| bmi * h * h / d.rho;
        for (edge, lo, hi) in [(18.5, 17.0, 21.7), (25.0, 21.7, 27.5), (30.0, 27.5, 35.0)] {
            let below = weight_estimate(volume_at(edge - 1e-9), h, &d).unwrap().weight;
            let above = weight_estimate(volume_at(edge), h, &d).unwrap().weight;
            assert!(((below - above) - (hi - lo) * h * h).abs() < 1e-6);
            let a = weight_estimate(volume_at(edge + 0.1), h, &d).unwrap().weight;
            let b = weight_estimate(volume_at(edge + 0.1 + 1e-9), h, &d).unwrap().weight;
            assert!((a - b).abs() < 1e-6);
        }
    }

    fn pose(tilt: f64, knee: f64) -> Vec<Option<WorldPoint>> {
        use Landmark::*;
        let mut p = vec![None; 25];
        for (l, y) in [(LHip, 0.1), (RHip, -0.1)] {
            p[l.index()] = Some(WorldPoint::new(0.0, y, 0.9));
        }
        for (l, y) in [(LShoulder, 0.2), (RShoulder, -0.2)] {
            p[l.index()] = Some(WorldPoint::new(0.5 * tilt.sin(), y, 0.9 + 0.5 * tilt.cos()));
        }
        for (l, y) in [(LAnkle, 0.1), (RAnkle, -0.1)] {
            p[l.index()] = Some(WorldPoint::new(0.8 * knee.sin(), y, 0.9 - 0.8 * knee.cos()));
        }
        p
    }

    #[test]
    fn measurement_frame_selection() {
        let frames = vec![pose(0.3, 0.4), pose(0.2, 0.1), pose(0.0, 0.0), pose(0.5, 0.0)];
        assert_eq!(select_measurement_frame(&frames).unwrap(), 2);
        let bend: Vec<_> = (0..10).map(|i| pose(0.1 * i as f64, 0.0)).collect();
        assert_eq!(select_measurement_frame(&bend).unwrap(), 0);
        let ties = vec![pose(0.0, 0.0), pose(0.0, 0.0)];
        assert_eq!(select_measurement_frame(&ties).unwrap(), 0);
        let mut hipless = pose(0.0, 0.0);
        hipless[Landmark::LHip.index()] = None;
        assert_eq!(
            select_measurement_frame(&[hipless]).unwrap_err(),
            AnthroError::NoValidFrame
        );
    }

    #[test]
    fn reference_sidecar_flags_right_ankle() {
        let s = reference_sidecar();
        assert_eq!(s.vertex_count, 10_475);
        assert_eq!(s.landmarks["HEAD TOP"], 8976);
        assert_eq!(s.landmarks["LEFT HEEL"], 8846);
        assert_eq!(s.landmarks["RIGHT HIP"], s.landmarks["RIGHT_ANKLE"]);
        assert!(s.flagged.contains_key("RIGHT_ANKLE"));
        assert_eq!(s.landmarks.len(), 16);
    }

    proptest! {
        #[test]
        fn scale_equivariance(s in 0.2f64..5.0) {
            let m = cylinder(0.1, 0.6, 48, 9);
            let ms = m.scaled(s);
            let c = circumference(&m, "MID", &Vector3::z(), None).unwrap();
            let cs = circumference(&ms, "MID", &Vector3::z(), None).unwrap();
            prop_assert!((cs - s * c).abs() < 1e-12 * s.max(1.0));
            let v = mesh_volume(&m, &VolumeSubset::Whole).unwrap();
            let vs = mesh_volume(&ms, &VolumeSubset::Whole).unwrap();
            prop_assert!((vs - s.powi(3) * v).abs() < 1e-12 * s.powi(3).max(1.0));
            let d = DensityModel::default();
            prop_assert!((d.rho * vs - s.powi(3) * d.rho * v).abs() < 1e-9 * s.powi(3).max(1.0));
        }

        #[test]
        fn volume_ignores_vertex_order(seed in 0u64..1000) {
            use rand::{seq::SliceRandom, SeedableRng};
            let m = cylinder(0.1, 0.6, 24, 5);
            let mut perm: Vec<usize> = (0..m.vertices.len()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let mut vertices = vec![WorldPoint::origin(); perm.len()];
            for (old, new) in perm.iter().enumerate() {
                vertices[*new] = m.vertices[old];
            }
            let faces = m.faces.iter().map(|f| f.map(|i| perm[i])).collect();
            let shuffled = BodyMesh::new(vertices, faces, BTreeMap::new(), BTreeMap::new()).unwrap();
            let a = mesh_volume(&m, &VolumeSubset::Whole).unwrap();
            let b = mesh_volume(&shuffled, &VolumeSubset::Whole).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
