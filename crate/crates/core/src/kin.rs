//! Articulated skeleton, forward kinematics and weighted least-squares
//! inverse kinematics.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector, Isometry3, Matrix3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filt::MarkerTrajectory;
use crate::rig::WorldPoint;

pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// Damped solver settings.
pub const MAX_ITERATIONS: usize = 100;
pub const STEP_TOLERANCE: f64 = 1e-8;
pub const INITIAL_DAMPING: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinError {
    #[error("invalid skeleton model: {0}")]
    InvalidModel(String),
    #[error("only {0} usable weighted markers, or all collinear; at least 3 non-collinear are required")]
    Unobservable(usize),
    #[error("expected {expected} values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("negative or non-finite weight for marker {0}")]
    InvalidWeight(String),
    #[error("trajectories differ in length: {0}")]
    RaggedTrajectories(String),
    #[error("frame {frame}: {source}")]
    AtFrame {
        frame: usize,
        #[source]
        source: Box<KinError>,
    },
}

/// Joint connecting a segment to its parent. Axes are expressed in the
/// parent frame at the joint and are applied left to right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Joint {
    /// Three translations along the parent axes, then a gimbal rotation.
    Free { axes: [Vector3<f64>; 3] },
    /// Three successive rotations about body-fixed axes.
    Gimbal { axes: [Vector3<f64>; 3] },
    Hinge { axis: Vector3<f64> },
    /// Rotation vector in the parent frame.
    Ball,
    Weld,
}

impl Joint {
    pub fn dof(&self) -> usize {
        match self {
            Joint::Free { .. } => 6,
            Joint::Gimbal { .. } | Joint::Ball => 3,
            Joint::Hinge { .. } => 1,
            Joint::Weld => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub parent: Option<String>,
    /// Joint location in the parent frame at q = 0.
    pub offset: Vector3<f64>,
    pub joint: Joint,
    pub coordinates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coordinate {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualMarker {
    pub name: String,
    pub segment: String,
    pub offset: Vector3<f64>,
}

/// Named joint angle read from one coordinate, reported in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleDefinition {
    pub name: String,
    pub coordinate: String,
    #[serde(default = "one")]
    pub sign: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelDocument {
    schema_version: u32,
    name: String,
    coordinates: Vec<Coordinate>,
    segments: Vec<Segment>,
    markers: Vec<VirtualMarker>,
    angles: Vec<AngleDefinition>,
}

/// A tree of rigid segments rooted at the first segment.
///
/// Segments are listed parents-first; coordinates, markers and angle
/// definitions are validated against them on construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelDocument", into = "ModelDocument")]
pub struct SkeletonModel {
    doc: ModelDocument,
    parent: Vec<Option<usize>>,
    seg_coords: Vec<Vec<usize>>,
    marker_seg: Vec<usize>,
    /// `ancestry[s][m]`: segment `s` is `m` or one of its ancestors
    ancestry: Vec<Vec<bool>>,
    angle_coord: Vec<usize>,
}

impl From<SkeletonModel> for ModelDocument {
    fn from(m: SkeletonModel) -> Self {
        m.doc
    }
}

impl TryFrom<ModelDocument> for SkeletonModel {
    type Error = KinError;

    fn try_from(doc: ModelDocument) -> Result<Self, KinError> {
        SkeletonModel::compile(doc)
    }
}

fn rotation(axis: &Vector3<f64>, angle: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(axis * angle)
}

/// Left Jacobian of SO(3) at rotation vector `phi`.
fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = phi.cross_matrix();
    if theta < 1e-8 {
        return Matrix3::identity() + 0.5 * k;
    }
    let t2 = theta * theta;
    Matrix3::identity() + (1.0 - theta.cos()) / t2 * k + (theta - theta.sin()) / (t2 * theta) * k * k
}

impl SkeletonModel {
    pub fn new(
        name: impl Into<String>,
        coordinates: Vec<Coordinate>,
        segments: Vec<Segment>,
        markers: Vec<VirtualMarker>,
        angles: Vec<AngleDefinition>,
    ) -> Result<Self, KinError> {
        Self::compile(ModelDocument {
            schema_version: MODEL_SCHEMA_VERSION,
            name: name.into(),
            coordinates,
            segments,
            markers,
            angles,
        })
    }

    fn compile(mut doc: ModelDocument) -> Result<Self, KinError> {
        let bad = |m: String| Err(KinError::InvalidModel(m));
        if doc.schema_version != MODEL_SCHEMA_VERSION {
            return bad(format!("unsupported schema version {}", doc.schema_version));
        }
        let mut coord_ix = HashMap::new();
        for (i, c) in doc.coordinates.iter().enumerate() {
            if coord_ix.insert(c.name.clone(), i).is_some() {
                return bad(format!("duplicate coordinate {}", c.name));
            }
            if !(c.min <= 0.0 && 0.0 <= c.max) {
                return bad(format!("coordinate {} bounds exclude the neutral value 0", c.name));
            }
        }
        let mut seg_ix: HashMap<String, usize> = HashMap::new();
        let mut parent = Vec::new();
        let mut seg_coords = Vec::new();
        let mut used = vec![false; doc.coordinates.len()];
        for (i, s) in doc.segments.iter_mut().enumerate() {
            let p = match &s.parent {
                None if i == 0 => None,
                None => return bad(format!("segment {} has no parent but is not the root", s.name)),
                Some(p) => match seg_ix.get(p) {
                    Some(ix) => Some(*ix),
                    None => return bad(format!("segment {} listed before its parent {p}", s.name)),
                },
            };
            if i == 0 && p.is_some() {
                return bad("first segment must be the root".into());
            }
            if seg_ix.insert(s.name.clone(), i).is_some() {
                return bad(format!("duplicate segment {}", s.name));
            }
            if s.coordinates.len() != s.joint.dof() {
                return bad(format!(
                    "segment {} joint needs {} coordinates, has {}",
                    s.name,
                    s.joint.dof(),
                    s.coordinates.len()
                ));
            }
            let normalize = |a: &mut Vector3<f64>| -> Result<(), KinError> {
                let n = a.norm();
                if !(n > 1e-12) {
                    return Err(KinError::InvalidModel(format!("zero joint axis in {}", s.name)));
                }
                *a /= n;
                Ok(())
            };
            match &mut s.joint {
                Joint::Free { axes } | Joint::Gimbal { axes } => {
                    for a in axes.iter_mut() {
                        normalize(a)?;
                    }
                }
                Joint::Hinge { axis } => normalize(axis)?,
                Joint::Ball | Joint::Weld => {}
            }
            let mut ids = Vec::new();
            for c in &s.coordinates {
                let Some(&ix) = coord_ix.get(c) else {
                    return bad(format!("segment {} uses unknown coordinate {c}", s.name));
                };
                if std::mem::replace(&mut used[ix], true) {
                    return bad(format!("coordinate {c} driven by two joints"));
                }
                ids.push(ix);
            }
            parent.push(p);
            seg_coords.push(ids);
        }
        if parent.is_empty() {
            return bad("model has no segments".into());
        }
        if let Some(ix) = used.iter().position(|u| !u) {
            return bad(format!("coordinate {} is not driven by any joint", doc.coordinates[ix].name));
        }
        let mut marker_seg = Vec::new();
        let mut marker_names = HashMap::new();
        for m in &doc.markers {
            let Some(&s) = seg_ix.get(&m.segment) else {
                return bad(format!("marker {} on unknown segment {}", m.name, m.segment));
            };
            if marker_names.insert(m.name.clone(), ()).is_some() {
                return bad(format!("duplicate marker {}", m.name));
            }
            marker_seg.push(s);
        }
        let mut angle_coord = Vec::new();
        for a in &doc.angles {
            let Some(&ix) = coord_ix.get(&a.coordinate) else {
                return bad(format!("angle {} reads unknown coordinate {}", a.name, a.coordinate));
            };
            angle_coord.push(ix);
        }
        let n = parent.len();
        let mut ancestry = vec![vec![false; n]; n];
        for m in 0..n {
            let mut cur = Some(m);
            while let Some(s) = cur {
                ancestry[s][m] = true;
                cur = parent[s];
            }
        }
        Ok(Self {
            doc,
            parent,
            seg_coords,
            marker_seg,
            ancestry,
            angle_coord,
        })
    }

    pub fn name(&self) -> &str {
        &self.doc.name
    }

    pub fn coordinates(&self) -> &[Coordinate] {
        &self.doc.coordinates
    }

    pub fn segments(&self) -> &[Segment] {
        &self.doc.segments
    }

    pub fn markers(&self) -> &[VirtualMarker] {
        &self.doc.markers
    }

    pub fn angles(&self) -> &[AngleDefinition] {
        &self.doc.angles
    }

    pub fn dof(&self) -> usize {
        self.doc.coordinates.len()
    }

    pub fn coordinate_index(&self, name: &str) -> Option<usize> {
        self.doc.coordinates.iter().position(|c| c.name == name)
    }

    pub fn segment_index(&self, name: &str) -> Option<usize> {
        self.doc.segments.iter().position(|s| s.name == name)
    }

    pub fn marker_index(&self, name: &str) -> Option<usize> {
        self.doc.markers.iter().position(|m| m.name == name)
    }

    /// The neutral pose.
    pub fn neutral(&self) -> Vec<f64> {
        vec![0.0; self.dof()]
    }

    pub fn clamp(&self, q: &mut [f64]) {
        for (v, c) in q.iter_mut().zip(&self.doc.coordinates) {
            *v = v.clamp(c.min, c.max);
        }
    }

    pub fn in_bounds(&self, q: &[f64]) -> bool {
        q.len() == self.dof() && q.iter().zip(&self.doc.coordinates).all(|(v, c)| c.min <= *v && *v <= c.max)
    }

    fn check_len(&self, q: &[f64]) -> Result<(), KinError> {
        if q.len() != self.dof() {
            return Err(KinError::DimensionMismatch {
                expected: self.dof(),
                got: q.len(),
            });
        }
        Ok(())
    }

    /// Joint rotation relative to the parent and the joint translation.
    fn joint_motion(&self, s: usize, q: &[f64]) -> (Vector3<f64>, UnitQuaternion<f64>) {
        let seg = &self.doc.segments[s];
        let c = &self.seg_coords[s];
        match &seg.joint {
            Joint::Free { axes } => {
                let t = seg.offset + Vector3::new(q[c[0]], q[c[1]], q[c[2]]);
                let r = rotation(&axes[0], q[c[3]]) * rotation(&axes[1], q[c[4]]) * rotation(&axes[2], q[c[5]]);
                (t, r)
            }
            Joint::Gimbal { axes } => (
                seg.offset,
                rotation(&axes[0], q[c[0]]) * rotation(&axes[1], q[c[1]]) * rotation(&axes[2], q[c[2]]),
            ),
            Joint::Hinge { axis } => (seg.offset, rotation(axis, q[c[0]])),
            Joint::Ball => (
                seg.offset,
                UnitQuaternion::from_scaled_axis(Vector3::new(q[c[0]], q[c[1]], q[c[2]])),
            ),
            Joint::Weld => (seg.offset, UnitQuaternion::identity()),
        }
    }

    /// World pose of every segment, without clamping.
    fn poses_raw(&self, q: &[f64]) -> Vec<Isometry3<f64>> {
        let mut poses: Vec<Isometry3<f64>> = Vec::with_capacity(self.parent.len());
        for s in 0..self.parent.len() {
            let (t, r) = self.joint_motion(s, q);
            let local = Isometry3::from_parts(Translation3::from(t), r);
            let pose = match self.parent[s] {
                Some(p) => poses[p] * local,
                None => local,
            };
            poses.push(pose);
        }
        poses
    }

    fn markers_raw(&self, q: &[f64]) -> Vec<WorldPoint> {
        let poses = self.poses_raw(q);
        self.doc
            .markers
            .iter()
            .zip(&self.marker_seg)
            .map(|(m, s)| poses[*s] * WorldPoint::from(m.offset))
            .collect()
    }

    /// World pose of every segment at `q`, clamped to the bounds.
    pub fn segment_poses(&self, q: &[f64]) -> Result<Vec<Isometry3<f64>>, KinError> {
        self.check_len(q)?;
        let mut q = q.to_vec();
        self.clamp(&mut q);
        Ok(self.poses_raw(&q))
    }

    /// Marker positions in model order at `q`, clamped to the bounds.
    pub fn forward_kinematics(&self, q: &[f64]) -> Result<Vec<WorldPoint>, KinError> {
        self.check_len(q)?;
        let mut q = q.to_vec();
        self.clamp(&mut q);
        Ok(self.markers_raw(&q))
    }

    /// Marker positions keyed by name.
    pub fn marker_map(&self, q: &[f64]) -> Result<BTreeMap<String, WorldPoint>, KinError> {
        Ok(self
            .doc
            .markers
            .iter()
            .map(|m| m.name.clone())
            .zip(self.forward_kinematics(q)?)
            .collect())
    }

    /// Analytic Jacobian of the stacked marker positions (3 rows per marker)
    /// with respect to `q`.
    pub fn jacobian(&self, q: &[f64]) -> Result<DMatrix<f64>, KinError> {
        self.check_len(q)?;
        let poses = self.poses_raw(q);
        let markers: Vec<WorldPoint> = self
            .doc
            .markers
            .iter()
            .zip(&self.marker_seg)
            .map(|(m, s)| poses[*s] * WorldPoint::from(m.offset))
            .collect();
        let mut jac = DMatrix::zeros(3 * markers.len(), self.dof());
        for s in 0..self.parent.len() {
            let parent_rot = self.parent[s].map(|p| poses[p].rotation).unwrap_or_else(UnitQuaternion::identity);
            let pivot = poses[s].translation.vector;
            let c = &self.seg_coords[s];
            // (coordinate, world direction, rotational?)
            let mut columns: Vec<(usize, Vector3<f64>, bool)> = Vec::new();
            match &self.doc.segments[s].joint {
                Joint::Free { axes } => {
                    for k in 0..3 {
                        columns.push((c[k], parent_rot * Vector3::ith(k, 1.0), false));
                    }
                    let mut acc = parent_rot;
                    for k in 0..3 {
                        columns.push((c[3 + k], acc * axes[k], true));
                        acc *= rotation(&axes[k], q[c[3 + k]]);
                    }
                }
                Joint::Gimbal { axes } => {
                    let mut acc = parent_rot;
                    for k in 0..3 {
                        columns.push((c[k], acc * axes[k], true));
                        acc *= rotation(&axes[k], q[c[k]]);
                    }
                }
                Joint::Hinge { axis } => columns.push((c[0], parent_rot * axis, true)),
                Joint::Ball => {
                    let jl = so3_left_jacobian(&Vector3::new(q[c[0]], q[c[1]], q[c[2]]));
                    for k in 0..3 {
                        columns.push((c[k], parent_rot * jl.column(k).into_owned(), true));
                    }
                }
                Joint::Weld => {}
            }
            for (m, x) in markers.iter().enumerate() {
                if !self.ancestry[s][self.marker_seg[m]] {
                    continue;
                }
                for (col, dir, rotational) in &columns {
                    let d = if *rotational { dir.cross(&(x.coords - pivot)) } else { *dir };
                    for r in 0..3 {
                        jac[(3 * m + r, *col)] = d[r];
                    }
                }
            }
        }
        Ok(jac)
    }

    /// Central finite-difference Jacobian, for checking [`Self::jacobian`].
    pub fn jacobian_numeric(&self, q: &[f64], h: f64) -> Result<DMatrix<f64>, KinError> {
        self.check_len(q)?;
        let mut jac = DMatrix::zeros(3 * self.doc.markers.len(), self.dof());
        let mut qp = q.to_vec();
        for j in 0..self.dof() {
            qp[j] = q[j] + h;
            let plus = self.markers_raw(&qp);
            qp[j] = q[j] - h;
            let minus = self.markers_raw(&qp);
            qp[j] = q[j];
            for (m, (a, b)) in plus.iter().zip(&minus).enumerate() {
                let d = (a - b) / (2.0 * h);
                for r in 0..3 {
                    jac[(3 * m + r, j)] = d[r];
                }
            }
        }
        Ok(jac)
    }
}

/// Rotation minimizing the weighted distance between `local` points mapped
/// by the result and `world` points (both centred). `None` when the points
/// are collinear.
fn kabsch(local: &[Vector3<f64>], world: &[Vector3<f64>]) -> Option<(UnitQuaternion<f64>, Vector3<f64>, Vector3<f64>)> {
    if local.len() < 3 {
        return None;
    }
    let n = local.len() as f64;
    let cl = local.iter().sum::<Vector3<f64>>() / n;
    let cw = world.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (l, w) in local.iter().zip(world) {
        h += (l - cl) * (w - cw).transpose();
    }
    let svd = h.svd(true, true);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if sv[1] <= 1e-9 * sv[0].max(1e-300) {
        return None;
    }
    let (u, v_t) = (svd.u?, svd.v_t?);
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let rot = UnitQuaternion::from_matrix(&r);
    Some((rot, cl, cw))
}

/// Angles `(a, b, c)` with `rel = rot(a0, a) rot(a1, b) rot(a2, c)` for
/// mutually orthogonal axes.
fn gimbal_angles(axes: &[Vector3<f64>; 3], rel: &UnitQuaternion<f64>) -> Option<[f64; 3]> {
    let mut basis = Matrix3::from_columns(axes);
    if (basis.transpose() * basis - Matrix3::identity()).amax() > 1e-9 {
        return None;
    }
    let mut flip = 1.0;
    if basis.determinant() < 0.0 {
        basis.set_column(2, &-axes[2]);
        flip = -1.0;
    }
    // in the axes' basis the sequence is x, y, z
    let r = basis.transpose() * rel.to_rotation_matrix().into_inner() * basis;
    let b = r[(0, 2)].clamp(-1.0, 1.0).asin();
    let a = (-r[(1, 2)]).atan2(r[(2, 2)]);
    let c = (-r[(0, 1)]).atan2(r[(0, 0)]);
    Some([a, b, flip * c])
}

/// Starting pose for [`solve_frame`]: each segment with three or more
/// non-collinear observed markers is oriented by a least-squares rigid fit
/// and its joint coordinates read from the rotation relative to its parent.
/// Other coordinates stay neutral.
pub fn initial_guess(model: &SkeletonModel, observed: &[Option<WorldPoint>]) -> Vec<f64> {
    let mut q = model.neutral();
    if observed.len() != model.markers().len() {
        return q;
    }
    for s in 0..model.parent.len() {
        let (local, world): (Vec<Vector3<f64>>, Vec<Vector3<f64>>) = model
            .doc
            .markers
            .iter()
            .zip(&model.marker_seg)
            .zip(observed)
            .filter(|((_, seg), o)| **seg == s && o.is_some_and(|p| p.coords.iter().all(|c| c.is_finite())))
            .map(|((m, _), o)| (m.offset, o.unwrap().coords))
            .unzip();
        let Some((world_rot, cl, cw)) = kabsch(&local, &world) else {
            continue;
        };
        let poses = model.poses_raw(&q);
        let (parent_rot, parent_pose) = match model.parent[s] {
            Some(p) => (poses[p].rotation, poses[p]),
            None => (UnitQuaternion::identity(), Isometry3::identity()),
        };
        let rel = parent_rot.inverse() * world_rot;
        let seg = &model.doc.segments[s];
        let c = &model.seg_coords[s];
        match &seg.joint {
            Joint::Free { axes } => {
                let origin = cw - world_rot * cl;
                let t = parent_pose.inverse_transform_point(&WorldPoint::from(origin)).coords - seg.offset;
                for k in 0..3 {
                    q[c[k]] = t[k];
                }
                if let Some(angles) = gimbal_angles(axes, &rel) {
                    for k in 0..3 {
                        q[c[3 + k]] = angles[k];
                    }
                }
            }
            Joint::Gimbal { axes } => {
                if let Some(angles) = gimbal_angles(axes, &rel) {
                    for k in 0..3 {
                        q[c[k]] = angles[k];
                    }
                }
            }
            Joint::Hinge { axis } => {
                q[c[0]] = 2.0 * rel.vector().dot(axis).atan2(rel.scalar());
            }
            Joint::Ball => {
                let v = rel.scaled_axis();
                for k in 0..3 {
                    q[c[k]] = v[k];
                }
            }
            Joint::Weld => {}
        }
        model.clamp(&mut q);
    }
    q
}

/// Per-marker weights; markers without an entry get `default`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IkWeights {
    pub default: f64,
    #[serde(default)]
    pub overrides: BTreeMap<String, f64>,
}

impl Default for IkWeights {
    fn default() -> Self {
        Self {
            default: 1.0,
            overrides: BTreeMap::new(),
        }
    }
}

impl IkWeights {
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            default: self.default * s,
            overrides: self.overrides.iter().map(|(k, v)| (k.clone(), v * s)).collect(),
        }
    }

    /// Weights in model marker order.
    pub fn resolve(&self, model: &SkeletonModel) -> Result<Vec<f64>, KinError> {
        model
            .markers()
            .iter()
            .map(|m| {
                let w = self.overrides.get(&m.name).copied().unwrap_or(self.default);
                if w.is_finite() && w >= 0.0 {
                    Ok(w)
                } else {
                    Err(KinError::InvalidWeight(m.name.clone()))
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IkSolution {
    pub q: Vec<f64>,
    /// sqrt(sum w |e|^2 / sum w) over the used markers, meters
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Weighted objective after each accepted step, starting with the
    /// initial value.
    pub objective_history: Vec<f64>,
}

fn objective(model: &SkeletonModel, q: &[f64], observed: &[Option<WorldPoint>], w: &[f64]) -> (f64, DVector<f64>) {
    let predicted = model.markers_raw(q);
    let mut r = DVector::zeros(3 * predicted.len());
    let mut f = 0.0;
    for (m, (p, o)) in predicted.iter().zip(observed).enumerate() {
        if let Some(o) = o {
            if w[m] > 0.0 {
                let e = o - p;
                f += w[m] * e.norm_squared();
                for k in 0..3 {
                    r[3 * m + k] = e[k];
                }
            }
        }
    }
    (f, r)
}

fn check_observable(observed: &[Option<WorldPoint>], w: &[f64]) -> Result<(), KinError> {
    let pts: Vec<WorldPoint> = observed
        .iter()
        .zip(w)
        .filter(|(o, w)| o.is_some() && **w > 0.0)
        .filter_map(|(o, _)| *o)
        .filter(|p| p.coords.iter().all(|c| c.is_finite()))
        .collect();
    if pts.len() < 3 {
        return Err(KinError::Unobservable(pts.len()));
    }
    let centroid = pts.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / pts.len() as f64;
    let centred = DMatrix::from_fn(3, pts.len(), |r, c| pts[c][r] - centroid[r]);
    let mut sv: Vec<f64> = centred.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if sv[1] <= 1e-9 * sv[0].max(1e-300) {
        return Err(KinError::Unobservable(pts.len()));
    }
    Ok(())
}

/// Minimizes `sum_i w_i |x_i_obs - x_i(q)|^2` over the observed markers with
/// Levenberg damping.
///
/// `observed` follows the model's marker order; `None` or zero weight drops
/// a marker. When no step below the tolerance is reached within the
/// iteration budget, the best iterate is returned with `converged = false`.
pub fn solve_frame(
    model: &SkeletonModel,
    weights: &IkWeights,
    observed: &[Option<WorldPoint>],
    q_init: &[f64],
) -> Result<IkSolution, KinError> {
    model.check_len(q_init)?;
    if observed.len() != model.markers().len() {
        return Err(KinError::DimensionMismatch {
            expected: model.markers().len(),
            got: observed.len(),
        });
    }
    let w = weights.resolve(model)?;
    check_observable(observed, &w)?;
    let wsum: f64 = w
        .iter()
        .zip(observed)
        .filter(|(_, o)| o.is_some())
        .map(|(w, _)| *w)
        .sum();

    let n = model.dof();
    let mut q = q_init.to_vec();
    model.clamp(&mut q);
    let (mut f, mut r) = objective(model, &q, observed, &w);
    let mut history = vec![f];
    let mut lambda = INITIAL_DAMPING;
    let mut converged = false;
    let mut iterations = 0;
    let row_weight: Vec<f64> = (0..3 * w.len())
        .map(|i| if observed[i / 3].is_some() { w[i / 3] } else { 0.0 })
        .collect();

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let jac = model.jacobian(&q)?;
        let mut jtw = jac.transpose();
        for (i, rw) in row_weight.iter().enumerate() {
            jtw.column_mut(i).scale_mut(*rw);
        }
        let jtj = &jtw * &jac;
        let g = &jtw * &r;
        // damping proportional to the largest curvature keeps the step
        // sequence invariant to a global rescaling of the weights
        let scale = jtj.diagonal().max().max(f64::MIN_POSITIVE);
        let mut a = jtj.clone();
        for i in 0..n {
            a[(i, i)] += lambda * scale;
        }
        let Some(delta) = a.cholesky().map(|c| c.solve(&g)) else {
            lambda *= 10.0;
            continue;
        };
        let mut candidate: Vec<f64> = q.iter().zip(delta.iter()).map(|(a, b)| a + b).collect();
        model.clamp(&mut candidate);
        let step = q
            .iter()
            .zip(&candidate)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let (fc, rc) = objective(model, &candidate, observed, &w);
        if fc <= f {
            q = candidate;
            f = fc;
            r = rc;
            history.push(f);
            lambda = (lambda / 10.0).max(1e-12);
            if step < STEP_TOLERANCE {
                converged = true;
                break;
            }
        } else {
            if step < STEP_TOLERANCE {
                converged = true;
                break;
            }
            lambda *= 10.0;
        }
    }
    Ok(IkSolution {
        q,
        residual: if wsum > 0.0 { (f / wsum).sqrt() } else { 0.0 },
        iterations,
        converged,
        objective_history: history,
    })
}

/// Named angles at `q`, in degrees, in model order.
pub fn joint_angles(q: &[f64], model: &SkeletonModel) -> Vec<(String, f64)> {
    model
        .doc
        .angles
        .iter()
        .zip(&model.angle_coord)
        .map(|(a, c)| (a.name.clone(), a.sign * q[*c].to_degrees()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameStatus {
    Converged,
    NonConvergence,
    /// previous solution carried forward
    Unobservable,
}

/// Joint angles over a sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointAngleSeries {
    pub rate_hz: f64,
    pub frames: Vec<usize>,
    pub names: Vec<String>,
    /// `values[frame][angle]`, degrees
    pub values: Vec<Vec<f64>>,
    pub residual: Vec<f64>,
    pub status: Vec<FrameStatus>,
    pub q: Vec<Vec<f64>>,
}

impl JointAngleSeries {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn angle(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.names.iter().position(|n| n == name)?;
        Some(self.values.iter().map(|v| v[k]).collect())
    }

    pub fn time(&self, i: usize) -> f64 {
        self.frames[i] as f64 / self.rate_hz
    }
}

/// Solves every frame of a marker trajectory set. The first frame starts
/// from [`initial_guess`], later frames from the previous solution. Gap
/// samples carry zero weight.
pub fn solve_sequence(
    model: &SkeletonModel,
    weights: &IkWeights,
    trajectories: &[MarkerTrajectory],
) -> Result<JointAngleSeries, KinError> {
    let first = trajectories
        .first()
        .ok_or_else(|| KinError::RaggedTrajectories("no trajectories".into()))?;
    let n = first.len();
    if let Some(t) = trajectories.iter().find(|t| t.len() != n || t.frames != first.frames) {
        return Err(KinError::RaggedTrajectories(format!(
            "{} has {} frames, {} has {n}",
            t.marker_id,
            t.len(),
            first.marker_id
        )));
    }
    let by_name: HashMap<&str, &MarkerTrajectory> =
        trajectories.iter().map(|t| (t.marker_id.as_str(), t)).collect();
    let sources: Vec<Option<&MarkerTrajectory>> =
        model.markers().iter().map(|m| by_name.get(m.name.as_str()).copied()).collect();

    let mut q = model.neutral();
    let mut series = JointAngleSeries {
        rate_hz: first.rate_hz,
        frames: first.frames.clone(),
        names: model.angles().iter().map(|a| a.name.clone()).collect(),
        values: Vec::with_capacity(n),
        residual: Vec::with_capacity(n),
        status: Vec::with_capacity(n),
        q: Vec::with_capacity(n),
    };
    for i in 0..n {
        let observed: Vec<Option<WorldPoint>> = sources
            .iter()
            .map(|s| s.and_then(|t| (!t.gap_mask[i]).then(|| WorldPoint::from(t.positions[i]))))
            .collect();
        if i == 0 {
            q = initial_guess(model, &observed);
        }
        let (status, residual) = match solve_frame(model, weights, &observed, &q) {
            Ok(sol) => {
                q = sol.q;
                let status = if sol.converged {
                    FrameStatus::Converged
                } else {
                    FrameStatus::NonConvergence
                };
                (status, sol.residual)
            }
            Err(KinError::Unobservable(k)) if i > 0 => {
                let _ = k;
                (FrameStatus::Unobservable, f64::NAN)
            }
            Err(e) => {
                return Err(KinError::AtFrame {
                    frame: first.frames[i],
                    source: Box::new(e),
                })
            }
        };
        series.values.push(joint_angles(&q, model).into_iter().map(|(_, v)| v).collect());
        series.residual.push(residual);
        series.status.push(status);
        series.q.push(q.clone());
    }
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use std::f64::consts::FRAC_PI_2;

    fn coord(name: &str, lo: f64, hi: f64) -> Coordinate {
        Coordinate {
            name: name.into(),
            min: lo,
            max: hi,
        }
    }

    fn marker(name: &str, seg: &str, x: f64, y: f64, z: f64) -> VirtualMarker {
        VirtualMarker {
            name: name.into(),
            segment: seg.into(),
            offset: Vector3::new(x, y, z),
        }
    }

    /// Pelvis with a free joint, a gimbal hip, hinge knee and a ball shoulder.
    fn test_skeleton() -> SkeletonModel {
        let xyz = [Vector3::z(), Vector3::x(), Vector3::y()];
        let coords = vec![
            coord("tx", -5.0, 5.0),
            coord("ty", -5.0, 5.0),
            coord("tz", -5.0, 5.0),
            coord("rz", -3.0, 3.0),
            coord("rx", -1.0, 1.0),
            coord("ry", -1.2, 1.2),
            coord("hip_flex", -0.5, 2.0),
            coord("hip_add", -0.6, 0.6),
            coord("hip_rot", -0.8, 0.8),
            coord("knee", 0.0, 2.3),
            coord("sh_x", -1.0, 1.0),
            coord("sh_y", -1.0, 1.0),
            coord("sh_z", -1.0, 1.0),
        ];
        let segments = vec![
            Segment {
                name: "pelvis".into(),
                parent: None,
                offset: Vector3::zeros(),
                joint: Joint::Free { axes: xyz },
                coordinates: ["tx", "ty", "tz", "rz", "rx", "ry"].map(String::from).to_vec(),
            },
            Segment {
                name: "thigh".into(),
                parent: Some("pelvis".into()),
                offset: Vector3::new(0.0, -0.1, 0.0),
                joint: Joint::Gimbal {
                    axes: [-Vector3::y(), Vector3::x(), Vector3::z()],
                },
                coordinates: ["hip_flex", "hip_add", "hip_rot"].map(String::from).to_vec(),
            },
            Segment {
                name: "shank".into(),
                parent: Some("thigh".into()),
                offset: Vector3::new(0.0, 0.0, -0.4),
                joint: Joint::Hinge { axis: Vector3::y() },
                coordinates: vec!["knee".into()],
            },
            Segment {
                name: "arm".into(),
                parent: Some("pelvis".into()),
                offset: Vector3::new(0.0, 0.2, 0.5),
                joint: Joint::Ball,
                coordinates: ["sh_x", "sh_y", "sh_z"].map(String::from).to_vec(),
            },
        ];
        let markers = vec![
            marker("P1", "pelvis", 0.1, 0.1, 0.05),
            marker("P2", "pelvis", 0.1, -0.1, 0.05),
            marker("P3", "pelvis", -0.1, 0.0, 0.08),
            marker("T1", "thigh", 0.0, -0.06, -0.2),
            marker("T2", "thigh", 0.06, 0.0, -0.15),
            marker("T3", "thigh", 0.0, -0.05, -0.4),
            marker("S1", "shank", 0.0, -0.05, -0.2),
            marker("S2", "shank", 0.05, 0.0, -0.25),
            marker("S3", "shank", 0.0, 0.0, -0.42),
            marker("A1", "arm", 0.0, 0.05, -0.1),
            marker("A2", "arm", 0.05, 0.0, -0.2),
            marker("A3", "arm", 0.0, 0.0, -0.3),
        ];
        let angles = vec![
            AngleDefinition {
                name: "hip_flexion".into(),
                coordinate: "hip_flex".into(),
                sign: 1.0,
            },
            AngleDefinition {
                name: "knee".into(),
                coordinate: "knee".into(),
                sign: 1.0,
            },
        ];
        SkeletonModel::new("test", coords, segments, markers, angles).unwrap()
    }

    fn random_q(model: &SkeletonModel, rng: &mut impl Rng, shrink: f64) -> Vec<f64> {
        model
            .coordinates()
            .iter()
            .map(|c| rng.random_range(c.min * shrink..=c.max * shrink))
            .collect()
    }

    fn exact(model: &SkeletonModel, q: &[f64]) -> Vec<Option<WorldPoint>> {
        model.forward_kinematics(q).unwrap().into_iter().map(Some).collect()
    }

    #[test]
    fn neutral_and_translation() {
        let m = test_skeleton();
        let neutral = m.forward_kinematics(&m.neutral()).unwrap();
        assert!((neutral[8] - WorldPoint::new(0.0, -0.1, -0.82)).norm() < 1e-12);
        let mut q = m.neutral();
        q[0] = 1.0;
        let moved = m.forward_kinematics(&q).unwrap();
        for (a, b) in moved.iter().zip(&neutral) {
            assert!((a - b - Vector3::x()).norm() < 1e-12);
        }
    }

    #[test]
    fn quarter_turn_hinge() {
        let coords = vec![coord("a", -4.0, 4.0)];
        let segs = vec![
            Segment {
                name: "base".into(),
                parent: None,
                offset: Vector3::zeros(),
                joint: Joint::Weld,
                coordinates: vec![],
            },
            Segment {
                name: "link".into(),
                parent: Some("base".into()),
                offset: Vector3::zeros(),
                joint: Joint::Hinge { axis: Vector3::z() },
                coordinates: vec!["a".into()],
            },
        ];
        let m = SkeletonModel::new("h", coords, segs, vec![marker("tip", "link", 1.0, 0.0, 0.0)], vec![]).unwrap();
        let tip = m.forward_kinematics(&[FRAC_PI_2]).unwrap()[0];
        assert!((tip - WorldPoint::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn flexion_signs() {
        let m = test_skeleton();
        let mut q = m.neutral();
        q[m.coordinate_index("hip_flex").unwrap()] = 0.5;
        let knee_marker = m.forward_kinematics(&q).unwrap()[5];
        assert!(knee_marker.x > 0.1, "hip flexion moves the knee forward");
        q[m.coordinate_index("knee").unwrap()] = 1.0;
        let ankle = m.forward_kinematics(&q).unwrap()[8];
        assert!(ankle.x < knee_marker.x, "knee flexion moves the ankle back");
        let angles = joint_angles(&q, &m);
        assert!((angles[0].1 - 0.5f64.to_degrees()).abs() < 1e-12);
        assert!((angles[1].1 - 1.0f64.to_degrees()).abs() < 1e-12);
    }

    #[test]
    fn out_of_bounds_is_clamped() {
        let m = test_skeleton();
        let mut q = m.neutral();
        q[9] = 5.0;
        let mut clamped = q.clone();
        clamped[9] = 2.3;
        assert_eq!(m.forward_kinematics(&q).unwrap(), m.forward_kinematics(&clamped).unwrap());
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let m = test_skeleton();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let q = random_q(&m, &mut rng, 1.0);
            let a = m.jacobian(&q).unwrap();
            let n = m.jacobian_numeric(&q, 1e-6).unwrap();
            assert!((a - n).amax() < 1e-6);
        }
    }

    #[test]
    fn round_trip_random_poses() {
        let m = test_skeleton();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let truth = random_q(&m, &mut rng, 0.8);
            let obs = exact(&m, &truth);
            let sol = solve_frame(&m, &IkWeights::default(), &obs, &initial_guess(&m, &obs)).unwrap();
            let err = sol.q.iter().zip(&truth).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-6, "{err}");
            assert!(sol.residual < 1e-9);
            assert!(sol.converged);
            assert!(sol.objective_history.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn weight_scaling_keeps_argmin() {
        let m = test_skeleton();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 0.003).unwrap();
        let truth = random_q(&m, &mut rng, 0.5);
        let obs: Vec<Option<WorldPoint>> = exact(&m, &truth)
            .into_iter()
            .map(|p| p.map(|p| p + Vector3::from_fn(|_, _| noise.sample(&mut rng))))
            .collect();
        let mut weights = IkWeights::default();
        weights.overrides.insert("T2".into(), 3.0);
        let a = solve_frame(&m, &weights, &obs, &m.neutral()).unwrap();
        let b = solve_frame(&m, &weights.scaled(7.5), &obs, &m.neutral()).unwrap();
        for (x, y) in a.q.iter().zip(&b.q) {
            assert!((x - y).abs() < 1e-8);
        }
        let fa = a.objective_history.last().unwrap();
        let fb = b.objective_history.last().unwrap();
        assert!((fb / fa - 7.5).abs() < 1e-6);
        // residual is normalized by the weight sum
        assert!((a.residual - b.residual).abs() < 1e-9);
    }

    #[test]
    fn rigid_motion_changes_only_the_root() {
        let m = test_skeleton();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth = random_q(&m, &mut rng, 0.5);
        let obs = exact(&m, &truth);
        let g = Isometry3::new(Vector3::new(0.4, -1.1, 0.2), Vector3::z() * 0.7);
        let moved: Vec<Option<WorldPoint>> = obs.iter().map(|p| p.map(|p| g * p)).collect();
        let a = solve_frame(&m, &IkWeights::default(), &obs, &m.neutral()).unwrap();
        let b = solve_frame(&m, &IkWeights::default(), &moved, &m.neutral()).unwrap();
        for j in 6..m.dof() {
            assert!((a.q[j] - b.q[j]).abs() < 1e-6);
        }
        assert!((b.q[3] - a.q[3] - 0.7).abs() < 1e-6);
    }

    #[test]
    fn noisy_markers_give_noise_level_residual() {
        let m = test_skeleton();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 0.003).unwrap();
        let mut worst_angle: f64 = 0.0;
        for _ in 0..20 {
            let truth = random_q(&m, &mut rng, 0.5);
            let obs: Vec<Option<WorldPoint>> = exact(&m, &truth)
                .into_iter()
                .map(|p| p.map(|p| p + Vector3::from_fn(|_, _| noise.sample(&mut rng))))
                .collect();
            let sol = solve_frame(&m, &IkWeights::default(), &obs, &m.neutral()).unwrap();
            assert!(sol.residual < 0.006 && sol.residual > 0.001, "{}", sol.residual);
            for j in [6, 9] {
                worst_angle = worst_angle.max((sol.q[j] - truth[j]).abs().to_degrees());
            }
        }
        assert!(worst_angle < 3.0, "{worst_angle}");
    }

    #[test]
    fn too_few_markers_is_unobservable() {
        let m = test_skeleton();
        let mut obs = exact(&m, &m.neutral());
        for o in obs.iter_mut().skip(2) {
            *o = None;
        }
        assert_eq!(
            solve_frame(&m, &IkWeights::default(), &obs, &m.neutral()).unwrap_err(),
            KinError::Unobservable(2)
        );
        let mut line = vec![None; obs.len()];
        for (i, x) in [0.0, 0.1, 0.2].iter().enumerate() {
            line[i] = Some(WorldPoint::new(*x, 0.0, 0.0));
        }
        assert!(matches!(
            solve_frame(&m, &IkWeights::default(), &line, &m.neutral()),
            Err(KinError::Unobservable(3))
        ));
    }

    #[test]
    fn sequence_warm_starts_and_flags() {
        let m = test_skeleton();
        let n = 30;
        let truth: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut q = m.neutral();
                q[0] = 0.02 * i as f64;
                q[m.coordinate_index("knee").unwrap()] = 0.03 * i as f64;
                q
            })
            .collect();
        let trajs: Vec<MarkerTrajectory> = m
            .markers()
            .iter()
            .enumerate()
            .map(|(k, mk)| {
                let pos = truth.iter().map(|q| m.forward_kinematics(q).unwrap()[k].coords).collect();
                MarkerTrajectory::dense(mk.name.clone(), pos, 30.0).unwrap()
            })
            .collect();
        let series = solve_sequence(&m, &IkWeights::default(), &trajs).unwrap();
        assert_eq!(series.len(), n);
        let knee = series.angle("knee").unwrap();
        for (i, k) in knee.iter().enumerate() {
            assert!((k - (0.03 * i as f64).to_degrees()).abs() < 1e-6);
        }
        assert!(series.status.iter().all(|s| *s == FrameStatus::Converged));
    }

    #[test]
    fn model_json_round_trip_and_validation() {
        let m = test_skeleton();
        let s = serde_json::to_string(&m).unwrap();
        let back: SkeletonModel = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        let broken = s.replace("\"segment\":\"arm\"", "\"segment\":\"wing\"");
        assert!(serde_json::from_str::<SkeletonModel>(&broken).is_err());
    }
}
