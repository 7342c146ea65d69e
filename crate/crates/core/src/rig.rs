//! Pinhole camera geometry shared by calibration, triangulation and the
//! synthetic rig.
//!
//! World frame is right-handed, Z up, in meters. A camera maps a world point
//! `X` to camera coordinates `R (X - C)`, divides by depth and applies the
//! intrinsic matrix `K`. The equivalent 3x4 projection matrix is
//! `A = K [R | -R C]`.

use nalgebra::{Isometry3, Matrix3, Matrix3x4, Point3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A 3D point in the world frame, meters.
pub type WorldPoint = Point3<f64>;

/// Homogeneous depth below which a point is treated as lying on the
/// principal plane.
pub const MIN_HOMOGENEOUS_DEPTH: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RigError {
    #[error("point lies on the principal plane of camera `{0}`")]
    PointAtInfinity(String),
    #[error("rotation of camera `{id}` is not orthonormal (deviation {deviation:e})")]
    NotOrthonormal { id: String, deviation: f64 },
    #[error("rotation of camera `{0}` is a reflection")]
    ImproperRotation(String),
    #[error("camera `{id}`: {reason}")]
    InvalidIntrinsics { id: String, reason: String },
    #[error("camera `{id}`: at most 5 distortion coefficients are supported, got {len}")]
    TooManyDistortionCoefficients { id: String, len: usize },
    #[error("projection matrix is rank deficient")]
    RankDeficient,
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("unknown camera `{0}`")]
    UnknownCamera(String),
    #[error("duplicate camera id `{0}`")]
    DuplicateCamera(String),
}

/// A 2D detection or projection in pixels with a confidence score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub uv: Vector2<f64>,
    pub confidence: f64,
}

impl PixelPoint {
    pub fn new(u: f64, v: f64, confidence: f64) -> Self {
        Self {
            uv: Vector2::new(u, v),
            confidence,
        }
    }

    pub fn u(&self) -> f64 {
        self.uv.x
    }

    pub fn v(&self) -> f64 {
        self.uv.y
    }

    pub fn is_valid(&self) -> bool {
        self.uv.iter().all(|c| c.is_finite()) && (0.0..=1.0).contains(&self.confidence)
    }
}

/// Brown-Conrady lens distortion in normalized image coordinates.
///
/// Coefficients follow the usual `[k1, k2, p1, p2, k3]` ordering; missing
/// trailing entries are zero.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Distortion {
    coefficients: Vec<f64>,
}

impl Distortion {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(coefficients: Vec<f64>) -> Option<Self> {
        (coefficients.len() <= 5).then_some(Self { coefficients })
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn is_none(&self) -> bool {
        self.coefficients.iter().all(|c| *c == 0.0)
    }

    fn coeff(&self, i: usize) -> f64 {
        self.coefficients.get(i).copied().unwrap_or(0.0)
    }

    /// Maps an ideal normalized coordinate to its distorted location.
    pub fn distort(&self, p: Vector2<f64>) -> Vector2<f64> {
        if self.is_none() {
            return p;
        }
        let (k1, k2, p1, p2, k3) = (
            self.coeff(0),
            self.coeff(1),
            self.coeff(2),
            self.coeff(3),
            self.coeff(4),
        );
        let (x, y) = (p.x, p.y);
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3));
        Vector2::new(
            x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x),
            y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y,
        )
    }

    /// Inverts [`Distortion::distort`] by fixed-point iteration.
    pub fn undistort(&self, distorted: Vector2<f64>) -> Vector2<f64> {
        if self.is_none() {
            return distorted;
        }
        let mut p = distorted;
        for _ in 0..50 {
            let err = self.distort(p) - distorted;
            if err.norm() < 1e-15 {
                break;
            }
            p -= err;
        }
        p
    }
}

/// A 3x4 homogeneous projection matrix, stored with unit Euclidean norm of
/// its last row and the sign that gives points in front of the camera a
/// positive homogeneous depth.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix(Matrix3x4<f64>);

impl ProjectionMatrix {
    pub fn new(a: Matrix3x4<f64>) -> Result<Self, RigError> {
        if a.iter().any(|v| !v.is_finite()) {
            return Err(RigError::NonFinite);
        }
        if a.rank(1e-12 * a.norm().max(f64::MIN_POSITIVE)) < 3 {
            return Err(RigError::RankDeficient);
        }
        let last_norm = a.row(2).fixed_columns::<3>(0).norm();
        if last_norm <= f64::EPSILON * a.norm() {
            return Err(RigError::RankDeficient);
        }
        let mut a = a / last_norm;
        if a.fixed_columns::<3>(0).determinant() < 0.0 {
            a = -a;
        }
        Ok(Self(a))
    }

    pub fn matrix(&self) -> &Matrix3x4<f64> {
        &self.0
    }

    pub fn left_block(&self) -> Matrix3<f64> {
        self.0.fixed_columns::<3>(0).into_owned()
    }

    /// Projects a world point without lens distortion.
    pub fn project(&self, point: &WorldPoint) -> Result<Vector2<f64>, RigError> {
        project_homogeneous(&self.0, point).ok_or_else(|| RigError::PointAtInfinity(String::new()))
    }

    /// Largest relative element-wise difference after both matrices are
    /// brought to the same scale and sign.
    pub fn relative_difference(&self, other: &ProjectionMatrix) -> f64 {
        let scale = self.0.norm().max(f64::MIN_POSITIVE);
        (self.0 - other.0).amax() / scale
    }
}

/// Dehomogenizes `a * (x, y, z, 1)`; `None` when the point is on the
/// principal plane. Works for any scale of `a`.
pub fn project_homogeneous(a: &Matrix3x4<f64>, point: &WorldPoint) -> Option<Vector2<f64>> {
    let h = a * point.to_homogeneous();
    let scale = a.row(2).norm().max(f64::MIN_POSITIVE);
    if (h.z / scale).abs() < MIN_HOMOGENEOUS_DEPTH {
        return None;
    }
    Some(Vector2::new(h.x / h.z, h.y / h.z))
}

/// Intrinsic and extrinsic parameters of one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    id: String,
    image_size: [u32; 2],
    intrinsics: Matrix3<f64>,
    rotation: Matrix3<f64>,
    center: WorldPoint,
    distortion: Distortion,
}

impl CameraModel {
    /// Builds a camera, checking every invariant. `intrinsics` is rescaled so
    /// that its bottom-right entry is 1.
    pub fn new(
        id: impl Into<String>,
        image_size: [u32; 2],
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        center: WorldPoint,
        distortion: Distortion,
    ) -> Result<Self, RigError> {
        let id = id.into();
        let all_finite = intrinsics
            .iter()
            .chain(rotation.iter())
            .chain(center.iter())
            .chain(distortion.coefficients().iter())
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(RigError::NonFinite);
        }
        let deviation = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if deviation >= 1e-9 {
            return Err(RigError::NotOrthonormal { id, deviation });
        }
        if rotation.determinant() < 0.0 {
            return Err(RigError::ImproperRotation(id));
        }
        if intrinsics[(2, 2)].abs() < f64::EPSILON
            || intrinsics[(1, 0)] != 0.0
            || intrinsics[(2, 0)] != 0.0
            || intrinsics[(2, 1)] != 0.0
        {
            return Err(RigError::InvalidIntrinsics {
                id,
                reason: "calibration matrix must be upper triangular".into(),
            });
        }
        let k = intrinsics / intrinsics[(2, 2)];
        if k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
            return Err(RigError::InvalidIntrinsics {
                id,
                reason: "focal lengths must be positive".into(),
            });
        }
        let (cx, cy) = (k[(0, 2)], k[(1, 2)]);
        if !(0.0..=image_size[0] as f64).contains(&cx) || !(0.0..=image_size[1] as f64).contains(&cy)
        {
            return Err(RigError::InvalidIntrinsics {
                id,
                reason: format!(
                    "principal point ({cx}, {cy}) outside {}x{} image",
                    image_size[0], image_size[1]
                ),
            });
        }
        if distortion.coefficients().len() > 5 {
            return Err(RigError::TooManyDistortionCoefficients {
                id,
                len: distortion.coefficients().len(),
            });
        }
        Ok(Self {
            id,
            image_size,
            intrinsics: k,
            rotation,
            center,
            distortion,
        })
    }

    /// A distortion-free camera at `eye` looking at `target`, with image
    /// rows running along `-up`.
    pub fn look_at(
        id: impl Into<String>,
        image_size: [u32; 2],
        focal_px: f64,
        eye: WorldPoint,
        target: WorldPoint,
        up: Vector3<f64>,
    ) -> Result<Self, RigError> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let k = Matrix3::new(
            focal_px,
            0.0,
            image_size[0] as f64 / 2.0,
            0.0,
            focal_px,
            image_size[1] as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        );
        Self::new(id, image_size, k, rotation, eye, Distortion::none())
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn image_size(&self) -> [u32; 2] {
        self.image_size
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn center(&self) -> &WorldPoint {
        &self.center
    }

    pub fn distortion(&self) -> &Distortion {
        &self.distortion
    }

    pub fn with_distortion(mut self, distortion: Distortion) -> Result<Self, RigError> {
        if distortion.coefficients().len() > 5 {
            return Err(RigError::TooManyDistortionCoefficients {
                id: self.id,
                len: distortion.coefficients().len(),
            });
        }
        self.distortion = distortion;
        Ok(self)
    }

    pub fn projection_matrix(&self) -> ProjectionMatrix {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_columns_mut::<3>(0).copy_from(&self.rotation);
        rt.set_column(3, &(-self.rotation * self.center.coords));
        ProjectionMatrix::new(self.intrinsics * rt).expect("valid camera has a full-rank projection")
    }

    /// World point expressed in this camera's frame.
    pub fn to_camera(&self, point: &WorldPoint) -> Vector3<f64> {
        self.rotation * (point - self.center)
    }

    pub fn project(&self, point: &WorldPoint) -> Result<PixelPoint, RigError> {
        let pc = self.to_camera(point);
        if pc.z.abs() < MIN_HOMOGENEOUS_DEPTH {
            return Err(RigError::PointAtInfinity(self.id.clone()));
        }
        let normalized = self.distortion.distort(Vector2::new(pc.x / pc.z, pc.y / pc.z));
        let px = self.intrinsics * Vector3::new(normalized.x, normalized.y, 1.0);
        Ok(PixelPoint::new(px.x, px.y, 1.0))
    }

    /// Removes lens distortion from an observed pixel, returning the pixel an
    /// ideal pinhole camera would have recorded.
    pub fn undistort_pixel(&self, pixel: Vector2<f64>) -> Vector2<f64> {
        if self.distortion.is_none() {
            return pixel;
        }
        let k_inv = self
            .intrinsics
            .try_inverse()
            .expect("upper-triangular K with positive focal lengths");
        let n = k_inv * Vector3::new(pixel.x, pixel.y, 1.0);
        let ideal = self.distortion.undistort(Vector2::new(n.x, n.y));
        let px = self.intrinsics * Vector3::new(ideal.x, ideal.y, 1.0);
        Vector2::new(px.x, px.y)
    }

    pub fn in_image(&self, uv: &Vector2<f64>) -> bool {
        uv.x >= 0.0
            && uv.y >= 0.0
            && uv.x <= self.image_size[0] as f64
            && uv.y <= self.image_size[1] as f64
    }

    /// The same camera after a rigid change of world frame.
    pub fn transformed(&self, world: &Isometry3<f64>) -> Self {
        let rotation = self.rotation * world.rotation.inverse().to_rotation_matrix().into_inner();
        Self {
            rotation,
            center: world * self.center,
            ..self.clone()
        }
    }
}

/// Pixel distance between the projection of `point` and `observed`.
pub fn reprojection_error(
    camera: &CameraModel,
    point: &WorldPoint,
    observed: &PixelPoint,
) -> Result<f64, RigError> {
    let projected = camera.project(point)?;
    Ok((projected.uv - observed.uv).norm())
}

/// An ordered set of calibrated cameras with unique ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Rig {
    cameras: Vec<CameraModel>,
}

impl Rig {
    pub fn new(cameras: Vec<CameraModel>) -> Result<Self, RigError> {
        for (i, cam) in cameras.iter().enumerate() {
            if cameras[..i].iter().any(|c| c.id == cam.id) {
                return Err(RigError::DuplicateCamera(cam.id.clone()));
            }
        }
        Ok(Self { cameras })
    }

    pub fn cameras(&self) -> &[CameraModel] {
        &self.cameras
    }

    pub fn camera(&self, id: &str) -> Result<&CameraModel, RigError> {
        self.cameras
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| RigError::UnknownCamera(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }
}
