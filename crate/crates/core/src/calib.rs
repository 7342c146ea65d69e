//! DLT camera resection, decomposition of a projection matrix into
//! `K [R | -R C]`, and calibration-quality audits.

use nalgebra::{DMatrix, Matrix3, Matrix3x4, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rig::{CameraModel, PixelPoint, ProjectionMatrix, RigError, WorldPoint};

/// Minimum number of world/pixel pairs for a resection.
pub const MIN_CORRESPONDENCES: usize = 6;

/// Default reprojection gate for calibration audits, pixels.
pub const DEFAULT_AUDIT_THRESHOLD_PX: f64 = 8.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibError {
    #[error("resection needs at least {MIN_CORRESPONDENCES} correspondences, got {0}")]
    InsufficientPoints(usize),
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("left 3x3 block of the projection matrix is singular")]
    SingularLeftBlock,
    #[error(transparent)]
    Rig(#[from] RigError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CorrespondenceSource {
    Checkerboard,
    Synthetic,
    #[default]
    Manual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub pairs: Vec<(WorldPoint, PixelPoint)>,
    pub source: CorrespondenceSource,
}

impl CorrespondenceSet {
    pub fn new(pairs: Vec<(WorldPoint, PixelPoint)>, source: CorrespondenceSource) -> Self {
        Self { pairs, source }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Intrinsic matrix, world-to-camera rotation and projection center.
#[derive(Debug, Clone, PartialEq)]
pub struct PinholeParams {
    pub intrinsics: Matrix3<f64>,
    pub rotation: Matrix3<f64>,
    pub center: WorldPoint,
}

impl PinholeParams {
    pub fn into_camera(self, id: impl Into<String>, image_size: [u32; 2]) -> Result<CameraModel, RigError> {
        CameraModel::new(
            id,
            image_size,
            self.intrinsics,
            self.rotation,
            self.center,
            crate::rig::Distortion::none(),
        )
    }
}

impl From<&CameraModel> for PinholeParams {
    fn from(cam: &CameraModel) -> Self {
        Self {
            intrinsics: *cam.intrinsics(),
            rotation: *cam.rotation(),
            center: *cam.center(),
        }
    }
}

/// Similarity transform that moves the centroid to the origin and scales the
/// mean distance to `target`.
fn normalizing_scale<const D: usize>(points: &[nalgebra::SVector<f64, D>], target: f64) -> (nalgebra::SVector<f64, D>, f64) {
    let n = points.len() as f64;
    let centroid = points.iter().fold(nalgebra::SVector::<f64, D>::zeros(), |acc, p| acc + p) / n;
    let mean_dist = points.iter().map(|p| (p - centroid).norm()).sum::<f64>() / n;
    let scale = if mean_dist > 0.0 { target / mean_dist } else { 1.0 };
    (centroid, scale)
}

/// Index of the smallest entry and the gap to the second smallest.
fn smallest_two(values: &[f64]) -> (usize, f64, f64) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|a, b| values[*a].total_cmp(&values[*b]));
    (idx[0], values[idx[0]], values[idx[1]])
}

/// Estimates the projection matrix from six or more non-coplanar
/// correspondences.
///
/// Both point sets are conditioned (centroid at the origin, mean distance
/// `sqrt(3)` for world points and `sqrt(2)` for pixels) before the `2n x 12`
/// design matrix is built; the null vector is the right singular vector of
/// the smallest singular value.
pub fn resect(set: &CorrespondenceSet) -> Result<ProjectionMatrix, CalibError> {
    let n = set.pairs.len();
    if n < MIN_CORRESPONDENCES {
        return Err(CalibError::InsufficientPoints(n));
    }
    let world: Vec<Vector3<f64>> = set.pairs.iter().map(|(w, _)| w.coords).collect();
    let pixels: Vec<Vector2<f64>> = set.pairs.iter().map(|(_, p)| p.uv).collect();
    if world.iter().any(|w| !w.iter().all(|v| v.is_finite()))
        || pixels.iter().any(|p| !p.iter().all(|v| v.is_finite()))
    {
        return Err(RigError::NonFinite.into());
    }

    let (wc, ws) = normalizing_scale(&world, 3f64.sqrt());
    let (pc, ps) = normalizing_scale(&pixels, 2f64.sqrt());

    // coplanarity check on the conditioned world points
    let centered = DMatrix::from_fn(3, n, |r, c| (world[c][r] - wc[r]) * ws);
    let sv = centered.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    if smin <= 1e-9 * smax {
        return Err(CalibError::DegenerateConfiguration(
            "world points are coplanar or collinear".into(),
        ));
    }

    let mut design = DMatrix::<f64>::zeros(2 * n, 12);
    for (i, (w, p)) in world.iter().zip(&pixels).enumerate() {
        let wn = (w - wc) * ws;
        let k = [wn.x, wn.y, wn.z, 1.0];
        let x = (p.x - pc.x) * ps;
        let y = (p.y - pc.y) * ps;
        for j in 0..4 {
            design[(2 * i, j)] = k[j];
            design[(2 * i, 8 + j)] = -x * k[j];
            design[(2 * i + 1, 4 + j)] = k[j];
            design[(2 * i + 1, 8 + j)] = -y * k[j];
        }
    }
    let svd = design.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let s = svd.singular_values.as_slice();
    let (imin, smin, snext) = smallest_two(s);
    let smax = svd.singular_values.max();
    if snext - smin < 1e-8 * smax {
        return Err(CalibError::DegenerateConfiguration(
            "null space of the design matrix is not one-dimensional".into(),
        ));
    }
    let h = v_t.row(imin);
    let normalized = Matrix3x4::from_fn(|r, c| h[4 * r + c]);

    let t_pix = Matrix3::new(ps, 0.0, -ps * pc.x, 0.0, ps, -ps * pc.y, 0.0, 0.0, 1.0);
    let mut t_world = nalgebra::Matrix4::<f64>::identity() * ws;
    t_world[(3, 3)] = 1.0;
    for r in 0..3 {
        t_world[(r, 3)] = -ws * wc[r];
    }
    let t_pix_inv = t_pix.try_inverse().expect("similarity is invertible");
    Ok(ProjectionMatrix::new(t_pix_inv * normalized * t_world)?)
}

/// `K [R | -R C]` as a normalized projection matrix.
pub fn compose(params: &PinholeParams) -> Result<ProjectionMatrix, CalibError> {
    let mut rt = Matrix3x4::zeros();
    rt.fixed_columns_mut::<3>(0).copy_from(&params.rotation);
    rt.set_column(3, &(-params.rotation * params.center.coords));
    Ok(ProjectionMatrix::new(params.intrinsics * rt)?)
}

/// RQ factorization `m = upper * orthogonal` via QR of the row-reversed
/// transpose.
fn rq3(m: &Matrix3<f64>) -> (Matrix3<f64>, Matrix3<f64>) {
    let flip = Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0);
    let qr = (flip * m).transpose().qr();
    let (q, r) = (qr.q(), qr.r());
    let upper = flip * r.transpose() * flip;
    let orthogonal = flip * q.transpose();
    (upper, orthogonal)
}

/// Splits a projection matrix into intrinsics, rotation and camera center.
/// The calibration matrix has a positive diagonal and unit bottom-right
/// entry; the rotation is proper.
pub fn decompose(a: &ProjectionMatrix) -> Result<PinholeParams, CalibError> {
    let m = a.left_block();
    let det = m.determinant();
    let scale = m.norm().powi(3).max(f64::MIN_POSITIVE);
    if !det.is_finite() || det.abs() < 1e-12 * scale {
        return Err(CalibError::SingularLeftBlock);
    }
    let col4 = a.matrix().column(3).into_owned();
    // ProjectionMatrix keeps det(M) > 0, so K R has a proper rotation once the
    // diagonal of K is made positive.
    let (mut k, mut r) = rq3(&m);
    let signs = Matrix3::from_diagonal(&Vector3::from_fn(|i, _| k[(i, i)].signum()));
    k *= signs;
    r = signs * r;
    if r.determinant() < 0.0 {
        // det(M) > 0 and diag(K) > 0 make this unreachable up to round-off
        r = -r;
        k = -k;
    }
    let center = -(m.try_inverse().ok_or(CalibError::SingularLeftBlock)? * col4);
    let k = k / k[(2, 2)];
    // clean sub-diagonal round-off so CameraModel accepts K as triangular
    let k = Matrix3::new(
        k[(0, 0)],
        k[(0, 1)],
        k[(0, 2)],
        0.0,
        k[(1, 1)],
        k[(1, 2)],
        0.0,
        0.0,
        1.0,
    );
    // re-orthonormalize to machine precision
    let svd = r.svd(true, true);
    let r = svd.u.unwrap() * svd.v_t.unwrap();
    Ok(PinholeParams {
        intrinsics: k,
        rotation: r,
        center: WorldPoint::from(center),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub camera_id: String,
    pub per_point_errors: Vec<f64>,
    pub mean_error: f64,
    pub max_error: f64,
    pub excluded_points: Vec<usize>,
    pub threshold: f64,
    pub recalibration_recommended: bool,
}

/// Reprojection audit of a camera against its correspondences. Points whose
/// error exceeds `threshold` are listed for exclusion; a mean above the
/// threshold recommends recalibration.
pub fn audit(camera: &CameraModel, set: &CorrespondenceSet, threshold: f64) -> CalibrationReport {
    let per_point_errors: Vec<f64> = set
        .pairs
        .iter()
        .map(|(w, p)| crate::rig::reprojection_error(camera, w, p).unwrap_or(f64::INFINITY))
        .collect();
    let n = per_point_errors.len();
    let mean_error = if n == 0 {
        0.0
    } else {
        per_point_errors.iter().sum::<f64>() / n as f64
    };
    let max_error = per_point_errors.iter().copied().fold(0.0, f64::max);
    let excluded_points = per_point_errors
        .iter()
        .enumerate()
        .filter(|(_, e)| **e > threshold)
        .map(|(i, _)| i)
        .collect();
    CalibrationReport {
        camera_id: camera.id().to_string(),
        per_point_errors,
        mean_error,
        max_error,
        excluded_points,
        threshold,
        recalibration_recommended: mean_error > threshold,
    }
}

/// Inner corners of the 5x3 checkerboard with 95 mm squares, in the board
/// frame (z = 0).
pub fn checkerboard_corners() -> Vec<WorldPoint> {
    const SQUARE_M: f64 = 0.095;
    let mut corners = Vec::with_capacity(15);
    for row in 0..3 {
        for col in 0..5 {
            corners.push(WorldPoint::new(col as f64 * SQUARE_M, row as f64 * SQUARE_M, 0.0));
        }
    }
    corners
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rig::Distortion;
    use approx::assert_relative_eq;
    use nalgebra::Rotation3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn test_camera() -> CameraModel {
        let k = Matrix3::new(1150.0, 0.8, 955.0, 0.0, 1140.0, 548.0, 0.0, 0.0, 1.0);
        let eye = WorldPoint::new(-2.4, 1.1, 1.3);
        let aim = CameraModel::look_at("aim", [1920, 1080], 1000.0, eye, WorldPoint::new(0.0, 0.0, 0.9), Vector3::z())
            .unwrap();
        let tilt = Rotation3::from_euler_angles(0.0, 0.0, 0.03).into_inner();
        CameraModel::new("cam0", [1920, 1080], k, tilt * aim.rotation(), eye, Distortion::none()).unwrap()
    }

    fn cloud(n: usize, rng: &mut impl Rng, camera: &CameraModel) -> Vec<WorldPoint> {
        let mut pts = Vec::new();
        while pts.len() < n {
            let p = WorldPoint::new(
                rng.random_range(-0.8..0.8),
                rng.random_range(-0.8..0.8),
                rng.random_range(0.0..1.8),
            );
            if camera.to_camera(&p).z > 0.5 && camera.in_image(&camera.project(&p).unwrap().uv) {
                pts.push(p);
            }
        }
        pts
    }

    fn correspondences(camera: &CameraModel, pts: &[WorldPoint], sigma: f64, rng: &mut impl Rng) -> CorrespondenceSet {
        let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).unwrap();
        let pairs = pts
            .iter()
            .map(|p| {
                let px = camera.project(p).unwrap();
                let (du, dv) = if sigma > 0.0 {
                    (noise.sample(rng), noise.sample(rng))
                } else {
                    (0.0, 0.0)
                };
                (*p, PixelPoint::new(px.u() + du, px.v() + dv, 1.0))
            })
            .collect();
        CorrespondenceSet::new(pairs, CorrespondenceSource::Synthetic)
    }

    #[test]
    fn noiseless_resection_recovers_camera() {
        let cam = test_camera();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = cloud(10, &mut rng, &cam);
        let set = correspondences(&cam, &pts, 0.0, &mut rng);
        let a = resect(&set).unwrap();
        assert!(a.relative_difference(&cam.projection_matrix()) < 1e-8);
        let params = decompose(&a).unwrap();
        assert!((params.center - cam.center()).norm() < 1e-6);
        let recovered = params.into_camera("cam0", [1920, 1080]).unwrap();
        let report = audit(&recovered, &set, DEFAULT_AUDIT_THRESHOLD_PX);
        assert!(report.max_error < 1e-6, "max {}", report.max_error);
    }

    #[test]
    fn noisy_resection_mean_error() {
        let cam = test_camera();
        let mut worst: f64 = 0.0;
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = cloud(10, &mut rng, &cam);
            let set = correspondences(&cam, &pts, 0.5, &mut rng);
            let recovered = decompose(&resect(&set).unwrap())
                .unwrap()
                .into_camera("cam0", [1920, 1080])
                .unwrap();
            worst = worst.max(audit(&recovered, &set, 8.0).mean_error);
        }
        assert!(worst < 1.5, "worst mean error {worst}");
    }

    #[test]
    fn too_few_points() {
        let cam = test_camera();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = cloud(5, &mut rng, &cam);
        let set = correspondences(&cam, &pts, 0.0, &mut rng);
        assert_eq!(resect(&set).unwrap_err(), CalibError::InsufficientPoints(5));
    }

    #[test]
    fn coplanar_points_are_degenerate() {
        let cam = test_camera();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<WorldPoint> = checkerboard_corners()
            .into_iter()
            .map(|p| WorldPoint::new(p.x, 0.3, p.y + 0.5))
            .collect();
        let set = correspondences(&cam, &pts, 0.0, &mut rng);
        assert!(matches!(resect(&set), Err(CalibError::DegenerateConfiguration(_))));
    }

    #[test]
    fn singular_left_block() {
        let mut m = Matrix3x4::zeros();
        m[(0, 0)] = 1.0;
        m[(1, 1)] = 1.0;
        m[(2, 3)] = 1.0;
        m[(0, 3)] = 1.0;
        m[(2, 0)] = 1e-3;
        // rank 3 overall but the left block has rank 2
        let a = ProjectionMatrix::new(m).unwrap();
        assert_eq!(decompose(&a).unwrap_err(), CalibError::SingularLeftBlock);
    }

    #[test]
    fn compose_decompose_round_trip() {
        let cam = test_camera();
        let params = PinholeParams::from(&cam);
        let back = decompose(&compose(&params).unwrap()).unwrap();
        assert_relative_eq!(back.intrinsics, params.intrinsics, max_relative = 1e-9);
        assert_relative_eq!(back.rotation, params.rotation, epsilon = 1e-9);
        assert_relative_eq!(back.center, params.center, epsilon = 1e-9);
    }

    #[test]
    fn audit_flags_injected_outlier() {
        let cam = test_camera();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = cloud(12, &mut rng, &cam);
        let mut set = correspondences(&cam, &pts, 0.0, &mut rng);
        let clean = audit(&cam, &set, 8.0);
        assert!(clean.excluded_points.is_empty());
        assert!(!clean.recalibration_recommended);
        assert!(clean.max_error < 1e-9);

        set.pairs[7].1.uv += Vector2::new(12.0, 16.0);
        let report = audit(&cam, &set, 8.0);
        assert_eq!(report.excluded_points, vec![7]);
        assert_relative_eq!(report.max_error, 20.0, epsilon = 1e-6);
        assert!(report.mean_error <= report.max_error);
        assert!(!report.recalibration_recommended);
    }

    #[test]
    fn pixel_scaling_scales_intrinsics_only() {
        let cam = test_camera();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts = cloud(14, &mut rng, &cam);
        let set = correspondences(&cam, &pts, 0.0, &mut rng);
        let s = 0.5;
        let scaled = CorrespondenceSet::new(
            set.pairs
                .iter()
                .map(|(w, p)| (*w, PixelPoint::new(p.u() * s, p.v() * s, 1.0)))
                .collect(),
            set.source,
        );
        let base = decompose(&resect(&set).unwrap()).unwrap();
        let half = decompose(&resect(&scaled).unwrap()).unwrap();
        for (r, c) in [(0, 0), (1, 1), (0, 2), (1, 2), (0, 1)] {
            assert!((half.intrinsics[(r, c)] - s * base.intrinsics[(r, c)]).abs() < 1e-6 * base.intrinsics[(0, 0)]);
        }
        assert_relative_eq!(half.rotation, base.rotation, epsilon = 1e-6);
        assert_relative_eq!(half.center, base.center, epsilon = 1e-6);
    }

    proptest! {
        #[test]
        fn decompose_inverts_compose(
            rx in -3.0f64..3.0, ry in -1.5f64..1.5, rz in -3.0f64..3.0,
            f in 300.0f64..3000.0, aspect in 0.8f64..1.2, skew in -2.0f64..2.0,
            cx in 100.0f64..1800.0, cy in 100.0f64..1000.0,
            tx in -5.0f64..5.0, ty in -5.0f64..5.0, tz in -5.0f64..5.0,
        ) {
            let params = PinholeParams {
                intrinsics: Matrix3::new(f, skew, cx, 0.0, f * aspect, cy, 0.0, 0.0, 1.0),
                rotation: Rotation3::from_euler_angles(rx, ry, rz).into_inner(),
                center: WorldPoint::new(tx, ty, tz),
            };
            let back = decompose(&compose(&params).unwrap()).unwrap();
            prop_assert!((back.intrinsics - params.intrinsics).amax() < 1e-9 * f);
            prop_assert!((back.rotation - params.rotation).amax() < 1e-9);
            prop_assert!((back.center - params.center).norm() < 1e-9 * (1.0 + params.center.coords.norm()));
        }
    }

    #[test]
    fn checkerboard_geometry() {
        let corners = checkerboard_corners();
        assert_eq!(corners.len(), 15);
        assert_relative_eq!(corners[1].x - corners[0].x, 0.095);
        assert_relative_eq!(corners[14], WorldPoint::new(0.38, 0.19, 0.0), epsilon = 1e-12);
    }
}
