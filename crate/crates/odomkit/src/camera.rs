//! Pinhole camera model, multi-camera rig, and reprojection factors.
//!
//! Landmarks are parametrized by inverse depth in the camera that first
//! observed them (the anchor). A reprojection residual transports the anchor
//! ray into another camera view and compares the projection against the
//! measured pixel:
//!
//! ```text
//! r = ẑ − π( T_tc⁻¹ ∘ T_t⁻¹ ∘ T_i ∘ T_ic ∘ (m_a / ρ) )
//! ```
//!
//! where `m_a` is the unit-plane ray of the anchor observation, `ρ` the
//! inverse depth, `T_i`/`T_t` the anchor and target body poses, and
//! `T_ic`/`T_tc` the camera extrinsics. The "spatial" special case observes
//! the landmark from a second camera of the same rig at the same instant;
//! the body pose then cancels and only `ρ` remains observable.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Matrix3x6, Vector2, Vector3};
use thiserror::Error;

use crate::manifold::{skew, Block, Pose};
use crate::solver::{BlockId, Factor, FactorEval, Values};

/// Minimum depth (in meters) at which projection is defined.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum CameraError {
    #[error("point at depth {0} is behind or too close to the camera")]
    BehindCamera(f64),
    #[error("inverse depth {0} is not positive")]
    NonPositiveInverseDepth(f64),
}

/// Pinhole intrinsics without distortion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinholeIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl PinholeIntrinsics {
    /// Project a camera-frame point to pixels. Fails when the depth is at or
    /// below [`MIN_DEPTH`].
    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, CameraError> {
        if p.z <= MIN_DEPTH {
            return Err(CameraError::BehindCamera(p.z));
        }
        Ok(Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Jacobian of [`project`](Self::project) with respect to the point.
    pub fn project_jacobian(&self, p: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / p.z;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p.x * iz * iz,
            0.0,
            self.fy * iz,
            -self.fy * p.y * iz * iz,
        )
    }

    /// Unit-plane ray through a pixel: `(x/z, y/z, 1)`.
    pub fn ray(&self, uv: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((uv.x - self.cx) / self.fx, (uv.y - self.cy) / self.fy, 1.0)
    }

    /// Camera-frame point at the given depth along the pixel ray.
    pub fn backproject(&self, uv: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>, CameraError> {
        if depth <= 0.0 {
            return Err(CameraError::BehindCamera(depth));
        }
        Ok(self.ray(uv) * depth)
    }

    pub fn in_bounds(&self, uv: &Vector2<f64>) -> bool {
        uv.x >= 0.0 && uv.y >= 0.0 && uv.x < self.width as f64 && uv.y < self.height as f64
    }
}

/// One camera of the rig: intrinsics plus the camera-in-body extrinsic
/// `T_bc` (maps camera-frame points into the body frame).
#[derive(Debug, Clone, Copy)]
pub struct CameraModel {
    pub intrinsics: PinholeIntrinsics,
    pub extrinsic: Pose,
}

/// Calibrated multi-camera rig. Camera ids index into `cameras`.
#[derive(Debug, Clone)]
pub struct CameraRig {
    pub cameras: Vec<CameraModel>,
}

impl CameraRig {
    pub fn camera(&self, id: usize) -> &CameraModel {
        &self.cameras[id]
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }
}

/// A single feature detection in one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureObservation {
    pub frame_id: u64,
    pub camera_id: usize,
    pub feature_id: u64,
    pub uv: Vector2<f64>,
}

/// A tracked landmark anchored at its first observation.
#[derive(Debug, Clone)]
pub struct Landmark {
    pub feature_id: u64,
    pub anchor_frame: u64,
    pub anchor_camera: usize,
    pub anchor_uv: Vector2<f64>,
    pub inv_depth: f64,
    /// All observations, including the anchor itself, in insertion order.
    pub observations: Vec<FeatureObservation>,
}

impl Landmark {
    pub fn depth(&self) -> f64 {
        1.0 / self.inv_depth
    }
}

/// Geometry shared by temporal and spatial reprojection residuals.
///
/// Returns the target-camera point together with the intermediate body-frame
/// quantities the Jacobians need.
struct Transport {
    p_target_cam: Vector3<f64>,
    p_body_anchor: Vector3<f64>,
    p_body_target: Vector3<f64>,
}

fn transport(
    anchor_pose: &Pose,
    target_pose: &Pose,
    anchor_ext: &Pose,
    target_ext: &Pose,
    anchor_ray: &Vector3<f64>,
    inv_depth: f64,
) -> Option<Transport> {
    if inv_depth <= 0.0 {
        return None;
    }
    let p_anchor_cam = anchor_ray / inv_depth;
    let p_body_anchor = anchor_ext.transform(&p_anchor_cam);
    let p_world = anchor_pose.transform(&p_body_anchor);
    let p_body_target = target_pose.inverse().transform(&p_world);
    let p_target_cam = target_ext.inverse().transform(&p_body_target);
    Some(Transport {
        p_target_cam,
        p_body_anchor,
        p_body_target,
    })
}

/// Reprojection of an anchored landmark into a (frame, camera) view.
///
/// Covers both factor flavors:
/// * temporal: anchor frame != target frame, keys are the two poses plus the
///   inverse depth (or one pose when the frames share a camera id);
/// * spatial: same frame, different camera. The body pose cancels from the
///   residual, so the only key is the inverse depth.
pub struct ReprojectionFactor {
    pub landmark_id: u64,
    pub anchor_frame: u64,
    pub target_frame: u64,
    anchor_ray: Vector3<f64>,
    anchor_ext: Pose,
    target_ext: Pose,
    target_intrinsics: PinholeIntrinsics,
    measured: Vector2<f64>,
    /// 1 / sigma_px, applied to residual and Jacobians.
    sqrt_weight: f64,
    /// Huber threshold on the whitened residual norm, if robustified.
    huber: Option<f64>,
    keys: Vec<BlockId>,
    spatial: bool,
}

impl ReprojectionFactor {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        landmark: &Landmark,
        target: &FeatureObservation,
        rig: &CameraRig,
        sigma_px: f64,
        huber_px: Option<f64>,
    ) -> Self {
        let anchor_cam = rig.camera(landmark.anchor_camera);
        let target_cam = rig.camera(target.camera_id);
        let spatial = landmark.anchor_frame == target.frame_id;
        let keys = if spatial {
            vec![BlockId::InvDepth(landmark.feature_id)]
        } else {
            vec![
                BlockId::Pose(landmark.anchor_frame),
                BlockId::Pose(target.frame_id),
                BlockId::InvDepth(landmark.feature_id),
            ]
        };
        ReprojectionFactor {
            landmark_id: landmark.feature_id,
            anchor_frame: landmark.anchor_frame,
            target_frame: target.frame_id,
            anchor_ray: anchor_cam.intrinsics.ray(&landmark.anchor_uv),
            anchor_ext: anchor_cam.extrinsic,
            target_ext: target_cam.extrinsic,
            target_intrinsics: target_cam.intrinsics,
            measured: target.uv,
            sqrt_weight: 1.0 / sigma_px,
            huber: huber_px.map(|h| h / sigma_px),
            keys,
            spatial,
        }
    }

    fn poses(&self, values: &Values) -> (Pose, Pose) {
        let anchor = match values.get(&BlockId::Pose(self.anchor_frame)) {
            Some(Block::Pose(p)) => *p,
            _ => panic!("missing anchor pose block"),
        };
        let target = if self.spatial {
            anchor
        } else {
            match values.get(&BlockId::Pose(self.target_frame)) {
                Some(Block::Pose(p)) => *p,
                _ => panic!("missing target pose block"),
            }
        };
        (anchor, target)
    }
}

impl Factor for ReprojectionFactor {
    fn keys(&self) -> &[BlockId] {
        &self.keys
    }

    fn dim(&self) -> usize {
        2
    }

    fn huber(&self) -> Option<f64> {
        self.huber
    }

    fn evaluate(&self, values: &Values, want_jacobians: bool) -> Option<FactorEval> {
        let (anchor_pose, target_pose) = self.poses(values);
        let inv_depth = match values.get(&BlockId::InvDepth(self.landmark_id)) {
            Some(Block::InvDepth(rho)) => *rho,
            _ => panic!("missing inverse-depth block"),
        };

        let geom = transport(
            &anchor_pose,
            &target_pose,
            &self.anchor_ext,
            &self.target_ext,
            &self.anchor_ray,
            inv_depth,
        )?;
        let projected = self.target_intrinsics.project(&geom.p_target_cam).ok()?;
        let residual = (self.measured - projected) * self.sqrt_weight;

        let mut eval = FactorEval {
            residual: DVector::from_column_slice(residual.as_slice()),
            jacobians: Vec::new(),
        };
        if !want_jacobians {
            return Some(eval);
        }

        // d(residual)/d(point in target camera), including the whitening and
        // the leading minus sign of `measured - projected`.
        let dproj = self
            .target_intrinsics
            .project_jacobian(&geom.p_target_cam)
            * (-self.sqrt_weight);
        let r_target_ext_t = self.target_ext.rotation.inverse().matrix();
        let r_target_t = target_pose.rotation.inverse().matrix();
        // Pixel residual sensitivity to the world-frame point.
        let dworld: Matrix2x3<f64> = dproj * r_target_ext_t * r_target_t;

        if self.spatial {
            let dray = anchor_pose.rotation.matrix()
                * self.anchor_ext.rotation.matrix()
                * (-self.anchor_ray / (inv_depth * inv_depth));
            let j = dworld * dray;
            eval.jacobians
                .push(DMatrix::from_column_slice(2, 1, j.as_slice()));
            return Some(eval);
        }

        // Anchor pose: p_w = R_i p_bi + t_i, perturbed on the right.
        let mut j_anchor = Matrix3x6::zeros();
        j_anchor
            .fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&Matrix3::identity());
        j_anchor
            .fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(-anchor_pose.rotation.matrix() * skew(&geom.p_body_anchor)));
        let j_pose_anchor = dworld * j_anchor;

        // Target pose: p_bt = R_t^T (p_w - t_t); d/dδp = -R_t^T,
        // d/dδθ = [p_bt]x after the right-perturbation chain rule.
        let mut j_target = Matrix3x6::zeros();
        j_target
            .fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(-r_target_t));
        j_target
            .fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&skew(&geom.p_body_target));
        let dproj_body = dproj * r_target_ext_t;
        let j_pose_target = dproj_body * j_target;

        let dray = anchor_pose.rotation.matrix()
            * self.anchor_ext.rotation.matrix()
            * (-self.anchor_ray / (inv_depth * inv_depth));
        let j_rho = dworld * dray;

        eval.jacobians
            .push(DMatrix::from_column_slice(2, 6, j_pose_anchor.as_slice()));
        eval.jacobians
            .push(DMatrix::from_column_slice(2, 6, j_pose_target.as_slice()));
        eval.jacobians
            .push(DMatrix::from_column_slice(2, 1, j_rho.as_slice()));
        Some(eval)
    }
}

/// Linear triangulation of a feature from two or more calibrated views.
///
/// Each view contributes the constraint that the world point lies on the
/// pixel ray; the stacked system is solved by SVD. Returns the world point,
/// or `None` when the geometry is degenerate (rays nearly parallel) or the
/// point falls behind any contributing camera.
pub fn triangulate(views: &[(Pose, Vector3<f64>)]) -> Option<Vector3<f64>> {
    if views.len() < 2 {
        return None;
    }

    // Require some angular spread between the first ray and any other.
    let dir0 = views[0].0.rotation.rotate(&views[0].1).normalize();
    let mut max_angle = 0.0_f64;
    for (pose, ray) in views.iter().skip(1) {
        let dir = pose.rotation.rotate(ray).normalize();
        max_angle = max_angle.max(dir0.cross(&dir).norm().asin());
    }
    if max_angle < 2e-3 {
        return None;
    }

    // Rows of T_cw = (pose of camera in world)^-1.
    let mut a = DMatrix::zeros(2 * views.len(), 4);
    for (i, (pose, ray)) in views.iter().enumerate() {
        let inv = pose.inverse();
        let r = inv.rotation.matrix();
        let t = inv.translation;
        let row = |k: usize| {
            let mut v = nalgebra::RowVector4::zeros();
            v.fixed_columns_mut::<3>(0).copy_from(&r.row(k));
            v[3] = t[k];
            v
        };
        // x-row: ray.x * row3 - row1, same for y; z normalized to 1.
        let m = ray / ray.z;
        a.row_mut(2 * i).copy_from(&(row(2) * m.x - row(0)));
        a.row_mut(2 * i + 1).copy_from(&(row(2) * m.y - row(1)));
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let min_row = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())?
        .0;
    let h = v_t.row(min_row);
    if h[3].abs() < 1e-12 {
        return None;
    }
    let point = Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);

    // Cheirality: positive depth in every view.
    for (pose, _) in views {
        if pose.inverse().transform(&point).z <= MIN_DEPTH {
            return None;
        }
    }
    Some(point)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::Rotation;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn intrinsics() -> PinholeIntrinsics {
        PinholeIntrinsics {
            fx: 320.0,
            fy: 320.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
        }
    }

    #[test]
    fn project_center_and_offset() {
        let k = intrinsics();
        // Optical axis lands on the principal point regardless of depth.
        let c = k.project(&Vector3::new(0.0, 0.0, 2.0)).unwrap();
        assert_eq!(c, Vector2::new(320.0, 240.0));

        let p = k.project(&Vector3::new(0.5, -0.25, 2.0)).unwrap();
        assert_eq!(p, Vector2::new(320.0 + 320.0 * 0.25, 240.0 - 320.0 * 0.125));
    }

    #[test]
    fn project_rejects_non_positive_depth() {
        let k = intrinsics();
        assert!(matches!(
            k.project(&Vector3::new(0.0, 0.0, 0.0)),
            Err(CameraError::BehindCamera(_))
        ));
        assert!(k.project(&Vector3::new(0.0, 0.0, -1.0)).is_err());
    }

    #[test]
    fn backproject_project_roundtrip() {
        let k = intrinsics();
        let mut rng = StdRng::seed_from_u64(21);
        for _ in 0..300 {
            let uv = Vector2::new(rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0));
            let depth = rng.gen_range(0.2..50.0);
            let p = k.backproject(&uv, depth).unwrap();
            assert_relative_eq!(p.z, depth, epsilon = 1e-12);
            let back = k.project(&p).unwrap();
            assert_relative_eq!(back, uv, epsilon = 1e-9);
        }
    }

    #[test]
    fn projection_jacobian_matches_finite_differences() {
        let k = intrinsics();
        let mut rng = StdRng::seed_from_u64(22);
        for _ in 0..200 {
            let p = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.5..10.0),
            );
            let jac = k.project_jacobian(&p);
            let eps = 1e-6;
            for col in 0..3 {
                let mut dp = Vector3::zeros();
                dp[col] = eps;
                let hi = k.project(&(p + dp)).unwrap();
                let lo = k.project(&(p - dp)).unwrap();
                let fd = (hi - lo) / (2.0 * eps);
                assert_relative_eq!(jac.column(col).into_owned(), fd, epsilon = 1e-5);
            }
        }
    }

    fn stereo_rig() -> CameraRig {
        // Forward-looking cameras: camera z = body x, camera x = -body y,
        // camera y = -body z. Second camera offset along body -y.
        let r_bc = Rotation::from_quaternion(0.5, -0.5, 0.5, -0.5);
        CameraRig {
            cameras: vec![
                CameraModel {
                    intrinsics: intrinsics(),
                    extrinsic: Pose::new(r_bc, Vector3::new(0.0, 0.05, 0.0)),
                },
                CameraModel {
                    intrinsics: intrinsics(),
                    extrinsic: Pose::new(r_bc, Vector3::new(0.0, -0.05, 0.0)),
                },
            ],
        }
    }

    #[test]
    fn stereo_rig_maps_body_x_to_camera_z() {
        let rig = stereo_rig();
        let fwd = rig.camera(0).extrinsic.rotation.inverse().rotate(&Vector3::x());
        assert_relative_eq!(fwd, Vector3::z(), epsilon = 1e-12);
    }

    /// Independent end-to-end oracle for the reprojection residual: build the
    /// same chain out of plain matrix algebra and compare.
    fn oracle_residual(
        rig: &CameraRig,
        landmark: &Landmark,
        obs: &FeatureObservation,
        anchor_pose: &Pose,
        target_pose: &Pose,
        rho: f64,
    ) -> Vector2<f64> {
        let a = rig.camera(landmark.anchor_camera);
        let t = rig.camera(obs.camera_id);
        let ray = a.intrinsics.ray(&landmark.anchor_uv);
        let p_w = anchor_pose.transform(&a.extrinsic.transform(&(ray / rho)));
        let p_tc = t
            .extrinsic
            .inverse()
            .transform(&target_pose.inverse().transform(&p_w));
        obs.uv - t.intrinsics.project(&p_tc).unwrap()
    }

    fn make_values(
        anchor_frame: u64,
        target_frame: u64,
        anchor: Pose,
        target: Pose,
        feature: u64,
        rho: f64,
    ) -> Values {
        let mut values = Values::new();
        values.insert(BlockId::Pose(anchor_frame), Block::Pose(anchor));
        values.insert(BlockId::Pose(target_frame), Block::Pose(target));
        values.insert(BlockId::InvDepth(feature), Block::InvDepth(rho));
        values
    }

    #[test]
    fn temporal_residual_matches_oracle_and_is_zero_at_truth() {
        let rig = stereo_rig();
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..100 {
            let anchor_pose = Pose::new(
                Rotation::exp(&Vector3::new(
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                )),
                Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0),
            );
            let target_pose = Pose::new(
                Rotation::exp(&Vector3::new(0.0, 0.0, rng.gen_range(-0.3..0.3))),
                anchor_pose.translation + Vector3::new(0.2, rng.gen_range(-0.2..0.2), 0.0),
            );
            // A world point in front of both cameras (body x direction).
            let p_w = anchor_pose.transform(&Vector3::new(rng.gen_range(3.0..8.0), 0.3, 0.2));

            let cam0 = rig.camera(0);
            let anchor_cam_pose = anchor_pose.compose(&cam0.extrinsic);
            let p_anchor = anchor_cam_pose.inverse().transform(&p_w);
            let anchor_uv = cam0.intrinsics.project(&p_anchor).unwrap();
            let rho = 1.0 / p_anchor.z;

            let target_cam_pose = target_pose.compose(&cam0.extrinsic);
            let target_uv = cam0
                .intrinsics
                .project(&target_cam_pose.inverse().transform(&p_w))
                .unwrap();

            let landmark = Landmark {
                feature_id: 7,
                anchor_frame: 0,
                anchor_camera: 0,
                anchor_uv,
                inv_depth: rho,
                observations: vec![],
            };
            let obs = FeatureObservation {
                frame_id: 1,
                camera_id: 0,
                feature_id: 7,
                uv: target_uv,
            };
            let factor = ReprojectionFactor::new(&landmark, &obs, &rig, 1.0, None);

            // Zero residual at the generating geometry.
            let values = make_values(0, 1, anchor_pose, target_pose, 7, rho);
            let eval = factor.evaluate(&values, false).unwrap();
            assert!(eval.residual.norm() < 1e-9);

            // Perturbed inverse depth: matches the independently coded chain.
            let rho_bad = rho * 1.3;
            let values = make_values(0, 1, anchor_pose, target_pose, 7, rho_bad);
            let eval = factor.evaluate(&values, false).unwrap();
            let expect =
                oracle_residual(&rig, &landmark, &obs, &anchor_pose, &target_pose, rho_bad);
            assert_relative_eq!(eval.residual[0], expect.x, epsilon = 1e-9);
            assert_relative_eq!(eval.residual[1], expect.y, epsilon = 1e-9);
        }
    }

    #[test]
    fn spatial_factor_depends_only_on_inverse_depth() {
        let rig = stereo_rig();
        let landmark = Landmark {
            feature_id: 3,
            anchor_frame: 5,
            anchor_camera: 0,
            anchor_uv: Vector2::new(300.0, 200.0),
            inv_depth: 0.25,
            observations: vec![],
        };
        let obs = FeatureObservation {
            frame_id: 5,
            camera_id: 1,
            feature_id: 3,
            uv: Vector2::new(290.0, 200.0),
        };
        let factor = ReprojectionFactor::new(&landmark, &obs, &rig, 1.0, None);
        assert_eq!(factor.keys(), &[BlockId::InvDepth(3)]);

        // Residual is invariant to the body pose.
        let mut r = Vec::new();
        for pose in [
            Pose::identity(),
            Pose::new(
                Rotation::exp(&Vector3::new(0.2, -0.1, 0.6)),
                Vector3::new(4.0, -2.0, 1.0),
            ),
        ] {
            let values = make_values(5, 5, pose, pose, 3, 0.25);
            r.push(factor.evaluate(&values, false).unwrap().residual);
        }
        assert_relative_eq!(r[0], r[1], epsilon = 1e-9);
    }

    #[test]
    fn whitening_scales_residual() {
        let rig = stereo_rig();
        let landmark = Landmark {
            feature_id: 3,
            anchor_frame: 0,
            anchor_camera: 0,
            anchor_uv: Vector2::new(300.0, 200.0),
            inv_depth: 0.25,
            observations: vec![],
        };
        let obs = FeatureObservation {
            frame_id: 0,
            camera_id: 1,
            feature_id: 3,
            uv: Vector2::new(290.0, 200.0),
        };
        let values = make_values(0, 0, Pose::identity(), Pose::identity(), 3, 0.25);
        let plain = ReprojectionFactor::new(&landmark, &obs, &rig, 1.0, None)
            .evaluate(&values, false)
            .unwrap();
        let white = ReprojectionFactor::new(&landmark, &obs, &rig, 2.0, None)
            .evaluate(&values, false)
            .unwrap();
        assert_relative_eq!(plain.residual, 2.0 * white.residual, epsilon = 1e-12);
    }

    #[test]
    fn evaluate_none_when_behind_camera() {
        let rig = stereo_rig();
        let landmark = Landmark {
            feature_id: 3,
            anchor_frame: 0,
            anchor_camera: 0,
            anchor_uv: Vector2::new(300.0, 200.0),
            inv_depth: 0.25,
            observations: vec![],
        };
        let obs = FeatureObservation {
            frame_id: 1,
            camera_id: 0,
            feature_id: 3,
            uv: Vector2::new(290.0, 200.0),
        };
        let factor = ReprojectionFactor::new(&landmark, &obs, &rig, 1.0, None);

        // Negative inverse depth.
        let values = make_values(0, 1, Pose::identity(), Pose::identity(), 3, -0.5);
        assert!(factor.evaluate(&values, false).is_none());

        // Target so far forward the point is behind it.
        let ahead = Pose::new(Rotation::identity(), Vector3::new(100.0, 0.0, 0.0));
        let values = make_values(0, 1, Pose::identity(), ahead, 3, 0.25);
        assert!(factor.evaluate(&values, false).is_none());
    }

    #[test]
    fn triangulate_recovers_known_point() {
        let rig = stereo_rig();
        let mut rng = StdRng::seed_from_u64(24);
        for _ in 0..100 {
            let p_w = Vector3::new(
                rng.gen_range(2.0..10.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-1.0..1.0),
            );
            let body0 = Pose::identity();
            let body1 = Pose::new(
                Rotation::exp(&Vector3::new(0.0, 0.0, 0.05)),
                Vector3::new(0.0, -0.4, 0.05),
            );
            let mut views = Vec::new();
            for body in [body0, body1] {
                let cam_pose = body.compose(&rig.camera(0).extrinsic);
                let p_c = cam_pose.inverse().transform(&p_w);
                let uv = rig.camera(0).intrinsics.project(&p_c).unwrap();
                views.push((cam_pose, rig.camera(0).intrinsics.ray(&uv)));
            }
            let point = triangulate(&views).unwrap();
            assert_relative_eq!(point, p_w, epsilon = 1e-6);
        }
    }

    #[test]
    fn triangulate_rejects_degenerate_geometry() {
        let rig = stereo_rig();
        let cam = rig.camera(0);
        // Two identical views: no parallax.
        let pose = Pose::identity().compose(&cam.extrinsic);
        let ray = cam.intrinsics.ray(&Vector2::new(320.0, 240.0));
        assert!(triangulate(&[(pose, ray), (pose, ray)]).is_none());
        // Single view.
        assert!(triangulate(&[(pose, ray)]).is_none());
    }
}
