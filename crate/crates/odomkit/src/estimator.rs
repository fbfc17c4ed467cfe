//! Sliding-window odometry over camera and IMU factors.
//!
//! The estimator keeps a bounded window of frames. Each incoming frame is
//! initialized from the IMU prediction (or constant-velocity extrapolation
//! in stereo-only mode), its feature tracks extend or create landmarks, the
//! whole window is re-optimized, and the window is slid: when the new frame
//! is a keyframe the oldest frame is marginalized into a dense prior,
//! otherwise the new frame is discarded and its inertial interval is merged
//! into the next one.
//!
//! Gauge handling: before any marginalization a gauge factor pins the first
//! frame (full pose in stereo mode; position and yaw in IMU modes, where
//! gravity makes roll and pitch observable). Afterwards the prior carries
//! that information.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::camera::{triangulate, CameraRig, FeatureObservation, Landmark, ReprojectionFactor};
use crate::imu::{gravity, ImuError, ImuFactor, ImuNoise, ImuSample, NavState, Preintegration};
use crate::manifold::{Block, Pose, Rotation};
use crate::solver::{
    marginalize_system, BlockId, Factor, FactorGraph, GaugeFactor, GaugeMode, OptimizeReport,
    PriorFactor, SolveOptions, SolverError, Values,
};

/// Square-root weight of the gauge factor. Strong enough that the pinned
/// directions move by far less than 1e-6 under any realistic data pull.
const GAUGE_SQRT_WEIGHT: f64 = 1e6;
/// IMU span used by the static-alignment bootstrap in mono-imu mode.
const STATIC_INIT_SPAN: f64 = 0.5;
/// Depth floor below which a triangulation is treated as failed.
const MIN_TRIANGULATION_DEPTH: f64 = 1e-2;
/// Timestamp slack when matching IMU samples to frame boundaries.
const TIME_EPS: f64 = 1e-9;

/// One frame of feature observations.
#[derive(Debug, Clone)]
pub struct Frame {
    pub frame_id: u64,
    pub t: f64,
    pub observations: Vec<FeatureObservation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Stereo,
    MonoImu,
    StereoImu,
}

impl Mode {
    pub fn uses_imu(&self) -> bool {
        matches!(self, Mode::MonoImu | Mode::StereoImu)
    }

    pub fn gauge_mode(&self) -> GaugeMode {
        if self.uses_imu() {
            GaugeMode::PositionYaw
        } else {
            GaugeMode::Full
        }
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Mode, String> {
        match s.replace('-', "_").as_str() {
            "stereo" => Ok(Mode::Stereo),
            "mono_imu" => Ok(Mode::MonoImu),
            "stereo_imu" => Ok(Mode::StereoImu),
            other => Err(format!(
                "invalid mode '{other}', expected stereo, mono_imu, or stereo_imu"
            )),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Stereo => "stereo",
            Mode::MonoImu => "mono_imu",
            Mode::StereoImu => "stereo_imu",
        })
    }
}

#[derive(Debug, Clone)]
pub struct EstimatorConfig {
    pub mode: Mode,
    pub window_size: usize,
    pub rig: CameraRig,
    pub imu_noise: ImuNoise,
    pub gravity_norm: f64,
    pub sigma_px: f64,
    pub keyframe_parallax_px: f64,
    pub outlier_px: f64,
    /// Below this many tracked features a frame is flagged degraded.
    pub min_features: usize,
    pub huber_px: f64,
    pub solve: SolveOptions,
}

impl EstimatorConfig {
    pub fn new(mode: Mode, rig: CameraRig, imu_noise: ImuNoise) -> EstimatorConfig {
        EstimatorConfig {
            mode,
            window_size: 10,
            rig,
            imu_noise,
            gravity_norm: 9.81,
            sigma_px: 1.0,
            keyframe_parallax_px: 10.0,
            outlier_px: 3.0,
            min_features: 8,
            huber_px: 1.0,
            solve: SolveOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimateStatus {
    /// Waiting for the bootstrap to complete (mono-imu static alignment).
    Initializing,
    Ok,
    /// Fewer tracked features than `min_features`; the pose leans on the
    /// motion model alone.
    Degraded,
}

#[derive(Debug, Clone)]
pub struct PoseEstimate {
    pub frame_id: u64,
    pub t: f64,
    pub pose: Pose,
    pub velocity: Vector3<f64>,
    pub status: EstimateStatus,
    pub tracked_features: usize,
    pub solve: Option<OptimizeReport>,
}

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("IMU samples are not used in stereo mode")]
    ImuNotUsed,
    #[error("out-of-order IMU sample at t={t}, last accepted was t={last}")]
    OutOfOrderImu { t: f64, last: f64 },
    #[error("out-of-order frame at t={t}, last was t={last}")]
    OutOfOrderFrame { t: f64, last: f64 },
    #[error("duplicate frame id {0}")]
    DuplicateFrame(u64),
    #[error(transparent)]
    Imu(#[from] ImuError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone)]
struct WindowFrame {
    frame_id: u64,
    t: f64,
}

/// Initial depth of a feature track from its observations and the current
/// body poses, as inverse depth in the first observation's camera. `None`
/// when the geometry is degenerate (insufficient parallax, behind a camera,
/// or closer than the depth floor).
pub fn triangulate_observations(
    observations: &[(Pose, FeatureObservation)],
    rig: &CameraRig,
) -> Option<f64> {
    if observations.len() < 2 {
        return None;
    }
    let views: Vec<(Pose, Vector3<f64>)> = observations
        .iter()
        .map(|(body, obs)| {
            let cam = rig.camera(obs.camera_id);
            (body.compose(&cam.extrinsic), cam.intrinsics.ray(&obs.uv))
        })
        .collect();
    let p_world = triangulate(&views)?;
    let (body0, obs0) = &observations[0];
    let cam0 = rig.camera(obs0.camera_id);
    let p_cam = body0
        .compose(&cam0.extrinsic)
        .inverse()
        .transform(&p_world);
    if p_cam.z <= MIN_TRIANGULATION_DEPTH {
        return None;
    }
    Some(1.0 / p_cam.z)
}

/// Attitude that maps the measured static specific force onto world +z:
/// the minimal (yaw-free) rotation aligning gravity.
fn attitude_from_gravity(mean_accel: &Vector3<f64>) -> Rotation {
    let f = mean_accel.normalize();
    let e3 = Vector3::z();
    let cross = f.cross(&e3);
    let s = cross.norm();
    let c = f.dot(&e3);
    if s < 1e-12 {
        if c > 0.0 {
            Rotation::identity()
        } else {
            Rotation::exp(&Vector3::new(std::f64::consts::PI, 0.0, 0.0))
        }
    } else {
        Rotation::exp(&(cross / s * s.atan2(c)))
    }
}

pub struct Estimator {
    config: EstimatorConfig,
    gravity: Vector3<f64>,
    values: Values,
    window: Vec<WindowFrame>,
    /// One preintegration per adjacent frame pair, IMU modes only.
    preints: Vec<Preintegration>,
    landmarks: BTreeMap<u64, Landmark>,
    pending: BTreeMap<u64, Vec<FeatureObservation>>,
    rejected: BTreeSet<u64>,
    prior: Option<PriorFactor>,
    /// Gauge pin, active until the first marginalization folds it in.
    gauge: Option<(u64, Pose)>,
    /// Samples since the last frame; the first entry sits at that frame's
    /// timestamp so the next interval starts at the boundary.
    open_imu: Vec<ImuSample>,
    last_imu_t: Option<f64>,
    last_frame_t: Option<f64>,
    imu_rejections: u64,
    initialized: bool,
    init_frames: Vec<Frame>,
    init_state: NavState,
    last_keyframe_obs: BTreeMap<(u64, usize), Vector2<f64>>,
    last_keyframe_features: usize,
}

impl Estimator {
    pub fn new(config: EstimatorConfig) -> Estimator {
        let g = gravity(config.gravity_norm);
        let initialized = config.mode != Mode::MonoImu;
        Estimator {
            config,
            gravity: g,
            values: Values::new(),
            window: Vec::new(),
            preints: Vec::new(),
            landmarks: BTreeMap::new(),
            pending: BTreeMap::new(),
            rejected: BTreeSet::new(),
            prior: None,
            gauge: None,
            open_imu: Vec::new(),
            last_imu_t: None,
            last_frame_t: None,
            imu_rejections: 0,
            initialized,
            init_frames: Vec::new(),
            init_state: NavState::identity(),
            last_keyframe_obs: BTreeMap::new(),
            last_keyframe_features: 0,
        }
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    /// Feeds one IMU sample. Samples must not go backwards in time;
    /// violations are counted and reported.
    pub fn process_imu(&mut self, sample: ImuSample) -> Result<(), EstimatorError> {
        if !self.config.mode.uses_imu() {
            return Err(EstimatorError::ImuNotUsed);
        }
        if let Some(last) = self.last_imu_t {
            if sample.t < last {
                self.imu_rejections += 1;
                return Err(EstimatorError::OutOfOrderImu { t: sample.t, last });
            }
        }
        self.last_imu_t = Some(sample.t);
        self.open_imu.push(sample);
        Ok(())
    }

    /// Processes one frame of feature observations and returns the pose
    /// estimate for it.
    pub fn process_frame(&mut self, frame: Frame) -> Result<PoseEstimate, EstimatorError> {
        if let Some(last) = self.last_frame_t {
            if frame.t <= last {
                return Err(EstimatorError::OutOfOrderFrame { t: frame.t, last });
            }
        }
        if self.window.iter().any(|f| f.frame_id == frame.frame_id)
            || self.init_frames.iter().any(|f| f.frame_id == frame.frame_id)
        {
            return Err(EstimatorError::DuplicateFrame(frame.frame_id));
        }
        self.last_frame_t = Some(frame.t);

        if !self.initialized {
            let frame_id = frame.frame_id;
            let t = frame.t;
            let tracked = unique_features(&frame.observations);
            self.init_frames.push(frame);
            let span = match (self.open_imu.first(), self.last_imu_t) {
                (Some(first), Some(last)) => last - first.t,
                _ => 0.0,
            };
            if span + TIME_EPS < STATIC_INIT_SPAN {
                return Ok(PoseEstimate {
                    frame_id,
                    t,
                    pose: Pose::identity(),
                    velocity: Vector3::zeros(),
                    status: EstimateStatus::Initializing,
                    tracked_features: tracked,
                    solve: None,
                });
            }
            self.run_static_init();
            let buffered = std::mem::take(&mut self.init_frames);
            let mut last_estimate = None;
            for f in buffered {
                last_estimate = Some(self.ingest_frame(f)?);
            }
            return Ok(last_estimate.expect("at least one buffered frame"));
        }

        self.ingest_frame(frame)
    }

    /// Propagates the newest frame state through the buffered IMU samples.
    pub fn prediction(&self) -> Option<NavState> {
        if !self.config.mode.uses_imu() {
            return None;
        }
        let state = self.nav_state(self.window.last()?.frame_id);
        if self.open_imu.len() < 2 {
            return Some(state);
        }
        let preint = Preintegration::from_samples(
            &self.open_imu,
            state.accel_bias,
            state.gyro_bias,
            self.config.imu_noise,
        )
        .ok()?;
        Some(preint.predict(&state, &self.gravity))
    }

    /// Estimates attitude and gyro bias from the buffered pre-motion
    /// samples, assuming the platform is at rest.
    fn run_static_init(&mut self) {
        let t0 = self.open_imu.first().map(|s| s.t).unwrap_or(0.0);
        let cutoff = t0 + STATIC_INIT_SPAN + TIME_EPS;
        let mut mean_accel = Vector3::zeros();
        let mut mean_gyro = Vector3::zeros();
        let mut count = 0usize;
        for s in self.open_imu.iter().filter(|s| s.t <= cutoff) {
            mean_accel += s.accel;
            mean_gyro += s.gyro;
            count += 1;
        }
        if count > 0 {
            mean_accel /= count as f64;
            mean_gyro /= count as f64;
            self.init_state = NavState {
                pose: Pose::new(attitude_from_gravity(&mean_accel), Vector3::zeros()),
                velocity: Vector3::zeros(),
                accel_bias: Vector3::zeros(),
                gyro_bias: mean_gyro,
            };
        }
        self.initialized = true;
    }

    fn nav_state(&self, frame_id: u64) -> NavState {
        let pose = self.values.pose(frame_id);
        let velocity = match self.values.get(&BlockId::Velocity(frame_id)) {
            Some(Block::Velocity(v)) => *v,
            _ => Vector3::zeros(),
        };
        let (accel_bias, gyro_bias) = match self.values.get(&BlockId::Bias(frame_id)) {
            Some(Block::Bias { accel, gyro }) => (*accel, *gyro),
            _ => (Vector3::zeros(), Vector3::zeros()),
        };
        NavState {
            pose,
            velocity,
            accel_bias,
            gyro_bias,
        }
    }

    /// Drains buffered samples up to `t` and returns them, leaving a
    /// zero-order-hold boundary sample at `t` for the next interval.
    fn close_imu_interval(&mut self, t: f64) -> Vec<ImuSample> {
        let mut closed = Vec::new();
        let mut rest = Vec::new();
        for s in self.open_imu.drain(..) {
            if s.t <= t + TIME_EPS {
                closed.push(s);
            } else {
                rest.push(s);
            }
        }
        let boundary = match (closed.last(), rest.first()) {
            (Some(last), _) if (last.t - t).abs() <= TIME_EPS => Some(*last),
            (Some(last), _) => {
                let b = ImuSample { t, ..*last };
                closed.push(b);
                Some(b)
            }
            (None, Some(next)) => Some(ImuSample { t, ..*next }),
            (None, None) => None,
        };
        if let Some(b) = boundary {
            self.open_imu.push(b);
        }
        self.open_imu.extend(rest);
        closed
    }

    fn ingest_frame(&mut self, frame: Frame) -> Result<PoseEstimate, EstimatorError> {
        let imu_mode = self.config.mode.uses_imu();
        let is_first = self.window.is_empty();
        let frame_id = frame.frame_id;

        // Close the inertial interval and initialize the new frame state.
        let mut new_preint = None;
        if imu_mode {
            let samples = self.close_imu_interval(frame.t);
            if !is_first {
                let prev = self.nav_state(self.window.last().unwrap().frame_id);
                let preint = Preintegration::from_samples(
                    &samples,
                    prev.accel_bias,
                    prev.gyro_bias,
                    self.config.imu_noise,
                )?;
                new_preint = Some(preint);
            }
        }

        let init = if is_first {
            self.init_state
        } else if let Some(preint) = &new_preint {
            let prev = self.nav_state(self.window.last().unwrap().frame_id);
            if preint.dt() > 0.0 {
                preint.predict(&prev, &self.gravity)
            } else {
                prev
            }
        } else {
            // Constant-velocity extrapolation from the last two poses.
            let n = self.window.len();
            let pose = if n >= 2 {
                let prev2 = self.values.pose(self.window[n - 2].frame_id);
                let prev = self.values.pose(self.window[n - 1].frame_id);
                prev.compose(&prev2.inverse().compose(&prev))
            } else {
                self.values.pose(self.window[n - 1].frame_id)
            };
            NavState {
                pose,
                ..NavState::identity()
            }
        };

        self.values
            .insert(BlockId::Pose(frame_id), Block::Pose(init.pose));
        if imu_mode {
            self.values
                .insert(BlockId::Velocity(frame_id), Block::Velocity(init.velocity));
            self.values.insert(
                BlockId::Bias(frame_id),
                Block::Bias {
                    accel: init.accel_bias,
                    gyro: init.gyro_bias,
                },
            );
            if let Some(preint) = new_preint {
                self.preints.push(preint);
            }
        }
        self.window.push(WindowFrame {
            frame_id,
            t: frame.t,
        });
        if is_first {
            self.gauge = Some((frame_id, init.pose));
        }

        // Feature bookkeeping, then the window solve.
        let tracked = self.register_observations(&frame);
        self.activate_pending();
        let report = self.optimize()?;
        self.reject_outliers();

        let pose = self.values.pose(frame_id);
        let velocity = match self.values.get(&BlockId::Velocity(frame_id)) {
            Some(Block::Velocity(v)) => *v,
            _ => Vector3::zeros(),
        };

        // Keyframe policy and window sliding.
        let is_keyframe = is_first || self.keyframe_decision(&frame.observations);
        if is_keyframe {
            self.last_keyframe_obs = frame
                .observations
                .iter()
                .map(|o| ((o.feature_id, o.camera_id), o.uv))
                .collect();
            self.last_keyframe_features = tracked;
        }
        if self.window.len() > self.config.window_size {
            if is_keyframe {
                self.marginalize_oldest()?;
            } else {
                self.discard_newest();
            }
        }

        let status = if tracked < self.config.min_features {
            EstimateStatus::Degraded
        } else {
            EstimateStatus::Ok
        };
        Ok(PoseEstimate {
            frame_id,
            t: frame.t,
            pose,
            velocity,
            status,
            tracked_features: tracked,
            solve: Some(report),
        })
    }

    fn register_observations(&mut self, frame: &Frame) -> usize {
        let mut unique = BTreeSet::new();
        for obs in &frame.observations {
            if obs.camera_id >= self.config.rig.len() || self.rejected.contains(&obs.feature_id) {
                continue;
            }
            unique.insert(obs.feature_id);
            if let Some(lm) = self.landmarks.get_mut(&obs.feature_id) {
                lm.observations.push(*obs);
            } else {
                self.pending.entry(obs.feature_id).or_default().push(*obs);
            }
        }
        unique.len()
    }

    /// Promotes pending tracks that triangulate successfully into active
    /// landmarks anchored at their earliest observation.
    fn activate_pending(&mut self) {
        let ready: Vec<u64> = self
            .pending
            .iter()
            .filter(|(_, obs)| obs.len() >= 2)
            .map(|(id, _)| *id)
            .collect();
        for id in ready {
            let obs = &self.pending[&id];
            let with_poses: Vec<(Pose, FeatureObservation)> = obs
                .iter()
                .map(|o| (self.values.pose(o.frame_id), *o))
                .collect();
            let Some(inv_depth) = triangulate_observations(&with_poses, &self.config.rig) else {
                continue;
            };
            let observations = self.pending.remove(&id).unwrap();
            let anchor = observations[0];
            self.landmarks.insert(
                id,
                Landmark {
                    feature_id: id,
                    anchor_frame: anchor.frame_id,
                    anchor_camera: anchor.camera_id,
                    anchor_uv: anchor.uv,
                    inv_depth,
                    observations,
                },
            );
            self.values
                .insert(BlockId::InvDepth(id), Block::InvDepth(inv_depth));
        }
    }

    /// Collects every active factor of the window into one graph.
    fn build_graph(&self) -> Result<FactorGraph, EstimatorError> {
        let mut graph = FactorGraph::new();
        if let Some(prior) = &self.prior {
            graph.add(Box::new(prior.clone()));
        } else if let Some((frame, reference)) = &self.gauge {
            graph.add(Box::new(GaugeFactor::new(
                *frame,
                *reference,
                self.config.mode.gauge_mode(),
                GAUGE_SQRT_WEIGHT,
            )));
        }
        if self.config.mode.uses_imu() {
            for (k, preint) in self.preints.iter().enumerate() {
                if preint.dt() <= 0.0 {
                    continue;
                }
                graph.add(Box::new(ImuFactor::new(
                    self.window[k].frame_id,
                    self.window[k + 1].frame_id,
                    preint.clone(),
                    self.gravity,
                )?));
            }
        }
        for lm in self.landmarks.values() {
            for obs in &lm.observations {
                if obs.frame_id == lm.anchor_frame && obs.camera_id == lm.anchor_camera {
                    continue;
                }
                graph.add(Box::new(ReprojectionFactor::new(
                    lm,
                    obs,
                    &self.config.rig,
                    self.config.sigma_px,
                    Some(self.config.huber_px),
                )));
            }
        }
        Ok(graph)
    }

    fn optimize(&mut self) -> Result<OptimizeReport, EstimatorError> {
        if self.config.mode.uses_imu() {
            for k in 0..self.preints.len() {
                let state = self.nav_state(self.window[k].frame_id);
                if self.preints[k].needs_repropagation(&state.accel_bias, &state.gyro_bias) {
                    self.preints[k].repropagate(state.accel_bias, state.gyro_bias);
                }
            }
        }
        let graph = self.build_graph()?;
        Ok(graph.optimize(&mut self.values, &self.config.solve)?)
    }

    /// Drops landmarks whose mean reprojection error exceeds the configured
    /// threshold (or that fail to project at all). Returns how many were
    /// removed; removed features stay blacklisted.
    pub fn reject_outliers(&mut self) -> usize {
        let ids: Vec<u64> = self.landmarks.keys().copied().collect();
        let mut removed = 0;
        for id in ids {
            let lm = &self.landmarks[&id];
            let mut sum_px = 0.0;
            let mut count = 0usize;
            let mut broken = false;
            for obs in &lm.observations {
                if obs.frame_id == lm.anchor_frame && obs.camera_id == lm.anchor_camera {
                    continue;
                }
                let factor =
                    ReprojectionFactor::new(lm, obs, &self.config.rig, self.config.sigma_px, None);
                match factor.evaluate(&self.values, false) {
                    Some(eval) => {
                        sum_px += eval.residual.norm() * self.config.sigma_px;
                        count += 1;
                    }
                    None => broken = true,
                }
            }
            if count == 0 && !broken {
                continue;
            }
            let mean = if count > 0 {
                sum_px / count as f64
            } else {
                f64::INFINITY
            };
            if broken || mean > self.config.outlier_px {
                self.landmarks.remove(&id);
                self.values.remove(&BlockId::InvDepth(id));
                self.rejected.insert(id);
                removed += 1;
            }
        }
        removed
    }

    /// Keyframe test for a new frame: enough parallax against the last
    /// keyframe, or too few of its features still tracked.
    pub fn keyframe_decision(&self, observations: &[FeatureObservation]) -> bool {
        if self.last_keyframe_features == 0 {
            return true;
        }
        let mut shared = BTreeSet::new();
        let mut parallax_sum = 0.0;
        let mut parallax_n = 0usize;
        for obs in observations {
            if let Some(prev) = self.last_keyframe_obs.get(&(obs.feature_id, obs.camera_id)) {
                shared.insert(obs.feature_id);
                parallax_sum += (obs.uv - prev).norm();
                parallax_n += 1;
            }
        }
        if (shared.len() as f64) < 0.6 * self.last_keyframe_features as f64 {
            return true;
        }
        if parallax_n == 0 {
            return true;
        }
        parallax_sum / parallax_n as f64 > self.config.keyframe_parallax_px
    }

    /// Folds everything touching the oldest frame into the dense prior and
    /// drops the frame. Landmarks anchored there are eliminated alongside it
    /// and restarted at their next observing frame (or dropped when too few
    /// observations remain).
    fn marginalize_oldest(&mut self) -> Result<(), EstimatorError> {
        let imu_mode = self.config.mode.uses_imu();
        let oldest = self.window[0].frame_id;
        let second = self.window[1].frame_id;

        let mut marg: BTreeSet<BlockId> = BTreeSet::new();
        marg.insert(BlockId::Pose(oldest));
        if imu_mode {
            marg.insert(BlockId::Velocity(oldest));
            marg.insert(BlockId::Bias(oldest));
        }
        let anchored: Vec<u64> = self
            .landmarks
            .values()
            .filter(|lm| lm.anchor_frame == oldest)
            .map(|lm| lm.feature_id)
            .collect();
        for id in &anchored {
            marg.insert(BlockId::InvDepth(*id));
        }

        let mut graph = FactorGraph::new();
        if let Some(prior) = self.prior.take() {
            graph.add(Box::new(prior));
        } else if let Some((frame, reference)) = self.gauge.take() {
            graph.add(Box::new(GaugeFactor::new(
                frame,
                reference,
                self.config.mode.gauge_mode(),
                GAUGE_SQRT_WEIGHT,
            )));
        }
        if imu_mode && !self.preints.is_empty() && self.preints[0].dt() > 0.0 {
            graph.add(Box::new(ImuFactor::new(
                oldest,
                second,
                self.preints[0].clone(),
                self.gravity,
            )?));
        }
        for id in &anchored {
            let lm = &self.landmarks[id];
            for obs in &lm.observations {
                if obs.frame_id == lm.anchor_frame && obs.camera_id == lm.anchor_camera {
                    continue;
                }
                graph.add(Box::new(ReprojectionFactor::new(
                    lm,
                    obs,
                    &self.config.rig,
                    self.config.sigma_px,
                    Some(self.config.huber_px),
                )));
            }
        }

        if !graph.is_empty() {
            let layout = graph.layout(&self.values)?;
            let lin = graph.linearize(&self.values, &layout)?;
            let system = marginalize_system(&lin.h, &lin.b, &layout, &marg);
            if !system.kept_ids.is_empty() {
                let lin_points: Vec<Block> = system
                    .kept_ids
                    .iter()
                    .map(|id| *self.values.get(id).expect("retained block exists"))
                    .collect();
                self.prior = Some(PriorFactor::from_information(
                    system.kept_ids,
                    lin_points,
                    &system.h,
                    &system.b,
                ));
            }
        }

        // Restart the anchored landmarks at their next observing frame,
        // reconstructing the point from the optimized depth estimate.
        for id in anchored {
            let lm = self.landmarks.remove(&id).unwrap();
            let inv_depth = match self.values.get(&BlockId::InvDepth(id)) {
                Some(Block::InvDepth(rho)) => *rho,
                _ => lm.inv_depth,
            };
            self.values.remove(&BlockId::InvDepth(id));
            if inv_depth <= 0.0 {
                continue;
            }
            let world = self
                .values
                .pose(lm.anchor_frame)
                .compose(&self.config.rig.camera(lm.anchor_camera).extrinsic)
                .transform(
                    &(self.config.rig.camera(lm.anchor_camera).intrinsics.ray(&lm.anchor_uv)
                        / inv_depth),
                );
            let remaining: Vec<FeatureObservation> = lm
                .observations
                .into_iter()
                .filter(|o| o.frame_id != oldest)
                .collect();
            if remaining.len() < 2 {
                continue;
            }
            let anchor = remaining[0];
            let cam = self.config.rig.camera(anchor.camera_id);
            let p_cam = self
                .values
                .pose(anchor.frame_id)
                .compose(&cam.extrinsic)
                .inverse()
                .transform(&world);
            if p_cam.z <= MIN_TRIANGULATION_DEPTH {
                continue;
            }
            let inv_depth = 1.0 / p_cam.z;
            self.landmarks.insert(
                id,
                Landmark {
                    feature_id: id,
                    anchor_frame: anchor.frame_id,
                    anchor_camera: anchor.camera_id,
                    anchor_uv: anchor.uv,
                    inv_depth,
                    observations: remaining,
                },
            );
            self.values
                .insert(BlockId::InvDepth(id), Block::InvDepth(inv_depth));
        }

        // Remove the frame itself and any dangling references to it.
        self.values.remove(&BlockId::Pose(oldest));
        if imu_mode {
            self.values.remove(&BlockId::Velocity(oldest));
            self.values.remove(&BlockId::Bias(oldest));
            self.preints.remove(0);
        }
        self.window.remove(0);
        for lm in self.landmarks.values_mut() {
            lm.observations.retain(|o| o.frame_id != oldest);
        }
        for obs in self.pending.values_mut() {
            obs.retain(|o| o.frame_id != oldest);
        }
        self.pending.retain(|_, obs| !obs.is_empty());
        Ok(())
    }

    /// Drops the newest (non-keyframe) frame, returning its IMU samples to
    /// the open buffer so the next interval spans both.
    fn discard_newest(&mut self) {
        let newest = self.window.pop().expect("window not empty");
        let id = newest.frame_id;
        self.values.remove(&BlockId::Pose(id));
        if self.config.mode.uses_imu() {
            self.values.remove(&BlockId::Velocity(id));
            self.values.remove(&BlockId::Bias(id));
            if let Some(preint) = self.preints.pop() {
                let mut merged = preint.samples().to_vec();
                for s in self.open_imu.drain(..) {
                    if merged.last().map(|m| s.t > m.t + TIME_EPS).unwrap_or(true) {
                        merged.push(s);
                    }
                }
                self.open_imu = merged;
            }
        }
        self.landmarks.retain(|_, lm| {
            if lm.anchor_frame == id {
                self.values.remove(&BlockId::InvDepth(lm.feature_id));
                false
            } else {
                lm.observations.retain(|o| o.frame_id != id);
                true
            }
        });
        for obs in self.pending.values_mut() {
            obs.retain(|o| o.frame_id != id);
        }
        self.pending.retain(|_, obs| !obs.is_empty());
    }

    pub fn window_frames(&self) -> Vec<u64> {
        self.window.iter().map(|f| f.frame_id).collect()
    }

    /// Frame ids and timestamps currently in the window, oldest first.
    pub fn window_times(&self) -> Vec<(u64, f64)> {
        self.window.iter().map(|f| (f.frame_id, f.t)).collect()
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn preintegrations(&self) -> &[Preintegration] {
        &self.preints
    }

    pub fn active_landmarks(&self) -> usize {
        self.landmarks.len()
    }

    pub fn landmark(&self, feature_id: u64) -> Option<&Landmark> {
        self.landmarks.get(&feature_id)
    }

    pub fn rejected_features(&self) -> &BTreeSet<u64> {
        &self.rejected
    }

    pub fn pose_of(&self, frame_id: u64) -> Option<Pose> {
        match self.values.get(&BlockId::Pose(frame_id)) {
            Some(Block::Pose(p)) => Some(*p),
            _ => None,
        }
    }

    pub fn velocity_of(&self, frame_id: u64) -> Option<Vector3<f64>> {
        match self.values.get(&BlockId::Velocity(frame_id)) {
            Some(Block::Velocity(v)) => Some(*v),
            _ => None,
        }
    }

    pub fn bias_of(&self, frame_id: u64) -> Option<(Vector3<f64>, Vector3<f64>)> {
        match self.values.get(&BlockId::Bias(frame_id)) {
            Some(Block::Bias { accel, gyro }) => Some((*accel, *gyro)),
            _ => None,
        }
    }

    pub fn prior(&self) -> Option<&PriorFactor> {
        self.prior.as_ref()
    }

    pub fn values(&self) -> &Values {
        &self.values
    }

    pub fn imu_rejections(&self) -> u64 {
        self.imu_rejections
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }
}

fn unique_features(observations: &[FeatureObservation]) -> usize {
    observations
        .iter()
        .map(|o| o.feature_id)
        .collect::<BTreeSet<_>>()
        .len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{default_rig, Scenario};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn stereo_config() -> EstimatorConfig {
        let scenario = Scenario::preset("circle", 0).unwrap();
        EstimatorConfig::new(Mode::Stereo, scenario.rig.clone(), scenario.imu_noise)
    }

    fn run_dataset(
        config: EstimatorConfig,
        data: &crate::io::Dataset,
        frames: usize,
    ) -> (Estimator, Vec<PoseEstimate>) {
        let mut est = Estimator::new(config);
        let mut out = Vec::new();
        let mut imu_iter = data.imu.iter().peekable();
        for frame in data.frames.iter().take(frames) {
            while let Some(s) = imu_iter.peek() {
                if s.t <= frame.t + TIME_EPS {
                    let _ = est.process_imu(**s);
                    imu_iter.next();
                } else {
                    break;
                }
            }
            out.push(est.process_frame(frame.clone()).unwrap());
        }
        (est, out)
    }

    #[test]
    fn mode_parsing_roundtrip() {
        for mode in [Mode::Stereo, Mode::MonoImu, Mode::StereoImu] {
            assert_eq!(Mode::from_str(&mode.to_string()).unwrap(), mode);
        }
        assert_eq!(Mode::from_str("stereo-imu").unwrap(), Mode::StereoImu);
        assert!(Mode::from_str("lidar").is_err());
    }

    #[test]
    fn stereo_pair_triangulates_exact_inverse_depth() {
        // Feature at depth 2 m in camera 0 of the 0.1 m baseline rig.
        let rig = default_rig();
        let body = Pose::identity();
        let p_cam0 = Vector3::new(0.3, -0.2, 2.0);
        let world = body
            .compose(&rig.camera(0).extrinsic)
            .transform(&p_cam0);
        let mut obs = Vec::new();
        for cam_id in 0..2 {
            let cam = rig.camera(cam_id);
            let p_c = body.compose(&cam.extrinsic).inverse().transform(&world);
            obs.push((
                body,
                FeatureObservation {
                    frame_id: 0,
                    camera_id: cam_id,
                    feature_id: 1,
                    uv: cam.intrinsics.project(&p_c).unwrap(),
                },
            ));
        }
        let inv_depth = triangulate_observations(&obs, &rig).unwrap();
        assert_relative_eq!(inv_depth, 0.5, epsilon = 1e-9);
    }

    #[test]
    fn zero_baseline_fails_to_triangulate() {
        let rig = default_rig();
        let body = Pose::identity();
        let cam = rig.camera(0);
        let uv = Vector2::new(330.0, 250.0);
        let obs: Vec<(Pose, FeatureObservation)> = (0..2)
            .map(|k| {
                (
                    body,
                    FeatureObservation {
                        frame_id: k,
                        camera_id: 0,
                        feature_id: 1,
                        uv,
                    },
                )
            })
            .collect();
        let _ = cam;
        assert!(triangulate_observations(&obs, &rig).is_none());
    }

    /// Five noisy views with 0.4 m of total baseline recover a 5 m depth at
    /// the geometric accuracy limit, roughly z * sigma / (f * b) = 2% here.
    #[test]
    fn triangulation_depth_error_under_pixel_noise() {
        let rig = default_rig();
        let cam = rig.camera(0);
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let mut rel_err_sum = 0.0;
        let trials = 200;
        for _ in 0..trials {
            let depth = 5.0;
            let world = Vector3::new(
                depth + rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            );
            let mut obs = Vec::new();
            for k in 0..5 {
                // Body slides sideways 10 cm per view: 0.4 m total baseline.
                let body = Pose::new(
                    Rotation::identity(),
                    Vector3::new(0.0, 0.1 * k as f64, 0.0),
                );
                let p_c = body.compose(&cam.extrinsic).inverse().transform(&world);
                let mut uv = cam.intrinsics.project(&p_c).unwrap();
                uv.x += 0.5 * rng.sample::<f64, _>(StandardNormal);
                uv.y += 0.5 * rng.sample::<f64, _>(StandardNormal);
                obs.push((
                    body,
                    FeatureObservation {
                        frame_id: k as u64,
                        camera_id: 0,
                        feature_id: 1,
                        uv,
                    },
                ));
            }
            let inv_depth = triangulate_observations(&obs, &rig).unwrap();
            let p_c0 = obs[0]
                .0
                .compose(&cam.extrinsic)
                .inverse()
                .transform(&world);
            rel_err_sum += (1.0 / inv_depth - p_c0.z).abs() / p_c0.z;
        }
        let mean_rel_err = rel_err_sum / trials as f64;
        assert!(mean_rel_err < 0.03, "mean relative error {mean_rel_err}");
    }

    #[test]
    fn imu_rejected_in_stereo_mode() {
        let mut est = Estimator::new(stereo_config());
        let sample = ImuSample {
            t: 0.0,
            gyro: Vector3::zeros(),
            accel: Vector3::new(0.0, 0.0, 9.81),
        };
        assert!(matches!(
            est.process_imu(sample),
            Err(EstimatorError::ImuNotUsed)
        ));
    }

    #[test]
    fn out_of_order_imu_is_counted() {
        let scenario = Scenario::preset("circle", 0).unwrap();
        let mut config =
            EstimatorConfig::new(Mode::StereoImu, scenario.rig.clone(), scenario.imu_noise);
        config.gravity_norm = scenario.gravity_norm;
        let mut est = Estimator::new(config);
        let mk = |t: f64| ImuSample {
            t,
            gyro: Vector3::zeros(),
            accel: Vector3::new(0.0, 0.0, 9.81),
        };
        est.process_imu(mk(0.1)).unwrap();
        assert!(matches!(
            est.process_imu(mk(0.05)),
            Err(EstimatorError::OutOfOrderImu { .. })
        ));
        assert_eq!(est.imu_rejections(), 1);
        est.process_imu(mk(0.2)).unwrap();
        assert_eq!(est.imu_rejections(), 1);
    }

    #[test]
    fn stationary_prediction_stays_put() {
        let scenario = Scenario::preset("static", 0).unwrap();
        let data = scenario.synthesize_ideal();
        let mut config =
            EstimatorConfig::new(Mode::StereoImu, scenario.rig.clone(), scenario.imu_noise);
        config.gravity_norm = scenario.gravity_norm;
        let mut est = Estimator::new(config);
        est.process_frame(data.frames[0].clone()).unwrap();
        for s in data.imu.iter().filter(|s| s.t > 0.0 && s.t <= 1.0) {
            est.process_imu(*s).unwrap();
        }
        let pred = est.prediction().unwrap();
        assert!(pred.pose.translation.norm() < 1e-6);
        assert!(pred.velocity.norm() < 1e-6);
    }

    #[test]
    fn intervals_cover_exactly_the_frame_gaps() {
        let scenario = Scenario::preset("circle", 1).unwrap();
        let data = scenario.synthesize_ideal();
        let config =
            EstimatorConfig::new(Mode::StereoImu, scenario.rig.clone(), scenario.imu_noise);
        let (est, _) = run_dataset(config, &data, 6);
        assert_eq!(est.window_len(), 6);
        assert_eq!(est.preintegrations().len(), 5);
        for preint in est.preintegrations() {
            assert_relative_eq!(preint.dt(), 0.05, epsilon = 1e-9);
        }
    }

    #[test]
    fn static_stereo_pair_relative_pose_is_identity() {
        let scenario = Scenario::preset("static", 3).unwrap();
        let data = scenario.synthesize_ideal();
        let config = EstimatorConfig::new(Mode::Stereo, scenario.rig.clone(), scenario.imu_noise);
        let (est, out) = run_dataset(config, &data, 2);
        assert_eq!(out.len(), 2);
        let p0 = est.pose_of(0).unwrap();
        let p1 = est.pose_of(1).unwrap();
        let rel = p0.inverse().compose(&p1);
        assert!(rel.translation.norm() < 1e-9);
        assert!(rel.rotation.boxminus(&Rotation::identity()).norm() < 1e-9);
    }

    #[test]
    fn keyframe_policy_cases() {
        let mut est = Estimator::new(stereo_config());
        let obs: Vec<FeatureObservation> = (0..20)
            .map(|k| FeatureObservation {
                frame_id: 0,
                camera_id: 0,
                feature_id: k,
                uv: Vector2::new(100.0 + 10.0 * k as f64, 200.0),
            })
            .collect();
        est.last_keyframe_obs = obs
            .iter()
            .map(|o| ((o.feature_id, o.camera_id), o.uv))
            .collect();
        est.last_keyframe_features = 20;

        // Identical tracks: no parallax, nothing lost.
        assert!(!est.keyframe_decision(&obs));

        // Mean parallax at twice the threshold.
        let shifted: Vec<FeatureObservation> = obs
            .iter()
            .map(|o| FeatureObservation {
                uv: o.uv + Vector2::new(2.0 * est.config.keyframe_parallax_px, 0.0),
                ..*o
            })
            .collect();
        assert!(est.keyframe_decision(&shifted));

        // Half the tracks lost, zero parallax on the rest.
        let half: Vec<FeatureObservation> = obs.iter().take(10).copied().collect();
        assert!(est.keyframe_decision(&half));
    }

    #[test]
    fn window_never_exceeds_capacity_and_prior_covers_frames_only() {
        let scenario = Scenario::preset("circle", 7).unwrap();
        let data = scenario.synthesize_ideal();
        let config =
            EstimatorConfig::new(Mode::StereoImu, scenario.rig.clone(), scenario.imu_noise);
        let window_size = config.window_size;
        let mut est = Estimator::new(config);
        let mut imu_iter = data.imu.iter().peekable();
        for frame in data.frames.iter().take(60) {
            while let Some(s) = imu_iter.peek() {
                if s.t <= frame.t + TIME_EPS {
                    est.process_imu(**s).unwrap();
                    imu_iter.next();
                } else {
                    break;
                }
            }
            est.process_frame(frame.clone()).unwrap();
            assert!(est.window_len() <= window_size);
            assert_eq!(est.preintegrations().len(), est.window_len() - 1);
            for lm_id in est.landmarks.keys() {
                let lm = &est.landmarks[lm_id];
                assert!(est.window_frames().contains(&lm.anchor_frame));
            }
        }
        let prior = est.prior().expect("marginalization ran");
        for key in prior.keys() {
            assert!(
                !key.is_landmark(),
                "prior must stay dense over frame blocks only, found {key:?}"
            );
        }
    }

    /// On noise-free data every frame's converged cost sits at the
    /// integration-error floor; any modeling mismatch between synthesis and
    /// estimation would blow this up by many orders of magnitude.
    #[test]
    fn noise_free_window_cost_converges_to_zero() {
        let scenario = Scenario::preset("circle", 5).unwrap();
        let data = scenario.synthesize_ideal();
        let config =
            EstimatorConfig::new(Mode::StereoImu, scenario.rig.clone(), scenario.imu_noise);
        let (_, out) = run_dataset(config, &data, 30);
        for est in &out {
            let report = est.solve.unwrap();
            assert!(
                report.final_cost < 1e-10,
                "frame {}: converged cost {}",
                est.frame_id,
                report.final_cost
            );
        }
    }

    #[test]
    fn gauge_pose_is_immovable() {
        let scenario = Scenario::preset("circle", 11).unwrap();
        let data = scenario.synthesize_noisy(3);
        let config = EstimatorConfig::new(Mode::Stereo, scenario.rig.clone(), scenario.imu_noise);
        let mut est = Estimator::new(config);
        est.process_frame(data.frames[0].clone()).unwrap();
        let reference = est.pose_of(0).unwrap();
        for frame in data.frames.iter().take(8).skip(1) {
            est.process_frame(frame.clone()).unwrap();
            let now = est.pose_of(0).unwrap();
            assert!((now.translation - reference.translation).norm() < 1e-6);
            assert!(now.rotation.boxminus(&reference.rotation).norm() < 1e-6);
        }
    }

    #[test]
    fn sparse_frame_is_flagged_degraded() {
        let scenario = Scenario::preset("static", 9).unwrap();
        let data = scenario.synthesize_ideal();
        let config = EstimatorConfig::new(Mode::Stereo, scenario.rig.clone(), scenario.imu_noise);
        let mut est = Estimator::new(config);
        est.process_frame(data.frames[0].clone()).unwrap();
        let mut thin = data.frames[1].clone();
        let keep: BTreeSet<u64> = thin
            .observations
            .iter()
            .map(|o| o.feature_id)
            .take(5)
            .collect();
        thin.observations.retain(|o| keep.contains(&o.feature_id));
        let out = est.process_frame(thin).unwrap();
        assert_eq!(out.status, EstimateStatus::Degraded);
        assert!(out.tracked_features < 8);
    }

    #[test]
    fn mono_imu_initializes_after_static_span() {
        let scenario = Scenario::preset("circle", 13).unwrap();
        let data = scenario.synthesize_ideal();
        let mono_rig = CameraRig {
            cameras: vec![scenario.rig.camera(0).clone()],
        };
        let config = EstimatorConfig::new(Mode::MonoImu, mono_rig, scenario.imu_noise);
        let mut est = Estimator::new(config);
        let mut imu_iter = data.imu.iter().peekable();
        let mut statuses = Vec::new();
        for frame in data.frames.iter().take(30) {
            while let Some(s) = imu_iter.peek() {
                if s.t <= frame.t + TIME_EPS {
                    est.process_imu(**s).unwrap();
                    imu_iter.next();
                } else {
                    break;
                }
            }
            let mut mono = frame.clone();
            mono.observations.retain(|o| o.camera_id == 0);
            statuses.push(est.process_frame(mono).unwrap().status);
        }
        assert_eq!(statuses[0], EstimateStatus::Initializing);
        assert!(est.is_initialized());
        assert!(statuses[29] != EstimateStatus::Initializing);
        // Ideal data from a level start: the estimated gyro bias stays at
        // the integration-error floor.
        let first = est.window_frames()[0];
        let (_, bg) = est.bias_of(first).unwrap();
        assert!(bg.norm() < 1e-5, "gyro bias {}", bg.norm());
    }

    #[test]
    fn rejecting_outliers_is_idempotent() {
        let scenario = Scenario::preset("static", 21).unwrap();
        let data = scenario.synthesize_ideal();
        let config = EstimatorConfig::new(Mode::Stereo, scenario.rig.clone(), scenario.imu_noise);
        let (mut est, _) = run_dataset(config, &data, 3);
        assert_eq!(est.reject_outliers(), 0);

        // Corrupt one landmark's estimate so it trips the threshold.
        let id = *est.landmarks.keys().next().unwrap();
        est.values
            .insert(BlockId::InvDepth(id), Block::InvDepth(5.0));
        assert_eq!(est.reject_outliers(), 1);
        assert_eq!(est.reject_outliers(), 0);
        assert!(est.rejected_features().contains(&id));
    }
}
