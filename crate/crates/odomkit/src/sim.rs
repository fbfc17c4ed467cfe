//! Synthetic scenario generation and numerical differentiation utilities.
//!
//! Scenarios pair an exact closed-form trajectory with a landmark field and
//! a calibrated sensor rig. Every trajectory is driven through a "virtual
//! time" that stays at zero during an initial stationary lead-in, then ramps
//! smoothly to unit rate, so runs begin at rest with zero acceleration and
//! all derivatives stay available in closed form. Measurements are either
//! ideal (no noise, no bias) or corrupted by seeded white noise and bias
//! random walks, which keeps every dataset bit-reproducible.

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::camera::{CameraModel, CameraRig, FeatureObservation, PinholeIntrinsics};
use crate::estimator::Frame;
use crate::eval::Trajectory;
use crate::imu::{gravity, ImuNoise, ImuSample};
use crate::io::Dataset;
use crate::manifold::{Pose, Rotation};
use crate::solver::{Factor, Values};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("unknown scenario '{0}', expected one of: circle, sinusoid3d, static")]
    UnknownScenario(String),
}

/// Virtual-time profile: zero during the lead-in, then a smooth ramp to
/// unit rate over `ramp` seconds. Position-level output is C^2 in real time.
#[derive(Debug, Clone, Copy)]
pub struct TimeWarp {
    pub lead_in: f64,
    pub ramp: f64,
}

impl TimeWarp {
    /// Returns `(tau, dtau/dt, d2tau/dt2)`.
    pub fn eval(&self, t: f64) -> (f64, f64, f64) {
        let s = t - self.lead_in;
        if s < 0.0 || (s <= 0.0 && self.ramp > 0.0) {
            return (0.0, 0.0, 0.0);
        }
        if self.ramp <= 0.0 || s >= self.ramp {
            return (s - 0.5 * self.ramp.max(0.0), 1.0, 0.0);
        }
        let x = std::f64::consts::PI * s / self.ramp;
        (
            0.5 * s - self.ramp / (2.0 * std::f64::consts::PI) * x.sin(),
            0.5 * (1.0 - x.cos()),
            std::f64::consts::PI / (2.0 * self.ramp) * x.sin(),
        )
    }
}

/// Closed-form reference motions.
#[derive(Debug, Clone, Copy)]
pub enum TrajectorySpec {
    /// Planar circle of the given radius, yaw tracking the tangent.
    /// `rate` is the angular speed in rad/s of virtual time.
    Circle { radius: f64, rate: f64, warp: TimeWarp },
    /// Corridor run along +x with sinusoidal sway in y and z, identity
    /// attitude.
    Sinusoid3d {
        speed: f64,
        amp_y: f64,
        amp_z: f64,
        freq: f64,
        warp: TimeWarp,
    },
    /// No motion at all.
    Static,
}

/// Exact kinematic state at one instant.
#[derive(Debug, Clone, Copy)]
pub struct TrajectorySample {
    pub pose: Pose,
    pub velocity: Vector3<f64>,
    pub accel_world: Vector3<f64>,
    pub omega_body: Vector3<f64>,
}

impl TrajectorySpec {
    pub fn sample(&self, t: f64) -> TrajectorySample {
        match *self {
            TrajectorySpec::Static => TrajectorySample {
                pose: Pose::identity(),
                velocity: Vector3::zeros(),
                accel_world: Vector3::zeros(),
                omega_body: Vector3::zeros(),
            },
            TrajectorySpec::Circle { radius, rate, warp } => {
                let (tau, dtau, ddtau) = warp.eval(t);
                let th = rate * tau;
                let (sin, cos) = th.sin_cos();
                // Curve in virtual time, chain rule back to real time.
                let c = Vector3::new(radius * cos, radius * sin, 0.0);
                let dc = Vector3::new(-radius * rate * sin, radius * rate * cos, 0.0);
                let ddc = Vector3::new(
                    -radius * rate * rate * cos,
                    -radius * rate * rate * sin,
                    0.0,
                );
                let yaw = th + std::f64::consts::FRAC_PI_2;
                TrajectorySample {
                    pose: Pose::new(Rotation::exp(&Vector3::new(0.0, 0.0, yaw)), c),
                    velocity: dc * dtau,
                    accel_world: ddc * (dtau * dtau) + dc * ddtau,
                    omega_body: Vector3::new(0.0, 0.0, rate * dtau),
                }
            }
            TrajectorySpec::Sinusoid3d {
                speed,
                amp_y,
                amp_z,
                freq,
                warp,
            } => {
                let (tau, dtau, ddtau) = warp.eval(t);
                let wy = 2.0 * std::f64::consts::PI * freq;
                let wz = 2.0 * wy;
                let c = Vector3::new(speed * tau, amp_y * (wy * tau).sin(), amp_z * (wz * tau).sin());
                let dc = Vector3::new(
                    speed,
                    amp_y * wy * (wy * tau).cos(),
                    amp_z * wz * (wz * tau).cos(),
                );
                let ddc = Vector3::new(
                    0.0,
                    -amp_y * wy * wy * (wy * tau).sin(),
                    -amp_z * wz * wz * (wz * tau).sin(),
                );
                TrajectorySample {
                    pose: Pose::new(Rotation::identity(), c),
                    velocity: dc * dtau,
                    accel_world: ddc * (dtau * dtau) + dc * ddtau,
                    omega_body: Vector3::zeros(),
                }
            }
        }
    }
}

/// The stereo rig shared by all presets: two forward-looking VGA cameras
/// (camera z along body x) separated by a 10 cm baseline along body y.
pub fn default_rig() -> CameraRig {
    let intrinsics = PinholeIntrinsics {
        fx: 320.0,
        fy: 320.0,
        cx: 320.0,
        cy: 240.0,
        width: 640,
        height: 480,
    };
    let r_bc = Rotation::from_quaternion(0.5, -0.5, 0.5, -0.5);
    CameraRig {
        cameras: vec![
            CameraModel {
                intrinsics,
                extrinsic: Pose::new(r_bc, Vector3::new(0.0, 0.05, 0.0)),
            },
            CameraModel {
                intrinsics,
                extrinsic: Pose::new(r_bc, Vector3::new(0.0, -0.05, 0.0)),
            },
        ],
    }
}

pub fn default_imu_noise() -> ImuNoise {
    ImuNoise {
        sigma_g: 2e-4,
        sigma_a: 2e-3,
        sigma_bg: 2e-5,
        sigma_ba: 2e-4,
    }
}

/// A fully specified synthetic world.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub trajectory: TrajectorySpec,
    pub landmarks: Vec<Vector3<f64>>,
    pub rig: CameraRig,
    pub imu_noise: ImuNoise,
    pub sigma_px: f64,
    pub init_accel_bias: Vector3<f64>,
    pub init_gyro_bias: Vector3<f64>,
    pub gravity_norm: f64,
    pub imu_rate: f64,
    pub cam_rate: f64,
    pub frames: usize,
}

impl Scenario {
    /// Named preset worlds. The seed shapes the landmark field only; the
    /// measurement noise gets its own seed at synthesis time.
    pub fn preset(name: &str, seed: u64) -> Result<Scenario, SimError> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1));
        let mut uniform = |lo: f64, hi: f64| rng.gen_range(lo..hi);
        match name {
            "circle" => {
                let mut landmarks = Vec::with_capacity(420);
                for _ in 0..420 {
                    let angle = uniform(0.0, std::f64::consts::TAU);
                    let radius = uniform(1.6, 3.2);
                    landmarks.push(Vector3::new(
                        radius * angle.cos(),
                        radius * angle.sin(),
                        uniform(-1.2, 2.0),
                    ));
                }
                Ok(Scenario {
                    name: "circle".into(),
                    trajectory: TrajectorySpec::Circle {
                        radius: 1.0,
                        rate: 0.6,
                        warp: TimeWarp {
                            lead_in: 1.0,
                            ramp: 1.0,
                        },
                    },
                    landmarks,
                    rig: default_rig(),
                    imu_noise: default_imu_noise(),
                    sigma_px: 1.0,
                    init_accel_bias: Vector3::new(0.01, -0.006, 0.008),
                    init_gyro_bias: Vector3::new(0.0012, -0.0008, 0.001),
                    gravity_norm: 9.81,
                    imu_rate: 4000.0,
                    cam_rate: 20.0,
                    frames: 200,
                })
            }
            "sinusoid3d" => {
                let mut landmarks = Vec::with_capacity(600);
                for side in [-1.0, 1.0] {
                    for _ in 0..300 {
                        landmarks.push(Vector3::new(
                            uniform(-2.0, 14.0),
                            side * 3.0 + uniform(-0.3, 0.3),
                            uniform(-1.5, 2.0),
                        ));
                    }
                }
                Ok(Scenario {
                    name: "sinusoid3d".into(),
                    trajectory: TrajectorySpec::Sinusoid3d {
                        speed: 1.0,
                        amp_y: 0.4,
                        amp_z: 0.2,
                        freq: 0.25,
                        warp: TimeWarp {
                            lead_in: 1.0,
                            ramp: 1.0,
                        },
                    },
                    landmarks,
                    rig: default_rig(),
                    imu_noise: default_imu_noise(),
                    sigma_px: 1.0,
                    init_accel_bias: Vector3::new(-0.008, 0.01, 0.006),
                    init_gyro_bias: Vector3::new(-0.001, 0.0009, -0.0011),
                    gravity_norm: 9.81,
                    imu_rate: 4000.0,
                    cam_rate: 20.0,
                    frames: 200,
                })
            }
            "static" => {
                let mut landmarks = Vec::with_capacity(240);
                for _ in 0..240 {
                    landmarks.push(Vector3::new(
                        uniform(3.0, 5.0),
                        uniform(-3.0, 3.0),
                        uniform(-2.0, 2.0),
                    ));
                }
                Ok(Scenario {
                    name: "static".into(),
                    trajectory: TrajectorySpec::Static,
                    landmarks,
                    rig: default_rig(),
                    imu_noise: default_imu_noise(),
                    sigma_px: 1.0,
                    init_accel_bias: Vector3::zeros(),
                    init_gyro_bias: Vector3::zeros(),
                    gravity_norm: 9.81,
                    cam_rate: 20.0,
                    imu_rate: 200.0,
                    frames: 100,
                })
            }
            other => Err(SimError::UnknownScenario(other.to_string())),
        }
    }

    pub fn duration(&self) -> f64 {
        (self.frames.saturating_sub(1)) as f64 / self.cam_rate
    }

    pub fn frame_time(&self, k: usize) -> f64 {
        k as f64 / self.cam_rate
    }

    /// Ground-truth body poses at the camera frame times.
    pub fn ground_truth(&self) -> Trajectory {
        Trajectory::new(
            (0..self.frames)
                .map(|k| {
                    let t = self.frame_time(k);
                    (t, self.trajectory.sample(t).pose)
                })
                .collect(),
        )
    }

    /// Perfect sensors: no noise, no bias.
    pub fn synthesize_ideal(&self) -> Dataset {
        self.synthesize_inner(None)
    }

    /// Sensors with seeded white noise and bias random walks. The initial
    /// biases are the scenario's `init_*_bias` values.
    pub fn synthesize_noisy(&self, seed: u64) -> Dataset {
        self.synthesize_inner(Some(seed))
    }

    fn synthesize_inner(&self, noise_seed: Option<u64>) -> Dataset {
        let mut rng = noise_seed.map(|s| {
            ChaCha12Rng::seed_from_u64(s.wrapping_mul(0x2545f4914f6cdd1d).wrapping_add(7))
        });
        let g = gravity(self.gravity_norm);

        // IMU stream, covering the full frame span sample-aligned.
        let imu_dt = 1.0 / self.imu_rate;
        let n_imu = ((self.frames.saturating_sub(1)) as f64 * self.imu_rate / self.cam_rate)
            .round() as usize;
        let mut imu = Vec::with_capacity(n_imu + 1);
        let mut ba = self.init_accel_bias;
        let mut bg = self.init_gyro_bias;
        let sqrt_rate = self.imu_rate.sqrt();
        let sqrt_dt = imu_dt.sqrt();
        for k in 0..=n_imu {
            let t = k as f64 / self.imu_rate;
            let s = self.trajectory.sample(t);
            let rot_t = s.pose.rotation.inverse();
            let mut gyro = s.omega_body;
            let mut accel = rot_t.rotate(&(s.accel_world + g));
            if let Some(rng) = rng.as_mut() {
                gyro += bg + self.imu_noise.sigma_g * sqrt_rate * normal3(rng);
                accel += ba + self.imu_noise.sigma_a * sqrt_rate * normal3(rng);
                bg += self.imu_noise.sigma_bg * sqrt_dt * normal3(rng);
                ba += self.imu_noise.sigma_ba * sqrt_dt * normal3(rng);
            }
            imu.push(ImuSample { t, gyro, accel });
        }

        // Feature tracks: stable ids, one observation per visible landmark
        // per camera per frame, bounds-checked after pixel noise.
        let mut frames = Vec::with_capacity(self.frames);
        for k in 0..self.frames {
            let t = self.frame_time(k);
            let body = self.trajectory.sample(t).pose;
            let mut observations = Vec::new();
            for (cam_id, cam) in self.rig.cameras.iter().enumerate() {
                let cam_pose = body.compose(&cam.extrinsic);
                let world_to_cam = cam_pose.inverse();
                for (feature_id, lm) in self.landmarks.iter().enumerate() {
                    let p_c = world_to_cam.transform(lm);
                    let Ok(mut uv) = cam.intrinsics.project(&p_c) else {
                        continue;
                    };
                    if let Some(rng) = rng.as_mut() {
                        uv += self.sigma_px * Vector2::new(normal(rng), normal(rng));
                    }
                    if cam.intrinsics.in_bounds(&uv) {
                        observations.push(FeatureObservation {
                            frame_id: k as u64,
                            camera_id: cam_id,
                            feature_id: feature_id as u64,
                            uv,
                        });
                    }
                }
            }
            frames.push(Frame {
                frame_id: k as u64,
                t,
                observations,
            });
        }

        Dataset {
            imu,
            frames,
            ground_truth: Some(self.ground_truth()),
        }
    }
}

fn normal(rng: &mut ChaCha12Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn normal3(rng: &mut ChaCha12Rng) -> Vector3<f64> {
    Vector3::new(normal(rng), normal(rng), normal(rng))
}

/// Central-difference Jacobians of a factor with respect to each of its
/// keys, using the same manifold retraction as the solver. Returns `None`
/// when the factor fails to evaluate at any probe point.
pub fn numerical_jacobian(
    factor: &dyn Factor,
    values: &Values,
    step: f64,
) -> Option<Vec<DMatrix<f64>>> {
    let mut jacobians = Vec::with_capacity(factor.keys().len());
    for key in factor.keys() {
        let block = *values.get(key)?;
        let dim = block.tangent_dim();
        let mut jac = DMatrix::zeros(factor.dim(), dim);
        for col in 0..dim {
            let mut delta = DVector::zeros(dim);
            delta[col] = step;
            let mut plus = values.clone();
            plus.insert(*key, block.boxplus(&delta));
            let r_plus = factor.evaluate(&plus, false)?.residual;
            delta[col] = -step;
            let mut minus = values.clone();
            minus.insert(*key, block.boxplus(&delta));
            let r_minus = factor.evaluate(&minus, false)?.residual;
            jac.set_column(col, &((r_plus - r_minus) / (2.0 * step)));
        }
        jacobians.push(jac);
    }
    Some(jacobians)
}

/// Largest relative deviation between an analytic and a numerical Jacobian
/// stack, scaled by the largest entry magnitude present.
pub fn max_relative_jacobian_error(analytic: &[DMatrix<f64>], numeric: &[DMatrix<f64>]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut scale = 1.0_f64;
    for (a, n) in analytic.iter().zip(numeric) {
        scale = scale.max(a.amax()).max(n.amax());
    }
    let mut worst = 0.0_f64;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.shape(), n.shape());
        worst = worst.max((a - n).amax() / scale);
    }
    worst
}
