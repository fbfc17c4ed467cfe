//! IMU preintegration and the preintegrated motion factor.
//!
//! Between two frames the raw gyro/accel samples are folded into relative
//! motion deltas `(alpha, beta, gamma)` expressed in the body frame of the
//! first frame: position, velocity, and rotation change with gravity and
//! initial velocity removed. The deltas depend on the bias linearization
//! point; first-order bias Jacobians allow cheap correction when the bias
//! estimate moves, and the retained samples allow exact repropagation when
//! it moves too far.
//!
//! Integration uses the midpoint rule: consecutive sample pairs share their
//! boundary sample, rotations advance by the mean gyro rate, accelerations
//! average the rotated endpoint measurements. A 15-state error model
//! `(d_alpha, d_beta, d_theta, d_ba, d_bg)` propagates the measurement
//! covariance alongside.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector3};
use thiserror::Error;

use crate::manifold::{right_jacobian, right_jacobian_inv, skew, Block, Pose, Rotation};
use crate::solver::{BlockId, Factor, FactorEval, Values};

/// Gravity acceleration vector used with body kinematics `p'' = R f - g`,
/// pointing along +z with the configured magnitude. A resting accelerometer
/// then measures `f = R^T g`.
pub fn gravity(norm: f64) -> Vector3<f64> {
    Vector3::new(0.0, 0.0, norm)
}

/// Default repropagation thresholds on the bias shift away from the
/// linearization point (infinity norm).
pub const REPROPAGATE_ACCEL: f64 = 1e-2;
pub const REPROPAGATE_GYRO: f64 = 1e-3;

/// Initial covariance seed keeping the whitening factorizable for very short
/// integrations; negligible against any real sample noise.
const COV_SEED: f64 = 1e-18;

#[derive(Debug, Error, PartialEq)]
pub enum ImuError {
    #[error("IMU sample at t={next}s does not advance past t={prev}s")]
    NonMonotonicTimestamp { prev: f64, next: f64 },
    #[error("preintegration covers no time interval")]
    EmptyInterval,
    #[error("preintegration covariance is not positive definite")]
    SingularCovariance,
}

/// One inertial measurement: body angular rate and specific force.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

/// Continuous-time noise densities of the IMU.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuNoise {
    /// Gyro white noise, rad/s/sqrt(Hz).
    pub sigma_g: f64,
    /// Accel white noise, m/s^2/sqrt(Hz).
    pub sigma_a: f64,
    /// Gyro bias random walk, rad/s^2/sqrt(Hz).
    pub sigma_bg: f64,
    /// Accel bias random walk, m/s^3/sqrt(Hz).
    pub sigma_ba: f64,
}

/// Full inertial navigation state of one frame.
#[derive(Debug, Clone, Copy)]
pub struct NavState {
    pub pose: Pose,
    pub velocity: Vector3<f64>,
    pub accel_bias: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
}

impl NavState {
    pub fn identity() -> NavState {
        NavState {
            pose: Pose::identity(),
            velocity: Vector3::zeros(),
            accel_bias: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
        }
    }
}

/// Running integration state, separate from the sample buffer so
/// repropagation can rebuild it in place.
#[derive(Debug, Clone)]
struct Deltas {
    alpha: Vector3<f64>,
    beta: Vector3<f64>,
    gamma: Rotation,
    covariance: SMatrix<f64, 15, 15>,
    /// Product of step transition matrices; its bias columns are the
    /// first-order sensitivities of the deltas to the linearization biases.
    jacobian: SMatrix<f64, 15, 15>,
    dt: f64,
}

impl Deltas {
    fn new() -> Deltas {
        Deltas {
            alpha: Vector3::zeros(),
            beta: Vector3::zeros(),
            gamma: Rotation::identity(),
            covariance: SMatrix::identity() * COV_SEED,
            jacobian: SMatrix::identity(),
            dt: 0.0,
        }
    }

    fn step(&mut self, s0: &ImuSample, s1: &ImuSample, ba: &Vector3<f64>, bg: &Vector3<f64>, noise: &ImuNoise) {
        let dt = s1.t - s0.t;
        if dt <= 0.0 {
            return;
        }

        let w_mid = 0.5 * (s0.gyro + s1.gyro) - bg;
        let a0 = s0.accel - ba;
        let a1 = s1.accel - ba;

        let r0 = self.gamma.matrix();
        let gamma1 = self.gamma.compose(&Rotation::exp(&(w_mid * dt)));
        let r1 = gamma1.matrix();

        let a_mid = 0.5 * (r0 * a0 + r1 * a1);
        let alpha1 = self.alpha + self.beta * dt + 0.5 * a_mid * dt * dt;
        let beta1 = self.beta + a_mid * dt;

        // Error-state transition. The rotation step matrix and the midpoint
        // couplings:
        //   M = d(a_mid)/d(-d_theta), N dt = d(a_mid)/d(d_bg) contribution.
        let a_step = Rotation::exp(&(w_mid * dt)).matrix();
        let jr = right_jacobian(&(w_mid * dt));
        let m = 0.5 * (r0 * skew(&a0) + r1 * skew(&a1) * a_step.transpose());
        let n = 0.5 * r1 * skew(&a1) * jr * dt;
        let rs = 0.5 * (r0 + r1);
        let eye = Matrix3::identity();

        let mut f = SMatrix::<f64, 15, 15>::identity();
        f.fixed_view_mut::<3, 3>(0, 3).copy_from(&(eye * dt));
        f.fixed_view_mut::<3, 3>(0, 6).copy_from(&(-0.5 * dt * dt * m));
        f.fixed_view_mut::<3, 3>(0, 9).copy_from(&(-0.5 * dt * dt * rs));
        f.fixed_view_mut::<3, 3>(0, 12).copy_from(&(0.5 * dt * dt * n));
        f.fixed_view_mut::<3, 3>(3, 6).copy_from(&(-dt * m));
        f.fixed_view_mut::<3, 3>(3, 9).copy_from(&(-dt * rs));
        f.fixed_view_mut::<3, 3>(3, 12).copy_from(&(dt * n));
        f.fixed_view_mut::<3, 3>(6, 6).copy_from(&a_step.transpose());
        f.fixed_view_mut::<3, 3>(6, 12).copy_from(&(-jr * dt));

        // Noise input (n_g, n_a, n_ba, n_bg), one equivalent sample per step.
        let mut g = SMatrix::<f64, 15, 12>::zeros();
        g.fixed_view_mut::<3, 3>(0, 0).copy_from(&(0.5 * dt * dt * n));
        g.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-0.5 * dt * dt * rs));
        g.fixed_view_mut::<3, 3>(3, 0).copy_from(&(dt * n));
        g.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-dt * rs));
        g.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-jr * dt));
        g.fixed_view_mut::<3, 3>(9, 6).copy_from(&eye);
        g.fixed_view_mut::<3, 3>(12, 9).copy_from(&eye);

        let mut q = SMatrix::<f64, 12, 12>::zeros();
        let var_g = noise.sigma_g * noise.sigma_g / dt;
        let var_a = noise.sigma_a * noise.sigma_a / dt;
        let var_ba = noise.sigma_ba * noise.sigma_ba * dt;
        let var_bg = noise.sigma_bg * noise.sigma_bg * dt;
        for k in 0..3 {
            q[(k, k)] = var_g;
            q[(3 + k, 3 + k)] = var_a;
            q[(6 + k, 6 + k)] = var_ba;
            q[(9 + k, 9 + k)] = var_bg;
        }

        self.covariance = f * self.covariance * f.transpose() + g * q * g.transpose();
        self.covariance = 0.5 * (self.covariance + self.covariance.transpose());
        self.jacobian = f * self.jacobian;

        self.alpha = alpha1;
        self.beta = beta1;
        self.gamma = gamma1;
        self.dt += dt;
    }
}

/// Preintegrated IMU measurements between two frames.
#[derive(Debug, Clone)]
pub struct Preintegration {
    deltas: Deltas,
    samples: Vec<ImuSample>,
    ba_lin: Vector3<f64>,
    bg_lin: Vector3<f64>,
    noise: ImuNoise,
}

impl Preintegration {
    pub fn new(ba_lin: Vector3<f64>, bg_lin: Vector3<f64>, noise: ImuNoise) -> Preintegration {
        Preintegration {
            deltas: Deltas::new(),
            samples: Vec::new(),
            ba_lin,
            bg_lin,
            noise,
        }
    }

    pub fn from_samples(
        samples: &[ImuSample],
        ba_lin: Vector3<f64>,
        bg_lin: Vector3<f64>,
        noise: ImuNoise,
    ) -> Result<Preintegration, ImuError> {
        let mut out = Preintegration::new(ba_lin, bg_lin, noise);
        for sample in samples {
            out.push(*sample)?;
        }
        Ok(out)
    }

    /// Append one sample, advancing the integration by the step it closes.
    /// Duplicate boundary timestamps are ignored; going backwards is an
    /// error.
    pub fn push(&mut self, sample: ImuSample) -> Result<(), ImuError> {
        if let Some(last) = self.samples.last() {
            if sample.t < last.t {
                return Err(ImuError::NonMonotonicTimestamp {
                    prev: last.t,
                    next: sample.t,
                });
            }
            if sample.t == last.t {
                return Ok(());
            }
            let last = *last;
            self.deltas
                .step(&last, &sample, &self.ba_lin, &self.bg_lin, &self.noise);
        }
        self.samples.push(sample);
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.deltas.dt
    }

    pub fn alpha(&self) -> Vector3<f64> {
        self.deltas.alpha
    }

    pub fn beta(&self) -> Vector3<f64> {
        self.deltas.beta
    }

    pub fn gamma(&self) -> Rotation {
        self.deltas.gamma
    }

    pub fn covariance(&self) -> &SMatrix<f64, 15, 15> {
        &self.deltas.covariance
    }

    pub fn samples(&self) -> &[ImuSample] {
        &self.samples
    }

    pub fn linearization_bias(&self) -> (Vector3<f64>, Vector3<f64>) {
        (self.ba_lin, self.bg_lin)
    }

    pub fn noise(&self) -> ImuNoise {
        self.noise
    }

    /// First-order bias sensitivities, read out of the accumulated
    /// transition product.
    pub fn j_alpha_ba(&self) -> Matrix3<f64> {
        self.deltas.jacobian.fixed_view::<3, 3>(0, 9).into_owned()
    }

    pub fn j_alpha_bg(&self) -> Matrix3<f64> {
        self.deltas.jacobian.fixed_view::<3, 3>(0, 12).into_owned()
    }

    pub fn j_beta_ba(&self) -> Matrix3<f64> {
        self.deltas.jacobian.fixed_view::<3, 3>(3, 9).into_owned()
    }

    pub fn j_beta_bg(&self) -> Matrix3<f64> {
        self.deltas.jacobian.fixed_view::<3, 3>(3, 12).into_owned()
    }

    pub fn j_gamma_bg(&self) -> Matrix3<f64> {
        self.deltas.jacobian.fixed_view::<3, 3>(6, 12).into_owned()
    }

    /// Deltas corrected to first order for a bias estimate away from the
    /// linearization point.
    pub fn corrected_deltas(
        &self,
        ba: &Vector3<f64>,
        bg: &Vector3<f64>,
    ) -> (Vector3<f64>, Vector3<f64>, Rotation) {
        let dba = ba - self.ba_lin;
        let dbg = bg - self.bg_lin;
        let alpha = self.deltas.alpha + self.j_alpha_ba() * dba + self.j_alpha_bg() * dbg;
        let beta = self.deltas.beta + self.j_beta_ba() * dba + self.j_beta_bg() * dbg;
        let gamma = self
            .deltas
            .gamma
            .compose(&Rotation::exp(&(self.j_gamma_bg() * dbg)));
        (alpha, beta, gamma)
    }

    /// Whether the bias estimate has drifted far enough from the
    /// linearization point that the first-order correction is no longer
    /// trustworthy.
    pub fn needs_repropagation(&self, ba: &Vector3<f64>, bg: &Vector3<f64>) -> bool {
        (ba - self.ba_lin).amax() > REPROPAGATE_ACCEL || (bg - self.bg_lin).amax() > REPROPAGATE_GYRO
    }

    /// Re-integrate the retained samples about a new bias linearization
    /// point.
    pub fn repropagate(&mut self, ba: Vector3<f64>, bg: Vector3<f64>) {
        self.ba_lin = ba;
        self.bg_lin = bg;
        self.deltas = Deltas::new();
        let samples = std::mem::take(&mut self.samples);
        for pair in samples.windows(2) {
            self.deltas
                .step(&pair[0], &pair[1], &self.ba_lin, &self.bg_lin, &self.noise);
        }
        self.samples = samples;
    }

    /// Group composition of two consecutive preintegrations sharing a bias
    /// linearization point:
    ///
    /// ```text
    /// gamma_02 = gamma_01 * gamma_12
    /// beta_02  = beta_01 + gamma_01 beta_12
    /// alpha_02 = alpha_01 + beta_01 dt_12 + gamma_01 alpha_12
    /// ```
    pub fn compose_deltas(&self, second: &Preintegration) -> (Vector3<f64>, Vector3<f64>, Rotation) {
        let r01 = self.deltas.gamma.matrix();
        let alpha = self.deltas.alpha + self.deltas.beta * second.dt() + r01 * second.alpha();
        let beta = self.deltas.beta + r01 * second.beta();
        let gamma = self.deltas.gamma.compose(&second.gamma());
        (alpha, beta, gamma)
    }

    /// Propagate a navigation state across this preintegration under the
    /// given gravity vector (`p'' = R f - g`).
    pub fn predict(&self, state: &NavState, g: &Vector3<f64>) -> NavState {
        let (alpha, beta, gamma) = self.corrected_deltas(&state.accel_bias, &state.gyro_bias);
        let dt = self.deltas.dt;
        let r0 = state.pose.rotation;
        NavState {
            pose: Pose::new(
                r0.compose(&gamma),
                state.pose.translation + state.velocity * dt - 0.5 * g * dt * dt
                    + r0.rotate(&alpha),
            ),
            velocity: state.velocity - g * dt + r0.rotate(&beta),
            accel_bias: state.accel_bias,
            gyro_bias: state.gyro_bias,
        }
    }
}

/// Preintegrated motion factor between frames `i` and `j`.
///
/// The 15-dimensional residual stacks position, velocity, rotation, and the
/// two bias random-walk terms, whitened by the inverse Cholesky factor of
/// the preintegration covariance:
///
/// ```text
/// r_alpha = R_i^T (p_j - p_i + 0.5 g dt^2 - v_i dt) - alpha'
/// r_beta  = R_i^T (v_j - v_i + g dt) - beta'
/// r_theta = log(gamma'^-1 R_i^T R_j)
/// r_ba    = ba_j - ba_i
/// r_bg    = bg_j - bg_i
/// ```
pub struct ImuFactor {
    keys: [BlockId; 6],
    frame_i: u64,
    frame_j: u64,
    preint: Preintegration,
    gravity: Vector3<f64>,
    sqrt_info: SMatrix<f64, 15, 15>,
}

impl ImuFactor {
    pub fn new(
        frame_i: u64,
        frame_j: u64,
        preint: Preintegration,
        gravity: Vector3<f64>,
    ) -> Result<ImuFactor, ImuError> {
        if preint.dt() <= 0.0 {
            return Err(ImuError::EmptyInterval);
        }
        let chol = preint
            .covariance()
            .cholesky()
            .ok_or(ImuError::SingularCovariance)?;
        let sqrt_info = chol
            .l()
            .solve_lower_triangular(&SMatrix::<f64, 15, 15>::identity())
            .ok_or(ImuError::SingularCovariance)?;
        Ok(ImuFactor {
            keys: [
                BlockId::Pose(frame_i),
                BlockId::Velocity(frame_i),
                BlockId::Bias(frame_i),
                BlockId::Pose(frame_j),
                BlockId::Velocity(frame_j),
                BlockId::Bias(frame_j),
            ],
            frame_i,
            frame_j,
            preint,
            gravity,
            sqrt_info,
        })
    }

    pub fn preintegration(&self) -> &Preintegration {
        &self.preint
    }

    fn state(&self, values: &Values, frame: u64) -> NavState {
        let pose = match values.get(&BlockId::Pose(frame)) {
            Some(Block::Pose(p)) => *p,
            _ => panic!("missing pose block for frame {frame}"),
        };
        let velocity = match values.get(&BlockId::Velocity(frame)) {
            Some(Block::Velocity(v)) => *v,
            _ => panic!("missing velocity block for frame {frame}"),
        };
        let (accel_bias, gyro_bias) = match values.get(&BlockId::Bias(frame)) {
            Some(Block::Bias { accel, gyro }) => (*accel, *gyro),
            _ => panic!("missing bias block for frame {frame}"),
        };
        NavState {
            pose,
            velocity,
            accel_bias,
            gyro_bias,
        }
    }
}

impl Factor for ImuFactor {
    fn keys(&self) -> &[BlockId] {
        &self.keys
    }

    fn dim(&self) -> usize {
        15
    }

    fn evaluate(&self, values: &Values, want_jacobians: bool) -> Option<FactorEval> {
        let si = self.state(values, self.frame_i);
        let sj = self.state(values, self.frame_j);
        let dt = self.preint.dt();
        let g = self.gravity;

        let (alpha, beta, gamma) = self.corrected(&si);
        let r0t = si.pose.rotation.inverse();
        let dp_tilde = sj.pose.translation - si.pose.translation + 0.5 * g * dt * dt
            - si.velocity * dt;
        let dv_tilde = sj.velocity - si.velocity + g * dt;

        let r_alpha = r0t.rotate(&dp_tilde) - alpha;
        let r_beta = r0t.rotate(&dv_tilde) - beta;
        let rel = r0t.compose(&sj.pose.rotation);
        let r_theta = rel.boxminus(&gamma);
        let r_ba = sj.accel_bias - si.accel_bias;
        let r_bg = sj.gyro_bias - si.gyro_bias;

        let mut raw = SMatrix::<f64, 15, 1>::zeros();
        raw.fixed_view_mut::<3, 1>(0, 0).copy_from(&r_alpha);
        raw.fixed_view_mut::<3, 1>(3, 0).copy_from(&r_beta);
        raw.fixed_view_mut::<3, 1>(6, 0).copy_from(&r_theta);
        raw.fixed_view_mut::<3, 1>(9, 0).copy_from(&r_ba);
        raw.fixed_view_mut::<3, 1>(12, 0).copy_from(&r_bg);
        let white = self.sqrt_info * raw;

        let mut eval = FactorEval {
            residual: DVector::from_column_slice(white.as_slice()),
            jacobians: Vec::new(),
        };
        if !want_jacobians {
            return Some(eval);
        }

        let r0t_m = r0t.matrix();
        let r1t_r0 = sj.pose.rotation.inverse().compose(&si.pose.rotation).matrix();
        let jr_inv = right_jacobian_inv(&r_theta);
        let dbg = si.gyro_bias - self.preint.bg_lin;
        let j_gamma_bg = self.preint.j_gamma_bg();
        // Exact chain for the rotation residual's bias sensitivity,
        // including the correction rotation's right Jacobian.
        let dtheta_dbg = -jr_inv.transpose() * right_jacobian(&(j_gamma_bg * dbg)) * j_gamma_bg;

        // Pose i: columns [dp_i, dtheta_i].
        let mut j_pose_i = SMatrix::<f64, 15, 6>::zeros();
        j_pose_i.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-r0t_m));
        j_pose_i
            .fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&skew(&r0t.rotate(&dp_tilde)));
        j_pose_i
            .fixed_view_mut::<3, 3>(3, 3)
            .copy_from(&skew(&r0t.rotate(&dv_tilde)));
        j_pose_i
            .fixed_view_mut::<3, 3>(6, 3)
            .copy_from(&(-jr_inv * r1t_r0));

        // Velocity i.
        let mut j_vel_i = SMatrix::<f64, 15, 3>::zeros();
        j_vel_i
            .fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(-r0t_m * dt));
        j_vel_i.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-r0t_m));

        // Bias i: columns [d_ba_i, d_bg_i].
        let mut j_bias_i = SMatrix::<f64, 15, 6>::zeros();
        j_bias_i
            .fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(-self.preint.j_alpha_ba()));
        j_bias_i
            .fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(-self.preint.j_alpha_bg()));
        j_bias_i
            .fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(-self.preint.j_beta_ba()));
        j_bias_i
            .fixed_view_mut::<3, 3>(3, 3)
            .copy_from(&(-self.preint.j_beta_bg()));
        j_bias_i.fixed_view_mut::<3, 3>(6, 3).copy_from(&dtheta_dbg);
        j_bias_i
            .fixed_view_mut::<3, 3>(9, 0)
            .copy_from(&(-Matrix3::identity()));
        j_bias_i
            .fixed_view_mut::<3, 3>(12, 3)
            .copy_from(&(-Matrix3::identity()));

        // Pose j.
        let mut j_pose_j = SMatrix::<f64, 15, 6>::zeros();
        j_pose_j.fixed_view_mut::<3, 3>(0, 0).copy_from(&r0t_m);
        j_pose_j.fixed_view_mut::<3, 3>(6, 3).copy_from(&jr_inv);

        // Velocity j.
        let mut j_vel_j = SMatrix::<f64, 15, 3>::zeros();
        j_vel_j.fixed_view_mut::<3, 3>(3, 0).copy_from(&r0t_m);

        // Bias j.
        let mut j_bias_j = SMatrix::<f64, 15, 6>::zeros();
        j_bias_j
            .fixed_view_mut::<3, 3>(9, 0)
            .copy_from(&Matrix3::identity());
        j_bias_j
            .fixed_view_mut::<3, 3>(12, 3)
            .copy_from(&Matrix3::identity());

        fn dynamic<const C: usize>(m: SMatrix<f64, 15, C>) -> DMatrix<f64> {
            DMatrix::from_column_slice(15, C, m.as_slice())
        }
        let s = self.sqrt_info;
        eval.jacobians.push(dynamic(s * j_pose_i));
        eval.jacobians.push(dynamic(s * j_vel_i));
        eval.jacobians.push(dynamic(s * j_bias_i));
        eval.jacobians.push(dynamic(s * j_pose_j));
        eval.jacobians.push(dynamic(s * j_vel_j));
        eval.jacobians.push(dynamic(s * j_bias_j));
        Some(eval)
    }
}

impl ImuFactor {
    fn corrected(&self, si: &NavState) -> (Vector3<f64>, Vector3<f64>, Rotation) {
        self.preint.corrected_deltas(&si.accel_bias, &si.gyro_bias)
    }
}
