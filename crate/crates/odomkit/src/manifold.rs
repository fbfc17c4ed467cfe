//! Rotation-group and state-manifold arithmetic.
//!
//! Rotations are stored as unit quaternions and perturbed on the right:
//! `R ⊕ δθ = R ∘ exp(δθ)` with `δθ` a body-frame axis-angle vector. The same
//! convention is used by every factor Jacobian in this crate, so changing it
//! here would silently break all of them.
//!
//! Poses perturb translation and rotation independently (no SE(3) coupling):
//! `(p, R) ⊕ (δp, δθ) = (p + δp, R ∘ exp(δθ))`.

use nalgebra::{DVector, Matrix3, Quaternion, UnitQuaternion, Vector3, Vector6};

/// Angle below which exp/log switch to their Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-6;

/// A 3D rotation stored as a unit quaternion.
///
/// Constructors canonicalize to the `w >= 0` representative of the double
/// cover; compositions renormalize but keep the sign so that log stays
/// continuous along optimizer paths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation {
    q: UnitQuaternion<f64>,
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation {
            q: UnitQuaternion::identity(),
        }
    }

    /// Build from quaternion components, normalizing and canonicalizing to
    /// the `w >= 0` representative.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Self {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z));
        if q.w < 0.0 {
            Rotation {
                q: UnitQuaternion::new_unchecked(-q.into_inner()),
            }
        } else {
            Rotation { q }
        }
    }

    /// Wrap an already-unit quaternion without canonicalization. Used by
    /// mid-computation results (compose, exp) where a sign flip would make
    /// the map discontinuous.
    fn wrap(q: UnitQuaternion<f64>) -> Self {
        Rotation {
            q: UnitQuaternion::new_unchecked(q.into_inner().normalize()),
        }
    }

    /// Exponential map: rotation by `|phi|` radians about `phi / |phi|`.
    pub fn exp(phi: &Vector3<f64>) -> Self {
        let angle = phi.norm();
        let (w, xyz) = if angle < SMALL_ANGLE {
            // cos(t/2) = 1 - t^2/8, sin(t/2)/t = 1/2 - t^2/48
            let a2 = angle * angle;
            (1.0 - a2 / 8.0, phi * (0.5 - a2 / 48.0))
        } else {
            let half = 0.5 * angle;
            (half.cos(), phi * (half.sin() / angle))
        };
        Rotation::wrap(UnitQuaternion::new_unchecked(Quaternion::from_parts(
            w, xyz,
        )))
    }

    /// Principal logarithm, `|result| <= pi`.
    pub fn log(&self) -> Vector3<f64> {
        // Work on the w >= 0 representative for the principal branch.
        let q = if self.q.w < 0.0 {
            -self.q.into_inner()
        } else {
            self.q.into_inner()
        };
        let vec = q.imag();
        let sin_half = vec.norm();
        let angle = 2.0 * sin_half.atan2(q.w);
        if angle < SMALL_ANGLE {
            // theta/sin(theta/2) = 2/w * (1 - s^2 / (3 w^2))
            let w = q.w;
            vec * (2.0 / w) * (1.0 - sin_half * sin_half / (3.0 * w * w))
        } else {
            vec * (angle / sin_half)
        }
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation::wrap(self.q * other.q)
    }

    pub fn inverse(&self) -> Rotation {
        Rotation {
            q: self.q.inverse(),
        }
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.q * v
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.q.to_rotation_matrix().into_inner()
    }

    /// Components in (w, x, y, z) order.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.q.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    /// `self ⊕ δθ = self ∘ exp(δθ)` (right / body-frame perturbation).
    pub fn boxplus(&self, delta: &Vector3<f64>) -> Rotation {
        self.compose(&Rotation::exp(delta))
    }

    /// `self ⊖ other = log(other⁻¹ ∘ self)`; zero iff the two rotations agree.
    pub fn boxminus(&self, other: &Rotation) -> Vector3<f64> {
        other.inverse().compose(self).log()
    }

    pub fn angle_to(&self, other: &Rotation) -> f64 {
        self.boxminus(other).norm()
    }
}

/// Rigid transform: `x_world = R * x_body + p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Rotation::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rot_inv = self.rotation.inverse();
        Pose {
            translation: -rot_inv.rotate(&self.translation),
            rotation: rot_inv,
        }
    }

    pub fn transform(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(point) + self.translation
    }

    /// Tangent layout is `[δp, δθ]`: translation adds in the world frame,
    /// rotation composes on the right.
    pub fn boxplus(&self, delta: &Vector6<f64>) -> Pose {
        Pose {
            translation: self.translation + delta.fixed_rows::<3>(0).into_owned(),
            rotation: self
                .rotation
                .boxplus(&delta.fixed_rows::<3>(3).into_owned()),
        }
    }

    pub fn boxminus(&self, other: &Pose) -> Vector6<f64> {
        let mut out = Vector6::zeros();
        out.fixed_rows_mut::<3>(0)
            .copy_from(&(self.translation - other.translation));
        out.fixed_rows_mut::<3>(3)
            .copy_from(&self.rotation.boxminus(&other.rotation));
        out
    }
}

/// One block of the estimation state vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Block {
    /// Body pose, tangent dimension 6.
    Pose(Pose),
    /// Body velocity in the world frame, tangent dimension 3.
    Velocity(Vector3<f64>),
    /// Accelerometer and gyroscope biases, tangent dimension 6 `[δba, δbg]`.
    Bias {
        accel: Vector3<f64>,
        gyro: Vector3<f64>,
    },
    /// Landmark inverse depth in its anchor camera, tangent dimension 1.
    InvDepth(f64),
}

impl Block {
    pub fn tangent_dim(&self) -> usize {
        match self {
            Block::Pose(_) => 6,
            Block::Velocity(_) => 3,
            Block::Bias { .. } => 6,
            Block::InvDepth(_) => 1,
        }
    }

    /// `self ⊕ delta`. Panics if `delta` does not match the tangent dimension
    /// (a contract violation, not a recoverable error).
    pub fn boxplus(&self, delta: &DVector<f64>) -> Block {
        assert_eq!(
            delta.len(),
            self.tangent_dim(),
            "tangent dimension mismatch for {:?}",
            self
        );
        match self {
            Block::Pose(pose) => {
                let mut d = Vector6::zeros();
                d.copy_from_slice(delta.as_slice());
                Block::Pose(pose.boxplus(&d))
            }
            Block::Velocity(v) => {
                Block::Velocity(v + Vector3::new(delta[0], delta[1], delta[2]))
            }
            Block::Bias { accel, gyro } => Block::Bias {
                accel: accel + Vector3::new(delta[0], delta[1], delta[2]),
                gyro: gyro + Vector3::new(delta[3], delta[4], delta[5]),
            },
            Block::InvDepth(rho) => Block::InvDepth(rho + delta[0]),
        }
    }

    /// `self ⊖ other`, the tangent vector with `other ⊕ result = self`.
    pub fn boxminus(&self, other: &Block) -> DVector<f64> {
        match (self, other) {
            (Block::Pose(a), Block::Pose(b)) => DVector::from_column_slice(a.boxminus(b).as_slice()),
            (Block::Velocity(a), Block::Velocity(b)) => {
                DVector::from_column_slice((a - b).as_slice())
            }
            (
                Block::Bias { accel, gyro },
                Block::Bias {
                    accel: oa,
                    gyro: og,
                },
            ) => {
                let mut out = DVector::zeros(6);
                out.rows_mut(0, 3).copy_from(&(accel - oa));
                out.rows_mut(3, 3).copy_from(&(gyro - og));
                out
            }
            (Block::InvDepth(a), Block::InvDepth(b)) => DVector::from_element(1, a - b),
            _ => panic!("boxminus between mismatched block kinds"),
        }
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Right Jacobian of SO(3): d exp(phi + d) = exp(phi) exp(Jr(phi) d).
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let angle = phi.norm();
    let s = skew(phi);
    if angle < SMALL_ANGLE {
        Matrix3::identity() - 0.5 * s + s * s / 6.0
    } else {
        let a2 = angle * angle;
        Matrix3::identity() - ((1.0 - angle.cos()) / a2) * s
            + ((angle - angle.sin()) / (a2 * angle)) * (s * s)
    }
}

/// Inverse of the right Jacobian.
pub fn right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let angle = phi.norm();
    let s = skew(phi);
    if angle < SMALL_ANGLE {
        Matrix3::identity() + 0.5 * s + s * s / 12.0
    } else {
        let a2 = angle * angle;
        let cot_term = 1.0 / a2 - (1.0 + angle.cos()) / (2.0 * angle * angle.sin());
        Matrix3::identity() + 0.5 * s + cot_term * (s * s)
    }
}
