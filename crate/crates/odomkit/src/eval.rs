//! Trajectory containers, alignment, and error metrics.
//!
//! The absolute trajectory error (ATE) first associates estimate and ground
//! truth by timestamp, then removes the gauge freedom with a closed-form
//! rigid (optionally similarity) alignment before computing the RMSE of the
//! position residuals. The relative pose error (RPE) instead compares motion
//! over fixed trajectory-length segments, which makes it independent of any
//! global alignment and exposes local drift rates.

use nalgebra::{Matrix3, Matrix4, Vector3};
use thiserror::Error;

use crate::manifold::{Pose, Rotation};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("only {0} timestamp correspondences, need at least {1}")]
    TooFewCorrespondences(usize, usize),
    #[error("point set is degenerate, alignment is not unique")]
    DegenerateGeometry,
}

/// A timestamped pose sequence, kept sorted by time.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    entries: Vec<(f64, Pose)>,
}

impl Trajectory {
    pub fn new(mut entries: Vec<(f64, Pose)>) -> Trajectory {
        entries.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        Trajectory { entries }
    }

    pub fn push(&mut self, t: f64, pose: Pose) {
        if let Some(last) = self.entries.last() {
            assert!(t >= last.0, "trajectory timestamps must be non-decreasing");
        }
        self.entries.push((t, pose));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(f64, Pose)] {
        &self.entries
    }

    pub fn stamp(&self, i: usize) -> f64 {
        self.entries[i].0
    }

    pub fn pose(&self, i: usize) -> &Pose {
        &self.entries[i].1
    }

    /// Apply `x -> s R x + t` to every position and `R_i -> R R_i` to every
    /// attitude.
    pub fn transformed(&self, rotation: &Rotation, translation: &Vector3<f64>, scale: f64) -> Trajectory {
        Trajectory {
            entries: self
                .entries
                .iter()
                .map(|(t, p)| {
                    (
                        *t,
                        Pose::new(
                            rotation.compose(&p.rotation),
                            scale * rotation.rotate(&p.translation) + translation,
                        ),
                    )
                })
                .collect(),
        }
    }
}

/// Greedy timestamp association: among all candidate pairs within `max_dt`,
/// repeatedly commit the globally closest pair whose endpoints are both
/// still unused. Ties break on the lower indices, so the result is
/// deterministic.
pub fn associate(est: &Trajectory, gt: &Trajectory, max_dt: f64) -> Vec<(usize, usize)> {
    let mut candidates = Vec::new();
    for (i, (te, _)) in est.entries().iter().enumerate() {
        for (j, (tg, _)) in gt.entries().iter().enumerate() {
            let dt = (te - tg).abs();
            if dt <= max_dt {
                candidates.push((dt, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let mut est_used = vec![false; est.len()];
    let mut gt_used = vec![false; gt.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !est_used[i] && !gt_used[j] {
            est_used[i] = true;
            gt_used[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_by_key(|&(i, _)| i);
    pairs
}

/// Closed-form alignment `x_gt ~ s R x_est + t` (Horn's quaternion method).
#[derive(Debug, Clone, Copy)]
pub struct Alignment {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Alignment {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * self.rotation.rotate(p) + self.translation
    }
}

/// Least-squares rotation, translation, and (optionally) scale mapping
/// `est` points onto `gt` points.
pub fn horn_align(
    est: &[Vector3<f64>],
    gt: &[Vector3<f64>],
    with_scale: bool,
) -> Result<Alignment, EvalError> {
    assert_eq!(est.len(), gt.len());
    if est.len() < 3 {
        return Err(EvalError::TooFewCorrespondences(est.len(), 3));
    }
    let n = est.len() as f64;
    let mean_est: Vector3<f64> = est.iter().sum::<Vector3<f64>>() / n;
    let mean_gt: Vector3<f64> = gt.iter().sum::<Vector3<f64>>() / n;

    let mut s = Matrix3::<f64>::zeros();
    let mut est_sq = 0.0;
    for (a, b) in est.iter().zip(gt) {
        let a = a - mean_est;
        let b = b - mean_gt;
        s += a * b.transpose();
        est_sq += a.norm_squared();
    }
    if est_sq < 1e-18 {
        return Err(EvalError::DegenerateGeometry);
    }

    // Horn's 4x4 quaternion eigenproblem for the rotation maximizing
    // sum(b . R a).
    let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
    let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
    let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
    let n_mat = Matrix4::new(
        sxx + syy + szz, syz - szy,       szx - sxz,       sxy - syx,
        syz - szy,       sxx - syy - szz, sxy + syx,       szx + sxz,
        szx - sxz,       sxy + syx,       syy - sxx - szz, syz + szy,
        sxy - syx,       szx + sxz,       syz + szy,       szz - sxx - syy,
    );
    let eig = n_mat.symmetric_eigen();
    let mut best = 0;
    for k in 1..4 {
        if eig.eigenvalues[k] > eig.eigenvalues[best] {
            best = k;
        }
    }
    let q = eig.eigenvectors.column(best);
    let rotation = Rotation::from_quaternion(q[0], q[1], q[2], q[3]);

    let scale = if with_scale {
        let mut dot = 0.0;
        for (a, b) in est.iter().zip(gt) {
            let a = a - mean_est;
            let b = b - mean_gt;
            dot += b.dot(&rotation.rotate(&a));
        }
        dot / est_sq
    } else {
        1.0
    };
    if !scale.is_finite() || scale <= 0.0 {
        return Err(EvalError::DegenerateGeometry);
    }

    let translation = mean_gt - scale * rotation.rotate(&mean_est);
    Ok(Alignment {
        rotation,
        translation,
        scale,
    })
}

/// Absolute trajectory error after closed-form alignment.
#[derive(Debug, Clone)]
pub struct AteResult {
    pub rmse: f64,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    pub pairs: usize,
    pub alignment: Alignment,
}

pub fn ate(
    est: &Trajectory,
    gt: &Trajectory,
    max_dt: f64,
    with_scale: bool,
) -> Result<AteResult, EvalError> {
    if est.is_empty() || gt.is_empty() {
        return Err(EvalError::EmptyTrajectory);
    }
    let pairs = associate(est, gt, max_dt);
    if pairs.len() < 3 {
        return Err(EvalError::TooFewCorrespondences(pairs.len(), 3));
    }
    let est_pts: Vec<Vector3<f64>> = pairs
        .iter()
        .map(|&(i, _)| est.pose(i).translation)
        .collect();
    let gt_pts: Vec<Vector3<f64>> = pairs
        .iter()
        .map(|&(_, j)| gt.pose(j).translation)
        .collect();
    let alignment = horn_align(&est_pts, &gt_pts, with_scale)?;

    let mut errors: Vec<f64> = est_pts
        .iter()
        .zip(&gt_pts)
        .map(|(e, g)| (g - alignment.apply(e)).norm())
        .collect();
    let sq_sum: f64 = errors.iter().map(|e| e * e).sum();
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let max = errors.iter().fold(0.0_f64, |a, &b| a.max(b));
    errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = errors[errors.len() / 2];
    Ok(AteResult {
        rmse: (sq_sum / errors.len() as f64).sqrt(),
        mean,
        median,
        max,
        pairs: errors.len(),
        alignment,
    })
}

/// Drift statistics over one segment length.
#[derive(Debug, Clone, Copy)]
pub struct RpeBin {
    /// Segment length in meters of ground-truth arc.
    pub length: f64,
    /// Mean translation error as percent of segment length.
    pub translation_percent: f64,
    /// Mean rotation error in degrees per meter.
    pub rotation_deg_per_m: f64,
    /// Number of segments evaluated.
    pub segments: usize,
}

/// Relative pose error over distance-binned segments. For every associated
/// start pose, the first later pose at least `length` meters of ground-truth
/// arc away closes a segment; the relative-motion discrepancy
/// `E = (gt_k^-1 gt_m)^-1 (est_k^-1 est_m)` is charged to that bin.
pub fn rpe(
    est: &Trajectory,
    gt: &Trajectory,
    lengths: &[f64],
    max_dt: f64,
) -> Result<Vec<RpeBin>, EvalError> {
    if est.is_empty() || gt.is_empty() {
        return Err(EvalError::EmptyTrajectory);
    }
    let pairs = associate(est, gt, max_dt);
    if pairs.len() < 2 {
        return Err(EvalError::TooFewCorrespondences(pairs.len(), 2));
    }

    // Cumulative ground-truth arc length over the associated subsequence.
    let mut arc = Vec::with_capacity(pairs.len());
    let mut acc = 0.0;
    arc.push(0.0);
    for w in pairs.windows(2) {
        let a = gt.pose(w[0].1).translation;
        let b = gt.pose(w[1].1).translation;
        acc += (b - a).norm();
        arc.push(acc);
    }

    let mut bins = Vec::new();
    for &length in lengths {
        let mut trans_sum = 0.0;
        let mut rot_sum = 0.0;
        let mut count = 0usize;
        let mut m = 0usize;
        for k in 0..pairs.len() {
            if m < k + 1 {
                m = k + 1;
            }
            while m < pairs.len() && arc[m] - arc[k] < length {
                m += 1;
            }
            if m >= pairs.len() {
                break;
            }
            let d = arc[m] - arc[k];
            let (ei, gi) = pairs[k];
            let (ej, gj) = pairs[m];
            let gt_rel = gt.pose(gi).inverse().compose(gt.pose(gj));
            let est_rel = est.pose(ei).inverse().compose(est.pose(ej));
            let err = gt_rel.inverse().compose(&est_rel);
            trans_sum += err.translation.norm() / d * 100.0;
            rot_sum += err.rotation.boxminus(&Rotation::identity()).norm().to_degrees() / d;
            count += 1;
        }
        if count > 0 {
            bins.push(RpeBin {
                length,
                translation_percent: trans_sum / count as f64,
                rotation_deg_per_m: rot_sum / count as f64,
                segments: count,
            });
        }
    }
    Ok(bins)
}

/// Segment lengths scaled to the trajectory: quarters of the total
/// ground-truth arc, capped at the classic {5, 10, 20, 40} meter ladder.
pub fn default_rpe_lengths(gt: &Trajectory) -> Vec<f64> {
    let mut total = 0.0;
    for w in gt.entries().windows(2) {
        total += (w[1].1.translation - w[0].1.translation).norm();
    }
    let ladder = [5.0_f64, 10.0, 20.0, 40.0];
    let scaled: Vec<f64> = ladder
        .iter()
        .map(|&l| l.min(total * l / 50.0))
        .filter(|&l| l > 1e-6)
        .collect();
    if scaled.is_empty() {
        vec![total.max(1e-3) / 2.0]
    } else {
        scaled
    }
}
