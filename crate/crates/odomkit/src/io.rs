//! Dataset and configuration I/O.
//!
//! On-disk layout of a dataset directory:
//! - `imu.csv`: `timestamp_ns,wx,wy,wz,ax,ay,az` (rad/s, m/s^2)
//! - `tracks_cam<N>.csv`: `frame_id,timestamp_ns,feature_id,camera_id,u,v`
//! - `gt.tum` (optional): `timestamp tx ty tz qx qy qz qw`
//! - `config.toml` (written by the simulator): estimator configuration
//!
//! CSV headers are optional on read and always written. Timestamps are
//! stored as integer nanoseconds, TUM timestamps with nine decimals.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{CameraModel, CameraRig, FeatureObservation, PinholeIntrinsics};
use crate::estimator::{EstimatorConfig, Frame, Mode};
use crate::eval::Trajectory;
use crate::imu::{ImuNoise, ImuSample};
use crate::manifold::{Pose, Rotation};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("config: {0}")]
    Config(String),
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> IoError {
    IoError::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn field<T: FromStr>(raw: &str, name: &str, path: &Path, line: usize) -> Result<T, IoError> {
    raw.trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("invalid {name}: '{}'", raw.trim())))
}

/// Data rows whose first field does not start with a digit, sign, or dot
/// are treated as a header and skipped.
fn is_header(line: &str) -> bool {
    !line.starts_with(|c: char| c.is_ascii_digit() || c == '-' || c == '+' || c == '.')
}

fn timestamp_ns_to_s(ns: i64) -> f64 {
    ns as f64 / 1e9
}

fn timestamp_s_to_ns(t: f64) -> i64 {
    (t * 1e9).round() as i64
}

/// An in-memory dataset: the IMU stream, per-frame feature observations,
/// and optionally the ground-truth trajectory.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub imu: Vec<ImuSample>,
    pub frames: Vec<Frame>,
    pub ground_truth: Option<Trajectory>,
}

/// Counters reported by [`Dataset::load`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadSummary {
    pub imu_samples: usize,
    pub frames: usize,
    pub observations: usize,
    pub rejected_out_of_bounds: usize,
}

impl Dataset {
    /// Reads a dataset directory. Missing `imu.csv` yields an empty IMU
    /// stream; track files are read for each camera in the rig and
    /// observations outside the image bounds are dropped and counted.
    pub fn load(dir: &Path, rig: &CameraRig) -> Result<(Dataset, LoadSummary), IoError> {
        let imu_path = dir.join("imu.csv");
        let imu = if imu_path.exists() {
            read_imu_csv(&imu_path)?
        } else {
            Vec::new()
        };

        let mut merged: BTreeMap<u64, (f64, Vec<FeatureObservation>)> = BTreeMap::new();
        let mut rejected = 0usize;
        for cam_id in 0..rig.len() {
            let path = dir.join(format!("tracks_cam{cam_id}.csv"));
            let tracks = read_tracks_csv(&path)?;
            for obs in tracks.observations {
                if obs.camera_id != cam_id {
                    return Err(parse_err(
                        &path,
                        0,
                        format!(
                            "camera_id {} does not match file camera {cam_id}",
                            obs.camera_id
                        ),
                    ));
                }
                let t = tracks.frame_times[&obs.frame_id];
                let entry = merged.entry(obs.frame_id).or_insert_with(|| (t, Vec::new()));
                if (entry.0 - t).abs() > 1e-9 {
                    return Err(parse_err(
                        &path,
                        0,
                        format!("frame {} has inconsistent timestamps", obs.frame_id),
                    ));
                }
                if rig.camera(cam_id).intrinsics.in_bounds(&obs.uv) {
                    entry.1.push(obs);
                } else {
                    rejected += 1;
                }
            }
        }

        let mut frames = Vec::with_capacity(merged.len());
        let mut last_t = f64::NEG_INFINITY;
        for (frame_id, (t, observations)) in merged {
            if t <= last_t {
                return Err(IoError::Config(format!(
                    "frame {frame_id} timestamp {t} is not increasing"
                )));
            }
            last_t = t;
            frames.push(Frame {
                frame_id,
                t,
                observations,
            });
        }

        let gt_path = dir.join("gt.tum");
        let ground_truth = if gt_path.exists() {
            Some(read_trajectory_tum(&gt_path)?)
        } else {
            None
        };

        let summary = LoadSummary {
            imu_samples: imu.len(),
            frames: frames.len(),
            observations: frames.iter().map(|f| f.observations.len()).sum(),
            rejected_out_of_bounds: rejected,
        };
        Ok((
            Dataset {
                imu,
                frames,
                ground_truth,
            },
            summary,
        ))
    }

    /// Writes `imu.csv`, one track file per camera, and `gt.tum` when
    /// ground truth is present.
    pub fn write(&self, dir: &Path, n_cameras: usize) -> Result<(), IoError> {
        fs::create_dir_all(dir).map_err(file_err(dir))?;
        write_imu_csv(&dir.join("imu.csv"), &self.imu)?;
        for cam_id in 0..n_cameras {
            write_tracks_csv(
                &dir.join(format!("tracks_cam{cam_id}.csv")),
                &self.frames,
                cam_id,
            )?;
        }
        if let Some(gt) = &self.ground_truth {
            write_trajectory_tum(&dir.join("gt.tum"), gt)?;
        }
        Ok(())
    }
}

pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuSample>, IoError> {
    let text = fs::read_to_string(path).map_err(file_err(path))?;
    let mut samples = Vec::new();
    let mut last_ns: Option<i64> = None;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (idx == 0 && is_header(line)) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(parse_err(
                path,
                line_no,
                format!("expected 7 fields, got {}", fields.len()),
            ));
        }
        let ns: i64 = field(fields[0], "timestamp_ns", path, line_no)?;
        if let Some(prev) = last_ns {
            if ns <= prev {
                return Err(parse_err(
                    path,
                    line_no,
                    format!("timestamp {ns} is not strictly increasing (previous {prev})"),
                ));
            }
        }
        last_ns = Some(ns);
        let mut vals = [0.0; 6];
        for (k, v) in vals.iter_mut().enumerate() {
            *v = field(fields[k + 1], "measurement", path, line_no)?;
        }
        samples.push(ImuSample {
            t: timestamp_ns_to_s(ns),
            gyro: Vector3::new(vals[0], vals[1], vals[2]),
            accel: Vector3::new(vals[3], vals[4], vals[5]),
        });
    }
    Ok(samples)
}

pub fn write_imu_csv(path: &Path, samples: &[ImuSample]) -> Result<(), IoError> {
    let mut out = String::from("timestamp_ns,wx,wy,wz,ax,ay,az\n");
    for s in samples {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            timestamp_s_to_ns(s.t),
            s.gyro.x,
            s.gyro.y,
            s.gyro.z,
            s.accel.x,
            s.accel.y,
            s.accel.z
        );
    }
    fs::write(path, out).map_err(file_err(path))
}

/// Raw contents of one track file.
#[derive(Debug, Clone, Default)]
pub struct TracksFile {
    pub observations: Vec<FeatureObservation>,
    pub frame_times: BTreeMap<u64, f64>,
}

pub fn read_tracks_csv(path: &Path) -> Result<TracksFile, IoError> {
    let text = fs::read_to_string(path).map_err(file_err(path))?;
    let mut tracks = TracksFile::default();
    let mut seen: BTreeSet<(u64, u64, usize)> = BTreeSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (idx == 0 && is_header(line)) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(parse_err(
                path,
                line_no,
                format!("expected 6 fields, got {}", fields.len()),
            ));
        }
        let frame_id: u64 = field(fields[0], "frame_id", path, line_no)?;
        let ns: i64 = field(fields[1], "timestamp_ns", path, line_no)?;
        let feature_id: u64 = field(fields[2], "feature_id", path, line_no)?;
        let camera_id: usize = field(fields[3], "camera_id", path, line_no)?;
        let u: f64 = field(fields[4], "u", path, line_no)?;
        let v: f64 = field(fields[5], "v", path, line_no)?;
        if !seen.insert((frame_id, feature_id, camera_id)) {
            return Err(parse_err(
                path,
                line_no,
                format!("duplicate observation of feature {feature_id} in frame {frame_id} camera {camera_id}"),
            ));
        }
        let t = timestamp_ns_to_s(ns);
        if let Some(prev) = tracks.frame_times.get(&frame_id) {
            if (prev - t).abs() > 1e-9 {
                return Err(parse_err(
                    path,
                    line_no,
                    format!("frame {frame_id} has inconsistent timestamps"),
                ));
            }
        } else {
            tracks.frame_times.insert(frame_id, t);
        }
        tracks.observations.push(FeatureObservation {
            frame_id,
            camera_id,
            feature_id,
            uv: Vector2::new(u, v),
        });
    }
    Ok(tracks)
}

pub fn write_tracks_csv(path: &Path, frames: &[Frame], camera_id: usize) -> Result<(), IoError> {
    let mut out = String::from("frame_id,timestamp_ns,feature_id,camera_id,u,v\n");
    for frame in frames {
        for obs in frame.observations.iter().filter(|o| o.camera_id == camera_id) {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                frame.frame_id,
                timestamp_s_to_ns(frame.t),
                obs.feature_id,
                obs.camera_id,
                obs.uv.x,
                obs.uv.y
            );
        }
    }
    fs::write(path, out).map_err(file_err(path))
}

pub fn write_trajectory_tum(path: &Path, traj: &Trajectory) -> Result<(), IoError> {
    fs::write(path, trajectory_to_tum(traj)).map_err(file_err(path))
}

pub fn trajectory_to_tum(traj: &Trajectory) -> String {
    let mut out = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for (t, pose) in traj.entries() {
        let [qw, qx, qy, qz] = pose.rotation.wxyz();
        let p = pose.translation;
        let _ = writeln!(out, "{t:.9} {} {} {} {qx} {qy} {qz} {qw}", p.x, p.y, p.z);
    }
    out
}

pub fn read_trajectory_tum(path: &Path) -> Result<Trajectory, IoError> {
    let text = fs::read_to_string(path).map_err(file_err(path))?;
    let mut entries = Vec::new();
    let mut last_t = f64::NEG_INFINITY;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(parse_err(
                path,
                line_no,
                format!("expected 8 fields, got {}", fields.len()),
            ));
        }
        let mut vals = [0.0; 8];
        for (k, v) in vals.iter_mut().enumerate() {
            *v = field(fields[k], "value", path, line_no)?;
        }
        let t = vals[0];
        if t <= last_t {
            return Err(parse_err(
                path,
                line_no,
                format!("timestamp {t} is not strictly increasing"),
            ));
        }
        last_t = t;
        let quat_norm =
            (vals[4] * vals[4] + vals[5] * vals[5] + vals[6] * vals[6] + vals[7] * vals[7]).sqrt();
        if quat_norm < 1e-12 {
            return Err(parse_err(path, line_no, "zero-norm quaternion"));
        }
        entries.push((
            t,
            Pose::new(
                Rotation::from_quaternion(vals[7], vals[4], vals[5], vals[6]),
                Vector3::new(vals[1], vals[2], vals[3]),
            ),
        ));
    }
    Ok(Trajectory::new(entries))
}

#[derive(Debug, Serialize, Deserialize)]
struct RawConfig {
    mode: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    window_size: Option<usize>,
    #[serde(default)]
    cameras: Vec<RawCamera>,
    #[serde(skip_serializing_if = "Option::is_none")]
    imu: Option<RawImu>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tracker: Option<RawTracker>,
    #[serde(skip_serializing_if = "Option::is_none")]
    solver: Option<RawSolver>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawCamera {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    /// Camera position in the body frame.
    extrinsic_pos: [f64; 3],
    /// Body-from-camera rotation as `[w, x, y, z]`.
    extrinsic_quat: [f64; 4],
}

#[derive(Debug, Serialize, Deserialize)]
struct RawImu {
    sigma_g: f64,
    sigma_a: f64,
    sigma_bg: f64,
    sigma_ba: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    gravity_norm: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawTracker {
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma_px: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    keyframe_parallax_px: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    outlier_px: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    min_features: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawSolver {
    #[serde(skip_serializing_if = "Option::is_none")]
    max_iters: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cost_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    delta_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    huber_px: Option<f64>,
}

const TOP_KEYS: &[&str] = &["mode", "window_size", "cameras", "imu", "tracker", "solver"];
const CAMERA_KEYS: &[&str] = &[
    "fx",
    "fy",
    "cx",
    "cy",
    "width",
    "height",
    "extrinsic_pos",
    "extrinsic_quat",
];
const IMU_KEYS: &[&str] = &["sigma_g", "sigma_a", "sigma_bg", "sigma_ba", "gravity_norm"];
const TRACKER_KEYS: &[&str] = &[
    "sigma_px",
    "keyframe_parallax_px",
    "outlier_px",
    "min_features",
];
const SOLVER_KEYS: &[&str] = &["max_iters", "lambda0", "cost_tol", "delta_tol", "huber_px"];

fn collect_unknown_keys(table: &toml::Table, warnings: &mut Vec<String>) {
    let table_keys = |name: &str| -> Option<&'static [&'static str]> {
        match name {
            "imu" => Some(IMU_KEYS),
            "tracker" => Some(TRACKER_KEYS),
            "solver" => Some(SOLVER_KEYS),
            _ => None,
        }
    };
    for (key, value) in table {
        if !TOP_KEYS.contains(&key.as_str()) {
            warnings.push(format!("unknown config key '{key}' ignored"));
            continue;
        }
        match (key.as_str(), value) {
            ("cameras", toml::Value::Array(cams)) => {
                for (i, cam) in cams.iter().enumerate() {
                    if let toml::Value::Table(t) = cam {
                        for sub in t.keys() {
                            if !CAMERA_KEYS.contains(&sub.as_str()) {
                                warnings
                                    .push(format!("unknown config key 'cameras[{i}].{sub}' ignored"));
                            }
                        }
                    }
                }
            }
            (name, toml::Value::Table(t)) => {
                if let Some(known) = table_keys(name) {
                    for sub in t.keys() {
                        if !known.contains(&sub.as_str()) {
                            warnings.push(format!("unknown config key '{name}.{sub}' ignored"));
                        }
                    }
                }
            }
            _ => {}
        }
    }
}

/// A parsed configuration plus warnings about ignored keys.
#[derive(Debug)]
pub struct LoadedConfig {
    pub config: EstimatorConfig,
    pub warnings: Vec<String>,
}

pub fn load_config(path: &Path) -> Result<LoadedConfig, IoError> {
    let text = fs::read_to_string(path).map_err(file_err(path))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<LoadedConfig, IoError> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| IoError::Config(e.to_string()))?;
    let mut warnings = Vec::new();
    collect_unknown_keys(&table, &mut warnings);
    let raw: RawConfig =
        toml::from_str(text).map_err(|e| IoError::Config(e.to_string()))?;

    let mode_str = raw
        .mode
        .ok_or_else(|| IoError::Config("missing required key: mode".into()))?;
    let mode = Mode::from_str(&mode_str).map_err(IoError::Config)?;

    let min_cameras = match mode {
        Mode::Stereo | Mode::StereoImu => 2,
        Mode::MonoImu => 1,
    };
    if raw.cameras.len() < min_cameras {
        return Err(IoError::Config(format!(
            "mode {mode} requires at least {min_cameras} camera(s), got {} (missing key: cameras)",
            raw.cameras.len()
        )));
    }
    let used_cameras = match mode {
        Mode::MonoImu => 1,
        Mode::Stereo | Mode::StereoImu => raw.cameras.len(),
    };
    let mut cameras = Vec::with_capacity(used_cameras);
    for (i, cam) in raw.cameras.iter().take(used_cameras).enumerate() {
        let [qw, qx, qy, qz] = cam.extrinsic_quat;
        let norm = (qw * qw + qx * qx + qy * qy + qz * qz).sqrt();
        if norm < 1e-12 {
            return Err(IoError::Config(format!(
                "cameras[{i}].extrinsic_quat must be nonzero"
            )));
        }
        cameras.push(CameraModel {
            intrinsics: PinholeIntrinsics {
                fx: cam.fx,
                fy: cam.fy,
                cx: cam.cx,
                cy: cam.cy,
                width: cam.width,
                height: cam.height,
            },
            extrinsic: Pose::new(
                Rotation::from_quaternion(qw, qx, qy, qz),
                Vector3::new(cam.extrinsic_pos[0], cam.extrinsic_pos[1], cam.extrinsic_pos[2]),
            ),
        });
    }

    let (imu_noise, gravity_norm) = match (&raw.imu, mode.uses_imu()) {
        (Some(imu), _) => (
            ImuNoise {
                sigma_g: imu.sigma_g,
                sigma_a: imu.sigma_a,
                sigma_bg: imu.sigma_bg,
                sigma_ba: imu.sigma_ba,
            },
            imu.gravity_norm.unwrap_or(9.81),
        ),
        (None, true) => {
            return Err(IoError::Config(format!(
                "mode {mode} requires section [imu] (missing keys: imu.sigma_g, imu.sigma_a, imu.sigma_bg, imu.sigma_ba)"
            )));
        }
        (None, false) => (
            ImuNoise {
                sigma_g: 0.0,
                sigma_a: 0.0,
                sigma_bg: 0.0,
                sigma_ba: 0.0,
            },
            9.81,
        ),
    };

    let mut config = EstimatorConfig::new(mode, CameraRig { cameras }, imu_noise);
    config.gravity_norm = gravity_norm;
    if let Some(w) = raw.window_size {
        if w < 4 {
            return Err(IoError::Config(format!("window_size must be >= 4, got {w}")));
        }
        config.window_size = w;
    }
    if let Some(t) = &raw.tracker {
        if let Some(v) = t.sigma_px {
            config.sigma_px = v;
        }
        if let Some(v) = t.keyframe_parallax_px {
            config.keyframe_parallax_px = v;
        }
        if let Some(v) = t.outlier_px {
            config.outlier_px = v;
        }
        if let Some(v) = t.min_features {
            config.min_features = v;
        }
    }
    if let Some(s) = &raw.solver {
        if let Some(v) = s.max_iters {
            config.solve.max_iters = v;
        }
        if let Some(v) = s.lambda0 {
            config.solve.lambda0 = v;
        }
        if let Some(v) = s.cost_tol {
            config.solve.cost_tol = v;
        }
        if let Some(v) = s.delta_tol {
            config.solve.delta_tol = v;
        }
        if let Some(v) = s.huber_px {
            config.huber_px = v;
        }
    }

    Ok(LoadedConfig { config, warnings })
}

/// Serializes the effective configuration, suitable for `parse_config`.
pub fn config_to_toml(config: &EstimatorConfig) -> String {
    let raw = RawConfig {
        mode: Some(config.mode.to_string()),
        window_size: Some(config.window_size),
        cameras: config
            .rig
            .cameras
            .iter()
            .map(|cam| {
                let [qw, qx, qy, qz] = cam.extrinsic.rotation.wxyz();
                RawCamera {
                    fx: cam.intrinsics.fx,
                    fy: cam.intrinsics.fy,
                    cx: cam.intrinsics.cx,
                    cy: cam.intrinsics.cy,
                    width: cam.intrinsics.width,
                    height: cam.intrinsics.height,
                    extrinsic_pos: [
                        cam.extrinsic.translation.x,
                        cam.extrinsic.translation.y,
                        cam.extrinsic.translation.z,
                    ],
                    extrinsic_quat: [qw, qx, qy, qz],
                }
            })
            .collect(),
        imu: Some(RawImu {
            sigma_g: config.imu_noise.sigma_g,
            sigma_a: config.imu_noise.sigma_a,
            sigma_bg: config.imu_noise.sigma_bg,
            sigma_ba: config.imu_noise.sigma_ba,
            gravity_norm: Some(config.gravity_norm),
        }),
        tracker: Some(RawTracker {
            sigma_px: Some(config.sigma_px),
            keyframe_parallax_px: Some(config.keyframe_parallax_px),
            outlier_px: Some(config.outlier_px),
            min_features: Some(config.min_features),
        }),
        solver: Some(RawSolver {
            max_iters: Some(config.solve.max_iters),
            lambda0: Some(config.solve.lambda0),
            cost_tol: Some(config.solve.cost_tol),
            delta_tol: Some(config.solve.delta_tol),
            huber_px: Some(config.huber_px),
        }),
    };
    toml::to_string_pretty(&raw).expect("config serializes")
}
