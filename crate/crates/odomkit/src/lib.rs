//! Sliding-window multi-sensor odometry.
//!
//! The estimator fuses camera feature tracks and (optionally) IMU readings in
//! a single nonlinear least-squares problem over a fixed-size window of
//! frames. States leaving the window are marginalized into a dense prior so
//! their information is retained. Supporting modules provide a synthetic
//! scenario generator and trajectory evaluation metrics.

pub mod camera;
pub mod cli;
pub mod estimator;
pub mod eval;
pub mod imu;
pub mod io;
pub mod manifold;
pub mod sim;
pub mod solver;
