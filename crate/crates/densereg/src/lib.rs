//! Registration-free fitting of a topology-consistent parametric head mesh
//! to raw multi-view scans.
//!
//! The pipeline couples a software rasterizer producing per-view pointmaps
//! and normal maps, robust rendered-map losses, a pseudo-linear inverse
//! kinematic solver that anchors free-form vertex predictions to a
//! parametric model, dense landmark reprojection, and a short test-time
//! refinement pass. Everything is deterministic: identical inputs, seeds
//! and configs reproduce trajectories bit for bit.

pub mod camera;
pub mod cli;
pub mod container;
pub mod losses;
pub mod meshio;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pliks;
pub mod plot;
pub mod raster;
pub mod synth;

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
