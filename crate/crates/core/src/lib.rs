//! Markerless whole-body kinematics: rotation algebra, volumetric
//! multi-view aggregation, skeleton scaling with inverse kinematics, and a
//! small trainable joint-angle regressor, all checked against a synthetic
//! forward-kinematics ground truth.

pub mod cli;
pub mod compare;
pub mod dataset;
pub mod error;
pub mod geomcam;
pub mod iksolve;
pub mod io;
pub mod kinmodel;
pub mod learn;
pub mod rotmath;
pub mod synth;

pub use error::{Error, Result};

/// Re-exported so downstream crates share the linear-algebra types.
pub use nalgebra;
