//! Meshfree generalized multiscale finite elements with exponential time
//! integration for 3D advection-diffusion in high-contrast media.

pub mod assembly;
pub mod coarse_solver;
pub mod config;
pub mod error;
pub mod experiment;
pub mod fine_integrators;
pub mod grid;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod msbasis;
pub mod pointcloud;

pub use error::{Error, Result};
