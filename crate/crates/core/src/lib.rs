//! Boundary spectral data and Dirichlet-to-Neumann maps on boxes.

extern crate openblas_src;

pub mod assembly;
pub mod bsd_metrics;
pub mod elliptic_dtn;
pub mod error;
pub mod geometry;
pub mod hyperbolic_dtn;
pub mod io;
pub mod linalg;
pub mod quadrature;
pub mod report;
pub mod spectral;
pub mod verify;

pub use error::{Error, Result};
