//! Shape registration of slender continuum robots from binary camera images.
//!
//! The backbone is modelled as a moving-frame curve ([`curve`]) whose
//! curvature is a piecewise cubic Hermite polynomial. Its projection into
//! each calibrated camera ([`camera`]) is matched against the white pixels of
//! binary images ([`raster`]) with an iterative-closest-point curve fit
//! ([`icp`]). An epipolar pipeline ([`epipolar`]) provides an optional warm
//! start, and [`eval`] holds scenarios, metrics and repeated-seed experiments.

pub mod camera;
pub mod curve;
pub mod epipolar;
pub mod error;
pub mod eval;
pub mod icp;
pub mod raster;

pub use error::{Error, Result};
