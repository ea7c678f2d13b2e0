//! Partial-reference image quality assessment at desk scale: geometric
//! partial quality maps from cross-view warping, a reference-conditioned
//! quality-completion network with training, a correlation evaluation
//! harness, and quality-aware supervision outputs for splatting trainers.

pub mod autodiff;
pub mod completion;
pub mod error;
pub mod evalharness;
pub mod featuremetrics;
pub mod geometry;
pub mod grid;
pub mod gsguide;
pub mod losses;
pub mod scenekit;
pub mod trainer;

pub use error::{PriqaError, Result};
