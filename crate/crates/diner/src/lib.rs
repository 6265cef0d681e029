//! Depth-aware image-based neural radiance fields.
//!
//! A volumetric rendering engine and experiment harness for radiance fields
//! conditioned on posed source images with per-view depth estimates. Depth
//! information enters the pipeline twice: as additional conditioning for the
//! per-view MLP (via the signed distance between a sample and the estimated
//! surface) and as guidance for placing ray samples near likely surfaces.
//! Synthetic scenes built from analytic primitives supply exact density,
//! color, depth, and normals as oracles for the experiments.

pub mod encoding;
pub mod field;
pub mod geometry;
pub mod grid;
pub mod harness;
pub mod io;
pub mod math;
pub mod objective;
pub mod rendering;
pub mod rng;
pub mod sampling;
pub mod scene;

pub use geometry::{CameraView, Ray};
pub use grid::Grid;
pub use scene::SyntheticScene;
