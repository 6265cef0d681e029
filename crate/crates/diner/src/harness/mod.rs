//! Experiment harness: scene files, camera rigs, training, experiments, and
//! the CLI front-end.

pub mod adam;
pub mod cli;
pub mod experiments;
pub mod scene_gen;
pub mod train;

pub use scene_gen::{parse_scene_file, parse_scene_str, SceneSpec};
