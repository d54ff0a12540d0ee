//! Multi-object layered TSDF mapping.

pub mod geometry;
mod mc_tables;
pub mod mesh;
pub mod voxel;
pub mod image;
pub mod mapping;
pub mod persist;
pub mod simulator;
pub mod frontend;
pub mod tracking;
pub mod io;
pub mod scene;
pub mod evaluation;
pub mod pipeline;
