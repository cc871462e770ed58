//! Companion crate of `mvgc-core`: file formats (PFM/PGM/PPM rasters, JSON
//! rigs, scenes, boxes and reports), run manifests, and the `mvgc` CLI.

pub mod bundle;
pub mod cli;
pub mod formats;
pub mod manifest;
pub mod pfm;

pub use cli::run;
