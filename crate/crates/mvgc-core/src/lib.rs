//! Multi-view geometric consistency toolkit.
//!
//! The crate is `no_std` (allocation required) and fully deterministic: every
//! operation is a pure function of its inputs and, where randomness is
//! involved, an explicit seed. IO, file formats and the CLI live in the
//! companion `mvgc-tools` crate.
//!
//! Module map:
//! - [`geom`]: 3-vectors, 3x3 matrices, rigid transforms.
//! - [`camgeom`]: pinhole cameras, rigs, presets, extrinsic perturbations.
//! - [`raster`]: depth maps, RGB images, bilinear sampling.
//! - [`warp`]: cross-view correspondence fields and pair enumeration.
//! - [`consist`]: overlap depth loss, photometric loss, analytic gradients,
//!   finite-difference verification.
//! - [`adapter`]: bottleneck adapters, residual fusion, parameter accounting,
//!   a small label-efficient adaptation demo.
//! - [`synthrig`]: analytic multi-camera scene rendering.
//! - [`evalkit`]: 7-DoF box matching, NDS-style aggregate, closed gap.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod adapter;
pub mod camgeom;
pub mod consist;
pub mod evalkit;
pub mod geom;
pub mod raster;
pub mod synthrig;
pub mod warp;

pub(crate) mod scalar;
