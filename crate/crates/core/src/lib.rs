//! surfrec: self-supervised reconstruction of a canonical implicit surface
//! plus per-frame forward deformation fields from silhouette/color/normal
//! image sequences of an articulated deforming object.
//!
//! The crate is generic over the working scalar (f32/f64 via [`num::Real`]);
//! the `f64` aliases below are what the harness, CLI and acceptance suite
//! use. Gradient verification is only meaningful at double precision.

pub mod diff;
pub mod error;
pub mod geom;
pub mod num;

pub use error::{Error, Result};
pub use num::Real;

/// Concrete double-precision aliases used by the harness and tests.
pub type Vec3d = geom::Vec3<f64>;
pub type Mat3d = geom::Mat3<f64>;
pub type Aabbd = geom::Aabb<f64>;
pub type Tape64 = diff::Tape<f64>;
pub type ParamSet64 = diff::ParamSet<f64>;
pub type Adam64 = diff::Adam<f64>;
