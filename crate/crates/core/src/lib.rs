//! Parametric human rig engine: skeleton kinematics, blendshapes, sparse
//! pose correctives, identity-space construction, LOD transfer and
//! gradient-based fitting to point clouds.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod body_model;
pub mod correctives;
pub mod error;
pub mod fitting;
pub mod identity;
pub mod io;
pub mod lod;
pub mod math;
pub mod mesh;
pub mod optim;
pub mod skeleton;

pub use error::{Result, RigError};
