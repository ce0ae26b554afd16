//! Differentiable textured-mesh generation toolkit.
//!
//! The crate is organised bottom-up:
//!
//! * [`tetgrid`]: deformable tetrahedral grids, SDF/deformation fields and volume subdivision.
//! * [`isosurface`]: differentiable marching tetrahedra with analytic backward pass.
//! * [`fields`]: tri-plane texture fields, positional encoding, modulated FC layers.
//! * [`render`]: software rasterizer producing a G-buffer, silhouette antialiasing and VJPs.
//! * [`shading`]: spherical-Gaussian lighting, deferred shading and environment fitting.
//! * [`losses`]: non-saturating GAN objective, R1 penalty and the SDF sign regularizer.
//! * [`metrics`]: surface sampling, Chamfer / COV / MMD and the Fréchet distance.
//! * [`pipeline`]: multi-view fitting, toy adversarial training and latent interpolation.
//! * [`blob`]: the checkpoint container (JSON header + little-endian f64 blob).
//!
//! All math is double precision. Every differentiable forward op has an explicit
//! vector–Jacobian product next to it so gradients can be checked per op.

pub mod blob;
pub mod error;
pub mod fields;
pub mod isosurface;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod sdf;
pub mod shading;
pub mod tetgrid;

pub use error::{Error, Result};
pub use math::Vec3;
