//! Depth reconstruction for monocular structured-light rigs with a neural
//! signed distance field trained by differentiable volume rendering.
//!
//! The crate is organized bottom-up:
//!
//! - [`geometry`]: pinhole devices, rays, reprojection, triangulation.
//! - [`patterns`]: random multi-scale, Gray-code and phase-shift patterns.
//! - [`scene`]: analytic scenes and synthetic captures with ground truth.
//! - [`autodiff`]: a matrix-valued reverse-mode tape.
//! - [`sdf_net`]: positional encoding + MLP signed distance network.
//! - [`render`]: ray sampling, weight functions, pattern-driven rendering.
//! - [`train`]: losses, the optimizer and the (incremental) training loop.
//! - [`decode`]: Gray-code and phase-shift baselines.
//! - [`depth`]: depth extraction from the network and error metrics.
//! - [`io`] and [`experiment`]: file formats and end-to-end runs.

pub mod autodiff;
pub mod decode;
pub mod depth;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod io;
pub mod optim;
pub mod patterns;
pub mod render;
pub mod scene;
pub mod sdf_net;
pub mod train;

pub use error::{Error, Result};
