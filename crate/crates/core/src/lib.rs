//! Projected representation conditioning for novel view synthesis.
//!
//! The crate covers the full conditioning path on procedurally generated
//! scenes with exact geometry:
//!
//! - [`scene`]: procedural quad scenes, camera arcs and a ray-cast renderer
//!   producing RGB, depth, pointmaps and instance labels.
//! - [`geometry`]: pointmap aggregation, projection, z-buffered point
//!   rasterization, token-level feature warping and point subsampling.
//! - [`encoding`]: Fourier positional encoding and assembly of the reference
//!   and target condition planes.
//! - [`features`]: synthetic feature families, global/local concatenation and
//!   channel reduction.
//! - [`attention`]: aggregated self-and-cross attention with exact gradients.
//! - [`analysis`]: similarity maps, geometric/semantic correspondence and the
//!   local-vs-distant similarity statistic.
//! - [`probe`]: a shallow reconstruction decoder trained with Adam.
//! - [`metrics`]: PSNR and SSIM.
//! - [`io`]: the RNVT tensor container, camera JSON, scene bundles and image
//!   export.
//! - [`protocol`]: the multi-scene evaluation protocols built on top of the
//!   above (reconstruction probing per view count, point-removal robustness).

pub mod analysis;
pub mod attention;
pub mod camera;
pub mod encoding;
mod error;
pub mod features;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod probe;
pub mod protocol;
pub mod scene;

pub use camera::CameraPose;
pub use error::{Error, Result};
pub use grid::Grid;
