//! Low-dimensional subspaces of instantaneous optical flow.
//!
//! A rigid scene seen through a pinhole camera produces optical flow that
//! lives in a small linear subspace once disparity (and, for moving objects,
//! a per-pixel instance embedding) is known. This crate builds those bases
//! analytically, projects observed flow onto them with a thresholded SVD,
//! differentiates the reconstruction loss, and checks everything against an
//! exact reprojection oracle.
//!
//! Module map:
//!
//! * [`geometry`] - shared field types and the pixel-grid convention.
//! * [`basis`] - camera, unknown-focal, masked and embedding bases.
//! * [`projection`] - matrix assembly, truncated SVD, projection and loss.
//! * [`gradients`] - loss gradients w.r.t. disparity and embedding, regularizers.
//! * [`scenes`] - synthetic scenes, exact reprojection and instantaneous flow.
//! * [`motion`] - reading camera/object motion and focal length off coefficients.
//! * [`embedding`] - PCA, gradient magnitude and seed segmentation of embeddings.
//! * [`metrics`] - monocular depth evaluation metrics.
//! * [`io`] - `.flo`, PFM, PGM, PNG and basis-stack manifests.

pub mod basis;
pub mod embedding;
mod error;
pub mod geometry;
pub mod gradients;
pub mod io;
pub mod metrics;
pub mod motion;
pub mod projection;
pub mod scenes;

pub use error::{Error, Result};
