//! Stereo-supervised monocular depth and ego-motion estimation.
//!
//! The crate is organised bottom-up:
//!
//! * [`grid`] holds the planar image container, 4-level pyramids and Sobel filters.
//! * [`autodiff`] is a small reverse-mode tape over grid-valued nodes, plus a
//!   finite-difference gradient checker.
//! * [`geometry`] has the camera rig, rigid transforms and the reprojection that
//!   drives temporal view synthesis.
//! * [`warp`] does differentiable bilinear inverse warping for the stereo and
//!   temporal reconstruction paths.
//! * [`objective`] builds the Charbonnier-penalised appearance and edge-aware
//!   smoothness terms and their multi-scale weighted total.
//! * [`model`] contains the desk-scale disparity and pose networks, Adam and the
//!   training loop.
//! * [`data`] loads KITTI-style sequences, renders synthetic scenes and applies
//!   augmentation.
//! * [`evalkit`] implements the depth and trajectory metrics.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod grid;
pub mod model;
pub mod objective;
pub mod rng;
pub mod warp;

pub use error::{Error, Result};
pub use grid::{ImageGrid, Pyramid};
