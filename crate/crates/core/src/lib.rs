//! Learned deformable registration whose encoder latent space is decomposed
//! with PCA into elementary deformations.
//!
//! The pipeline runs in stages:
//!
//! * [`volgrid`] and [`phantom`] provide volumes, label maps and a synthetic
//!   dataset generator;
//! * [`regnet`] holds the encoder/decoder network, built on the small
//!   reverse-mode kernels in [`nn`], with [`warp`] and [`losses`] supplying the
//!   deformation maths and training objectives;
//! * [`trainer`] fits the network, [`latent`] decomposes its latent space and
//!   [`probes`] runs the interpretability experiments on top.

pub mod contour;
pub mod error;
pub mod latent;
pub mod losses;
pub mod nn;
pub mod phantom;
pub mod probes;
pub mod regnet;
pub mod trainer;
pub mod volgrid;
pub mod warp;

pub use error::{Error, Result};
pub use volgrid::{SegMap, Shape, Volume};
