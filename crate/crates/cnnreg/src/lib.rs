//! Multimodal 3D image registration with a learned convolutional similarity
//! metric.
//!
//! The crate trains a small volumetric CNN to score the dissimilarity of
//! cross-modal patch pairs, evaluates it fully convolutionally over whole
//! volumes, and differentiates it analytically with respect to transform
//! parameters to drive continuous registration (similarity transform followed
//! by cubic B-spline free-form deformation). A mutual-information baseline
//! with optional head masking runs in the same pipeline for comparison.
//!
//! The main pieces:
//!
//! - [`volume`]: 3D scalar grids with physical geometry, trilinear sampling,
//!   spatial gradients, resampling and multiresolution pyramids.
//! - [`transform`]: similarity and B-spline transforms with analytic
//!   parameter Jacobians.
//! - [`network`]: volumetric conv layers, forward/backward passes, dense
//!   dissimilarity maps and backpropagation to the input volume.
//! - [`metric`]: the CNN metric with its chain-rule gradient, the
//!   mutual-information baseline, and forward-only unary potentials.
//! - [`training`]: online patch-pair sampling with augmentation and
//!   hinge-loss SGD.
//! - [`registration`]: regular-step gradient descent and the two-stage
//!   multiresolution pipeline.
//! - [`phantom`] / [`overlap`] / [`sweep`]: synthetic multimodal phantoms,
//!   Dice/Jaccard evaluation and single-parameter perturbation sweeps.
//!
//! Runnable examples covering each capability live under `examples/`; the
//! `cnnreg` binary exposes the same workflows as subcommands.

pub mod cli;
pub mod error;
pub mod io;
pub mod metric;
pub mod network;
pub mod overlap;
pub mod phantom;
pub mod registration;
pub mod sweep;
pub mod training;
pub mod transform;
pub mod volume;

pub use error::{Error, Result};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic per-component RNG: one user-facing seed, split into
/// independent streams so components can draw without interfering.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
