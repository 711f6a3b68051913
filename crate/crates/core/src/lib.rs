//! Motion manifold primitives over parametric via-point curves.
//!
//! Demonstrations are fitted to Gaussian-basis curve models, an autoencoder
//! learns a low-dimensional chart of the fitted coefficients (optionally
//! regularized toward a scaled isometry under the curve-space metric), a
//! density on the latent chart generates new motions, and an online loop
//! replans latent coordinates and phase against time-varying constraints.

// `!(x > 0.0)` style guards are used on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod density;
pub mod env;
pub mod error;
pub mod geometry;
pub mod io;
pub mod liegroup;
pub mod nn;
pub mod plot;
pub mod replan;
pub mod trainer;

pub use error::{Error, Result};
