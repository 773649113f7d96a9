//! Fitting HDR environment maps with sinusoidal implicit networks and
//! editing them by inverting a linear light-transport operator.
//!
//! The crate is organised bottom-up:
//!
//! * [`hdr`] – the [`HdrImage`] container, PFM I/O, luminance and the
//!   log-space normalisation used by the networks.
//! * [`mlp`] – a small reverse-mode differentiable sine MLP.
//! * [`optim`] – Adam plus the learning-rate and regulariser-weight schedules.
//! * [`metrics`] – MSE, PSNR and windowed SSIM (with an analytic gradient).
//! * [`siren`] – log-space fitting of an environment map, optionally with
//!   adversarial weight perturbation.
//! * [`render`] – analytic scenes baked into a sparse transport operator.
//! * [`inverse`] – gradient-based recovery of an environment map from a
//!   target rendering.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod error;
pub mod hdr;
pub mod inverse;
pub mod metrics;
pub mod mlp;
pub mod optim;
pub mod real;
pub mod render;
pub mod siren;
pub mod synth;

pub use error::{Error, ErrorKind, Result};
pub use hdr::{HdrImage, NormalizationParams};
pub use real::Real;
