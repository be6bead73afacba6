//! Numerical core for hypersphere face-embedding losses.
//!
//! The crate bundles:
//!
//! * [`sphere_math`]: log-domain modified Bessel functions, the von Mises-Fisher
//!   log-density and the vMF similarity with its analytic gradient.
//! * [`uamf`]: margin softmax over vMF similarities with an EMA-tracked
//!   feature-norm margin.
//! * [`proxy_losses`]: absolute-distance regularizers between proxies and
//!   samples, and the clipped epoch-mid schedule.
//! * [`sphere_stats`]: extreme-value estimates for uniformly spread unit
//!   vectors, Monte-Carlo checks and the proxy spread trackers.
//! * [`depth_renderer`]: depth-map rotation by back-projection, rigid
//!   transform, reprojection and scatter-min occlusion on a unified canvas.
//! * [`recon_losses`]: Laplace/Gaussian reconstruction likelihoods, smoothness,
//!   view variance and the weighted training objective.
//! * [`train_harness`]: synthetic data, a linear-embedder trainer, finite
//!   difference gradient checks and histogram dumps.
//! * [`io_formats`]: tensor container, PGM/PPM, config and CSV metrics.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod depth_renderer;
pub mod error;
pub mod io_formats;
pub mod proxy_losses;
pub mod recon_losses;
pub mod sphere_math;
pub mod sphere_stats;
pub mod train_harness;
pub mod uamf;

pub use error::{Error, Result};
