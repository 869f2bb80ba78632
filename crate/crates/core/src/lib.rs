//! Facial shadow removal with a three-stage cascade: a shadow-probability
//! mask network, a full-resolution coarse remover built from dilated dynamic
//! convolutions, and a refinement stage that multiplies shifted-window
//! attention with mask-conditioned illumination modulation.

pub mod checkpoint;
pub mod coarse_net;
pub mod config;
pub mod container;
pub mod error;
pub mod imaging;
mod kernels;
pub mod mask_net;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod params;
pub mod perceptual;
pub mod pipeline;
pub mod refine_net;
pub mod synth;
pub mod train;

pub use error::{FseError, Result};
