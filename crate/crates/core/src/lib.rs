//! Predict-and-refine conditional diffusion for blind image deblurring.
//!
//! A deterministic initial predictor produces a candidate restoration from
//! the blurry input; a small conditional denoiser network, trained jointly
//! with it, models only the residual between the reference and that
//! candidate. Sampling runs the reverse diffusion chain on the residual and
//! adds the result back onto the initial prediction.
//!
//! The crate is self-contained: noise schedules, a CPU tensor substrate with
//! reverse-mode autodiff for the convolutional ops, the two fully
//! convolutional U-Nets, joint training with EMA and checkpointing, the
//! refinement sampler with sample averaging and grid sweeps, synthetic
//! blur-pair dataset generation, and the distortion/diversity metrics used
//! to analyze results.

pub mod data;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod trainer;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::{Scalar, Shape, Tensor};
