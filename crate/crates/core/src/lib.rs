//! Core algorithms for a desk-scale controllable diffusion pipeline.
//!
//! Everything in this crate is pure computation: a taped reverse-mode tensor
//! engine, classical image operations (Canny, contours, histograms), the
//! denoising U-Net with its structure and style controllers, the diffusion
//! training/sampling loop, and the six image-similarity metrics. File formats,
//! PNG IO, and the command-line driver live in the companion `lpgen` crate.
//!
//! The crate is `no_std` (alloc only); float math goes through `libm`.

#![no_std]

extern crate alloc;

pub mod control;
pub mod dataprep;
pub mod denoiser;
pub mod diffusion;
pub mod math;
pub mod metrics;
pub mod rng;
pub mod style;
pub mod tensor;
pub mod text;
pub mod vision;

pub use rng::Rng;
pub use tensor::Tensor;
