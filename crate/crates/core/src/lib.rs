//! Volumetric fast Fourier convolution (vFFC) and an ink-detection pipeline
//! for micro-CT volumes of carbonized papyrus.

pub mod container;
pub mod error;
pub mod evalkit;
pub mod ffc;
pub mod fft;
pub mod kv;
pub mod network;
pub mod nnops;
pub mod params;
pub mod pipeline;
pub mod spectral;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
