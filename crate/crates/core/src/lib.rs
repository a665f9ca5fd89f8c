//! Activation-map vector quantization (AM-VQ) for 360-degree image semantic
//! communication, at desk scale.
//!
//! The pipeline: a convolutional encoder turns an equirectangular image into a
//! grid of feature vectors; each vector is either replaced by the index of its
//! nearest codeword or sent raw, depending on a Grad-CAM style map of how much
//! quantization would distort it; the resulting hybrid stream is serialized,
//! pushed through a simulated fading channel, decoded, and scored with
//! viewport-based quality metrics.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the deployment precision.

pub mod amvq;
pub mod channel;
pub mod checkpoint;
pub mod codec;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod vq;

pub use error::{Error, Result};
pub use codec::{Codec, CodecConfig, FeatureGrid};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Codec32 = codec::Codec<f32>;
pub type FeatureGrid32 = codec::FeatureGrid<f32>;
