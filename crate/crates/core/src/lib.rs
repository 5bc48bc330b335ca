//! FocalCodec: a low-bitrate speech codec.
//!
//! Continuous 1024-dim speech features are compressed by a stack of focal
//! downscaling blocks, binarized on the unit hypersphere into a single
//! 2^L-entry implicit codebook, and expanded back by a mirrored decompressor.
//! A ConvNeXt/iSTFT vocoder turns features into 16 kHz audio.

pub mod bsq;
pub mod codec;
pub mod error;
pub mod focalnet;
pub mod io;
pub mod numerics;
pub mod trainer;
pub mod vocoder;

pub use error::{Error, Result};
pub use numerics::Tensor;
