//! Multi-scale contrastive video–audio pretraining with a conditional
//! diffusion decoder, on a synthetic corpus with known correspondence.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autograd;
pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod model;
pub mod msa;
pub mod msd;
pub mod ops;
pub mod optim;
pub mod params;
pub mod pyramid;
pub mod rawio;
pub mod spectrogram;
pub mod synthpair;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
