//! # vqpurify
//!
//! A desk-scale testbed for defending image classifiers against clean-label
//! data poisoning by purifying images through a vector-quantized autoencoder
//! trained with a patch discriminator. Everything runs on a self-contained,
//! deterministic tensor/autodiff engine; no external ML framework.
//!
//! The core math is generic over the scalar type ([`Scalar`]): training runs
//! at `f32`, while gradient-check tests reuse the same code at `f64`.

pub mod conv;
pub mod error;
pub mod optim;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Fwd, NodeId, Tape};
pub use tensor::Tensor;

/// Scalar type used for training and experiments.
pub type Real = f32;
/// Training-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// High-precision tensor for gradient-check test mode.
pub type Tensor64 = Tensor<f64>;
/// Training-precision tape.
pub type Tape32 = Tape<f32>;

/// Splitmix64 finalizer; used to derive independent seed streams.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
