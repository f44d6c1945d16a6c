//! Latent-space image watermarking laboratory.
//!
//! Embeds zero-bit and multi-bit watermarks by adversarial optimization in a
//! feature extractor's latent space, mounts copy and removal attacks against
//! them without key knowledge, and measures how detection and decoding
//! degrade with the attack distortion budget.

pub mod attacks;
pub mod augment;
pub mod embed;
mod error;
pub mod features;
pub mod gradsuite;
pub mod harness;
pub mod ndgrad;
pub mod optim;
pub mod percept;
pub mod rng;
pub mod synth;
pub mod wmcodec;

pub use error::{Error, Result};
pub use features::{FeatureExtractor, LatentVector};
pub use percept::ImagePlane;
