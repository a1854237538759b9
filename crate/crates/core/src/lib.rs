//! Learned, selectively gated green-list watermarking for a miniature code
//! language. A small policy network decides per position whether to watermark
//! and which tokens are green; detection replays those decisions from the
//! observed tokens alone.
//!
//! Numeric code is generic over [`Scalar`] (f32 or f64). The aliases below fix
//! the precision for callers that do not care.

pub mod base_lm;
pub mod codec;
pub mod corpus;
pub mod eval;
pub mod minilang;
pub mod policy;
pub mod rl;
pub mod scalar;

pub use scalar::Scalar;

/// Double-precision policy weights, used for training and checkpoints.
pub type Policy = policy::PolicyParams<f64>;
pub type PolicyF32 = policy::PolicyParams<f32>;
pub type Logits = base_lm::LogitVector<f64>;
pub type LogitsF32 = base_lm::LogitVector<f32>;
pub type Step = codec::Composite<f64>;
pub type StepF32 = codec::Composite<f32>;
