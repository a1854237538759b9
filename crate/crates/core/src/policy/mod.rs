//! The trainable watermark policy: a small transformer over the last `c` tokens
//! that emits a gate logit and green-selection logits, plus the straight-through
//! machinery that turns them into discrete actions.

pub mod checkpoint;
mod gradcheck;
mod model;
pub mod nn;
mod select;

use thiserror::Error;

use crate::minilang::vocab::PAD;
use crate::minilang::TokenId;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, FORMAT_VERSION};
pub use gradcheck::{gradient_check, Differentiable};
pub use model::{backward, forward, forward_cached, ForwardCache, Init, PolicyConfig, PolicyOutput, PolicyParams, Tensor};
pub use select::{
    gate_decision, green_count, gumbel_green_selection, membership_relaxation, noise_seed, noiseless,
    uniform_noise, uniform_noise_from_seed, GreenSelection, NoiseMode, WGate,
};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("context window has {found} tokens, expected {expected}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("token {0} is outside the vocabulary")]
    InvalidToken(TokenId),
    #[error("invalid policy configuration: {0}")]
    InvalidConfig(String),
    #[error("gradient is not finite")]
    NonFiniteGradient,
    #[error("refusing to save non-finite parameters")]
    NonFiniteParameters,
    #[error("checkpoint format version {found}, this build reads {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint vocabulary hash {found:016x} does not match {expected:016x}")]
    VocabHashMismatch { found: u64, expected: u64 },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The last `c` tokens of `visible`, left-padded with PAD.
pub fn context_window(visible: &[TokenId], c: usize) -> Vec<TokenId> {
    let take = visible.len().min(c);
    let mut w = vec![PAD; c - take];
    w.extend_from_slice(&visible[visible.len() - take..]);
    w
}

impl<S: crate::scalar::Scalar> PolicyParams<S> {
    /// Flat view used by gradient checks: tensors in order, row-major.
    pub fn get_flat(&self, mut i: usize) -> S {
        for t in &self.tensors {
            if i < t.data.len() {
                return t.data[i];
            }
            i -= t.data.len();
        }
        panic!("flat index out of range")
    }

    pub fn set_flat(&mut self, mut i: usize, v: S) {
        for t in &mut self.tensors {
            if i < t.data.len() {
                t.data[i] = v;
                return;
            }
            i -= t.data.len();
        }
        panic!("flat index out of range")
    }

    pub fn flatten(&self) -> Vec<S> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }
}
