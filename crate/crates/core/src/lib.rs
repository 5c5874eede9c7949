//! Sub-LayerNorm transformers with depth-derived initialization gains.
//!
//! - [`tensor`]: dense `f64` tensors and a reverse-mode tape.
//! - [`layers`]: Post-LN, Pre-LN and Sub-LN attention / feed-forward sub-layers.
//! - [`model`]: encoder-only, decoder-only and encoder-decoder stacks.
//! - [`init`]: Xavier-normal initialization with architecture-dependent gains.
//! - [`theory`]: closed-form model-update bounds and signal-propagation terms.
//! - [`lab`]: empirical one-step update probes, sweeps and gradient checks.

pub mod error;
pub mod init;
pub mod lab;
pub mod layers;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
pub use layers::NormVariant;
pub use model::{Family, ModelConfig, TransformerModel};
pub use rng::Rng;
pub use tensor::{Tape, Tensor, Var};
