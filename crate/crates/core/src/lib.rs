//! Controllable fidelity/realness super-resolution by two-stage distillation.
//!
//! The crate covers the whole toy pipeline: degradation synthesis, small
//! residual denoisers with a hand-written reverse-mode differentiator, the
//! distillation objectives, training loops, metrics and baselines, and the
//! persistence formats used by the CLI and the HTTP service.

pub mod autograd;
pub mod degradation;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod harness;
pub mod imaging;
pub mod losses;
pub mod nets;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
