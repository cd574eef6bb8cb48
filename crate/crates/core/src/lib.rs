//! Global-guided Hebbian learning.
//!
//! Local Hebbian updates (Oja, soft winner-take-all) supply per-weight step
//! magnitudes; the sign of the backpropagated loss gradient decides each
//! step's direction. The crate covers dense tensors, conv/pool/dense layers,
//! reverse-mode gradients, the plasticity rules, a seeded training loop,
//! dataset loaders and architecture presets.

pub mod arch;
pub mod autodiff;
pub mod datasets;
pub mod error;
pub mod layers;
pub mod plasticity;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
