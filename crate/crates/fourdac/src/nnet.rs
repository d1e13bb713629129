//! Minimal neural runtime.
//!
//! Dense layers with leaky-rectifier hidden activations, shared-MLP set
//! aggregation with element-wise max pooling, hand-rolled reverse-mode
//! gradients, an Adam optimizer over flattened parameters, the training
//! losses, and the discretized coefficient density models that drive the
//! range coder. Everything is f64 and deterministic.

pub mod adam;
pub mod density;
pub mod loss;
pub mod mlp;

pub use adam::Adam;
pub use density::{DensityModel, DensityVariant, ALPHABET, ESCAPE_HI, ESCAPE_LO, K_MAX};
pub use loss::{loss_ce, loss_mc, loss_me, total_loss, LossWeights};
pub use mlp::{set_aggregate, set_aggregate_backward, Mlp, MlpTrace, SetTrace};
