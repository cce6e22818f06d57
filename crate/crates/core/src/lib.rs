//! Multilingual unsupervised neural machine translation with cross-lingual
//! (pivot) supervision, on a from-scratch `f64` transformer.
//!
//! Layers, bottom up:
//! - [`tensor`], [`autograd`], [`optim`]: dense tensors, reverse-mode AD,
//!   Adam with warm-up.
//! - [`text`]: vocabulary, corpora, batching, and the denoising noise model.
//! - [`synth`]: cipher languages over a shared concept space with an exact
//!   translation oracle.
//! - [`model`]: one shared encoder-decoder for every direction.
//! - [`train`]: loss terms, pseudo-data generation, and the training loop.
//! - [`eval`]: BLEU, token accuracy, comparison tables.
//! - [`experiment`]: configs, run directories, and the command implementations.

pub mod autograd;
pub mod exec;
pub mod optim;
pub mod tensor;
pub mod text;
pub mod synth;
pub mod model;
pub mod train;
pub mod eval;
pub mod experiment;

pub use autograd::{Graph, Gradients, OpKind, Var};
pub use exec::Exec;
pub use tensor::{Tensor, TensorError};
