//! Training with adversarial feature-space perturbations and moment re-normalization.
//!
//! Small split networks are trained with adversarially perturbed
//! intermediate features and with clean features re-normalized by the
//! perturbed features' moments. The crate contains the full stack: a
//! reverse-mode tensor engine, model definitions, the augmentation routines,
//! the trainer, evaluation (accuracy, robustness, Hessian flatness, loss
//! landscapes) and an experiment harness behind the `afan` binary.

pub mod error;
pub mod eval;
pub mod harness;
pub mod par;
pub mod seed;
pub mod afan;
pub mod models;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
