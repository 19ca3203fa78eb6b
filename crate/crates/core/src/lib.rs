//! Evidence-injected multi-choice reading comprehension at desk scale.
//!
//! The crate bundles two evidence generators (a small causal language model
//! and a knowledge-graph triple pipeline), a trainable contextual encoder,
//! bilinear-attention evidence injection with co-matching, and a capsule
//! answer head with dynamic routing, plus the dataset/training/eval harness
//! that ties them together.
//!
//! The numeric kernel is generic over the scalar type; the aliases below pin
//! the `f64` instantiation the models use.

pub mod capsule;
pub mod encoder;
pub mod factual;
pub mod injection;
pub mod numerics;
pub mod pipeline;
pub mod textual;

pub use numerics::Scalar;

/// Concrete tensor type used by the models.
pub type Tensor = numerics::Tensor<f64>;
/// Concrete computation tape used by the models.
pub type Tape = numerics::Tape<f64>;
/// Concrete parameter store used by the models.
pub type ParamStore = numerics::ParamStore<f64>;
/// Concrete optimizer used by the models.
pub type Optimizer = numerics::Optimizer<f64>;
