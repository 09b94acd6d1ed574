//! Generalized few-shot continual learning with a contrastive mixture of
//! adapters.
//!
//! A small vision transformer is frozen after initialization and augmented
//! with trainable mixture-of-adapter blocks. Class-incremental sessions train
//! the adapters with cross-entropy plus a loose cosine diversity penalty;
//! domain-incremental sessions replace the penalty with a contrastive term
//! that pulls new-domain features toward stored class prototypes. Accuracy
//! is measured with a prototype cosine classifier on seen and held-out
//! domains.

pub mod backbone;
pub mod error;
pub mod memory;
pub mod metrics;
pub mod moa;
pub mod numerics;
pub mod protocol;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
