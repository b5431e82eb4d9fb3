//! Self-supervised representation learning with a contrastive likelihood term
//! and an explicit KL invariance penalty, sized to run on a single CPU core.

pub mod analysis;
pub mod augmentation;
pub mod error;
pub mod harness;
pub mod networks;
pub mod objective;
pub mod optimizer;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
