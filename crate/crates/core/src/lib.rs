//! Few-shot GAN adaptation with dynamic filter importance.
//!
//! The target pair starts as a copy of a pretrained source pair. During
//! adaptation every filter is periodically scored by the first-order Fisher
//! information of the adversarial loss; high-importance filters are frozen,
//! the lowest-importance ones are zeroed permanently, and the rest fine-tune.

pub mod adversarial;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod harness;
pub mod importance;
pub mod models;
pub mod optim;
pub mod rng;
pub mod scheduler;
pub mod tensor;

pub use error::{Error, Result};
