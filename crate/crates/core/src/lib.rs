//! Training lab for shallow linear-attention transformers on random linear
//! regression, with optimizers and loss-landscape probes.

pub mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod probes;
pub mod rng;
pub mod stats;
pub mod tasks;

pub use error::{Error, Result};
