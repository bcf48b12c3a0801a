//! Prompt-gated classifier whose classes can be forgotten by deleting
//! their prompt, plus the training objective and evaluation harness.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod evaluation;
pub mod error;
pub mod model;
pub mod numerics;
pub mod plot;
pub mod prompt_pool;
pub mod seeds;
pub mod training;

pub use error::{Error, Result};
pub use model::Model;
