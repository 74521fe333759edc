pub mod ablation;
pub mod augment;
pub mod checks;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod probe;
pub mod queue;
pub mod results;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
