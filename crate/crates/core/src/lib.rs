pub mod cli;
pub mod data;
pub mod engine;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nets;
pub mod trainer;

pub use error::{Error, Result};
