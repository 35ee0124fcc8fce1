pub mod bench;
pub mod cli;
pub mod encoders;
pub mod error;
pub mod interface;
pub mod losses;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
