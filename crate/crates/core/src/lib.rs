pub mod error;
pub mod chunking;
pub mod cli;
pub mod data;
pub mod layers;
pub mod objective;
pub mod separator;
pub mod spgm;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
