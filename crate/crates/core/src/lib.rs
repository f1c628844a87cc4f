pub mod adapt;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod ssl;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
