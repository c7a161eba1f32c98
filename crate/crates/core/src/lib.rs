pub mod app;
pub mod cohort;
pub mod error;
pub mod evaluation;
pub mod explain;
pub mod neighbors;
pub mod policy;
pub mod simulator;
pub mod symptoms;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
