pub mod allocator;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod models;
pub mod spaces;
pub mod sampling;
pub mod tensor;

pub use error::{Error, Result};
