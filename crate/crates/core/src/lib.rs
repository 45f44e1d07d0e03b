pub mod attention;
pub mod encoders;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod runtime;
pub mod tensor;

pub use error::{Error, Result};
