pub mod autodiff;
mod binio;
pub mod concepts;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod intervention;
pub mod metrics;
pub mod params;
pub mod prompts;

pub use error::{CilmpError, Result};
