pub mod atvc;
pub mod baselines;
pub mod env;
pub mod error;
pub mod harness;
pub mod math;
pub mod nn;
pub mod oracle;
pub mod trainer;

pub use error::{Error, Result};
