pub mod error;
pub mod esmda;
pub mod exec;
pub mod facies;
pub mod localization;
pub mod metrics;
pub mod observation;
pub mod rng;

pub use error::{Error, Result};
pub use exec::Execution;
pub mod param;
pub mod sim;
pub mod vae;
