pub mod assignment;
pub mod bp;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nebp;
pub mod nn;
pub mod pipeline;
pub mod simulator;
pub mod training;

pub use error::{Error, Result};
pub use model::*;
