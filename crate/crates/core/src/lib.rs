pub mod autograd;
pub mod bench;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod rng;
pub mod ssm;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
