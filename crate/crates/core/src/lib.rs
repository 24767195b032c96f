pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod numeric;
pub mod pipeline;
pub mod rng;
pub mod run;
pub mod train;

pub use error::{Error, Result};
