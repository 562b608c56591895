pub mod cli;
pub mod control;
pub mod corpus;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod prior;
pub mod training;

pub use error::{Error, Result};
