//! Miscommunication detection from facial feature time-series.

pub mod cli;
pub mod clips;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod salience;
pub mod stream;

pub use error::{Error, Result};
