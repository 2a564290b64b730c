//! File formats, evaluation drivers and the command line around `epd-core`.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod export;

pub use error::{Error, Result};
