pub mod config;
pub mod csvio;
pub mod engine;
pub mod error;
pub mod genset;
pub mod netmodel;
pub mod pvunit;
pub mod stability;
pub mod svg;
pub mod sweep;

pub use error::{Error, Result};
