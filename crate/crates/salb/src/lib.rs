//! File formats, result emission and the command-line runner for
//! [`salb_core`].

pub mod cli;
pub mod config;
pub mod container;
pub mod error;
pub mod formats;
pub mod results;

pub use error::{Error, Result};
