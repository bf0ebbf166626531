//! File formats, experiment configuration, sweep runner and plots on top of
//! `branchnet-core`.

pub mod config;
mod error;
pub mod io;
pub mod presets;
pub mod render;
pub mod run;

pub use error::{Error, Result};
