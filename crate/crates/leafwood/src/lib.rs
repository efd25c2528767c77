//! File formats, parallel drivers and the `leafwood` command-line tool on
//! top of [`leafwood_core`].

pub mod cli;
pub mod config;
pub mod error;
pub mod manifest;
pub mod parallel;
pub mod pcio;
pub mod report;
pub mod store;
pub mod weights;

pub use error::{Error, Result};
pub use leafwood_core as core;
