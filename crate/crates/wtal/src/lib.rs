//! File formats, configuration, reporting and the command line around
//! `wtal-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod featfile;
pub mod manifest;
pub mod pipeline;
pub mod report;

pub use error::{Result, WtalError};
