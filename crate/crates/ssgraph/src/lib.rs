//! File formats, run configuration and experiment commands around
//! [`ssgraph_core`].

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;

pub use config::{DataSource, Method, RunConfig};
pub use error::{Error, Result};
