//! Command-line front end: manifests, PNG I/O, run configuration and checkpoints.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod io;
pub mod manifest;
