//! The `fsmqa` command line and feedback service.

pub mod api;
pub mod cli;
pub mod config;
pub mod manifest;
