//! Command-line front end and HTTP service for `parley-core`.

pub mod cli;
pub mod server;
