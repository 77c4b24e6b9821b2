//! Command-line interface and HTTP annotation service for the `virotem`
//! detection toolkit.

pub mod cli;
pub mod server;
pub mod session;
