//! Command-line pipeline: configuration, run manifests, the synthetic city
//! generator and one function per subcommand.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod synth;
