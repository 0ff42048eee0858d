//! Command-line front end and HTTP labeling-session service for `uufind`.

pub mod cli;
pub mod service;
pub mod session;
