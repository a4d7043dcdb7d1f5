//! IO, file formats, caching, and the command-line front end over
//! `dfp-core`. The binary (`dfp`) is a thin wrapper around
//! [`commands::run`].

pub mod commands;
pub mod csvfmt;
pub mod dictio;
pub mod records;
pub mod schema;
