//! Command-line runner and HTTP session service for active inverse reward
//! design.

pub mod cli;
pub mod config;
pub mod protocol;
pub mod runner;
pub mod service;
