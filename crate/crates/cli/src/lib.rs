//! Configuration-driven experiment runner.

pub mod app;
pub mod config;
pub mod runner;
