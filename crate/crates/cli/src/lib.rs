//! Command-line front end: configuration files, presets, run orchestration
//! and SVG plots.

pub mod commands;
pub mod config;
pub mod plot;
