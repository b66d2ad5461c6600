//! Command-line pipeline around `bevtrack`: data generation, training,
//! evaluation, tracking, ablation, rendering and benchmarks.

pub mod commands;
pub mod config;
pub mod pipeline;
pub mod render;
