//! Std companion of `epbrm-core`: KITTI file formats, synthetic data, the
//! simulated localizer, run configuration, reports and the command-line
//! commands.

pub mod cli;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod kitti;
pub mod localizer;
pub mod report;
pub mod synth;
pub mod training;
