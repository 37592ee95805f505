//! Experiment harness: configs, dataset files, training runs, grids, reports
//! and the `lookbehind` command line.

pub mod cli;
pub mod config;
pub mod error;
pub mod format;
pub mod grid;
pub mod io;
pub mod report;
pub mod training;
