//! File formats, dataset generation, candidate scoring, closed-loop
//! evaluation, the external-policy bridge and the command line, on top of
//! `deconflict-core`.

pub mod bridge;
pub mod cli;
pub mod dataset;
pub mod eval;
pub mod formats;
pub mod report;
pub mod scoring;
