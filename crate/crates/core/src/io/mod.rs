//! File formats and dataset assembly.

pub mod dataset;
pub mod dump;
pub mod manifest;
pub mod mosdoc;
pub mod repro;
pub mod samples;
pub mod synth;
