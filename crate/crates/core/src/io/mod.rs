//! File formats, run configuration and report lines.

pub mod checkpoint;
pub mod config;
pub mod melfile;
pub mod report;
pub mod wav;
