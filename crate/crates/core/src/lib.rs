//! Censored spatial-temporal demand estimation for shared micromobility.

pub mod availability;
pub mod choice;
pub mod grid;
pub mod em;
pub mod model;
pub mod simulation;
pub mod ingest;
pub mod archive;
pub mod pipeline;
pub mod synthetic;
