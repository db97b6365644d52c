//! Iterated two-sided Brownian flows on intervals.

pub mod bm_path;
pub mod cli;
pub mod io;
pub mod rng;
pub mod excursions;
pub mod flow;
pub mod stats;
pub mod svg;
pub mod witness;
