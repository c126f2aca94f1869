//! Entity state tracking for procedural text.
//!
//! Given a paragraph describing a process and a list of participating
//! entities, this crate predicts where each entity is after every sentence
//! (nowhere, somewhere unknown, or at a location named by a text span) and
//! which transition (create, move, destroy, none) each sentence causes. A
//! reconciliation pass turns the raw predictions into a consistent state
//! grid, and evaluators score grids on location-tracking benchmarks.

pub mod checkpoint;
pub mod data;
pub mod encoding;
pub mod eval;
pub mod formalism;
pub mod infer;
pub mod model;
pub mod synth;
pub mod train;
