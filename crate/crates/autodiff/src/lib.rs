//! Tape-based reverse-mode automatic differentiation over `ndarray`,
//! sized for small sequence models trained on CPU.
//!
//! The pieces:
//! - [`tape::Tape`] records eager forward ops and replays them backward;
//! - [`params::ParamStore`] owns named parameter tensors;
//! - [`nn`] has linear and LSTM builders on top of the tape;
//! - [`optim::AdamW`] updates parameters with decoupled weight decay;
//! - [`fd::check_params`] verifies gradients by central differences.

pub mod fd;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;

pub use params::{ParamError, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
