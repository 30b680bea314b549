//! Minimal deterministic reverse-mode automatic differentiation over dense
//! f64 arrays.
//!
//! A [`Tape`] records every primitive applied during a forward pass; one
//! [`Tape::backward`] call replays it in reverse and accumulates exact
//! gradients for every node reachable from the loss. All values are checked
//! finite at primitive boundaries; NaN/Inf is a hard error.

mod adam;
mod array;
mod tape;

pub use adam::{adam_step, Adam, AdamParams};
pub use array::DiffArray;
pub use tape::{Gradients, NodeId, Tape};
