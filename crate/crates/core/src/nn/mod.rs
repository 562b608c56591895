//! Minimal neural-network toolkit: parameter storage, a tape autodiff, a few
//! layers and the Adam optimizer.

mod graph;
mod layers;
mod params;

pub use graph::{upsample_weights, Graph, Var};
pub use layers::{BiGru, Conv1d, Gru, Linear};
pub use params::{Adam, Gradients, Mat, ParamEntry, ParamId, ParamStore};
