//! Parameterized building blocks: dense, embedding, dropout and recurrent layers.

mod dense;
mod dropout;
mod embedding;
mod params;
mod recurrent;

pub use dense::{Activation, DenseLayer};
pub use dropout::dropout;
pub use embedding::EmbeddingTable;
pub use params::{uniform, Binding, Param, ParamId, ParamStore};
pub use recurrent::{steps_from_tensor, CellKind, CellState, RecurrentCell, RecurrentStack, Unrolled};
