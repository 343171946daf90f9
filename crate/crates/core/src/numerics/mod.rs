//! Differentiable substrate: tensors, a reverse-mode tape, layers, the
//! Adam optimizer, finite-difference checking and checkpoint files.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use gradcheck::{grad_check, ROUNDING_FLOOR};
pub use graph::{cosine, Graph, Pooling, SeqLayout, Var};
pub use layers::{linear_forward, LayerNorm, Linear, Mlp};
pub use params::{ParamId, ParamStore};
pub use tensor::{Real, Tensor};
