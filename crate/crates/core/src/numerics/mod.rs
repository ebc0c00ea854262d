//! Dense tensor substrate: forward primitives, reverse-mode gradients,
//! gradient checking, deterministic dropout and the checkpoint format.

pub mod checkpoint;
pub mod dropout;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod params;
pub mod tensor;

pub use dropout::DropoutCtx;
pub use gradcheck::{grad_check, sample_coords, Coord, GradCheckReport};
pub use graph::{Graph, Var};
pub use params::{Grads, ParamGroup, ParamId, ParamStore, Parameter};
pub use tensor::{Real, Tensor};
