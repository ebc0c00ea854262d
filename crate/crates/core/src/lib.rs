pub mod data;
pub mod error;
pub mod fusion;
pub mod gnn;
pub mod kg;
pub mod model;
pub mod numerics;
pub mod retrieval;
pub mod text;

pub use error::{Error, Result};
