pub mod agl;
pub mod arc;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod optim;
pub mod par;
pub mod tensor;
pub mod trainer;
pub mod uad;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
