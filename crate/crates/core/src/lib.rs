pub mod autodiff;
pub mod error;
pub mod io;
pub mod kernels;
pub mod model;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use model::{build_model, ForwardOptions, Model, ModelConfig};
pub use tensor::{Scalar, Tensor};
