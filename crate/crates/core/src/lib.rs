pub mod autograd;
pub mod data;
pub mod dropout;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use params::{Bound, ParamStore};
pub use rng::Rng;
pub use tensor::Tensor;
