//! Reverse-mode differentiation and optimisers.

pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use optim::{Adam, LrSchedule};
pub use params::ParamStore;
pub use tape::{CustomOp, Gradients, ParamId, Tape, Var};
pub use tensor::Tensor;
