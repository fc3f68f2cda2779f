pub mod ablate;
pub mod arpm;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod model;
pub mod ops;
pub mod params;
pub mod preprocess;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tape::{grad_check, Grads, Tape, Var};
pub use tensor::Tensor;
