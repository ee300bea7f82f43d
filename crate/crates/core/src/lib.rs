pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod image;
pub mod model;
pub mod objectives;
pub mod params;
pub mod render;
pub mod rng;
pub mod sampling;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use params::ParamStore;
pub use tensor::Tensor;
