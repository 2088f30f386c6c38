//! Constrained differentiable architecture search for multichannel time-series classifiers.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod genotype;
pub mod gradcheck;
pub mod harness;
pub mod layers;
pub mod optim;
pub mod search;
pub mod space;
pub mod supernet;
pub mod tensor;
pub mod threads;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;
