pub mod app;
pub mod data;
pub mod decoding;
pub mod error;
pub mod imitation;
pub mod model;
pub mod rng;
pub mod robustness;
pub mod scheduling;
pub mod tensor;

pub use error::{Error, Result};
