pub mod benchmark;
pub mod bio;
pub mod checkpoint;
pub mod data_model;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod head;
pub mod model;
pub mod par;
pub mod rng;
pub mod synthgen;
pub mod train;

pub use error::{Error, Result};
