pub mod catalog;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod engram;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod optim;
pub mod quantizer;
pub mod representation;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
