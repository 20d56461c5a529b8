pub mod error;
pub mod linalg;
pub mod rng;
pub mod mixlora;
pub mod grad;
pub mod model;
pub mod checkpoint;
pub mod kv;
pub mod interference;
pub mod harness;
pub mod config;
pub mod cli;

pub use error::{Error, Result};
