pub mod error;
pub mod matrix;
pub mod nn;
pub mod rng;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub mod data;
pub mod models;
pub mod protocol;
pub mod genopt;
pub mod moe;
pub mod config;
pub mod distill;
pub mod eval;
pub mod runner;
pub mod verify;
