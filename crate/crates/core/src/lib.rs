pub mod autodiff;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod generator;
pub mod nn;
pub mod transfer;

pub use error::{Error, Result};
