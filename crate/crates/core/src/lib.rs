pub mod autodiff;
pub mod data;
pub mod encoders;
pub mod error;
pub mod interaction;
pub mod model;
pub mod objective;
pub mod params;
pub mod reconstruction;
pub mod tensor;
pub mod train;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
