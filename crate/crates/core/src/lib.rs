pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod objective;
pub mod routing;
pub mod tensor;
pub mod trace;
pub mod training;

pub use error::{Error, Result};
