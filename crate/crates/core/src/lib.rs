pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod heads;
pub mod losses;
pub mod network;
pub mod params;
pub mod rademacher;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
