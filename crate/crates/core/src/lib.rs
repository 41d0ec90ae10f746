pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod daf;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod image;
pub mod losses;
pub mod mask;
pub mod nn;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
