pub mod archive;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod layers;
pub mod models;
pub mod preprocess;
pub mod rng;
pub mod synthetic;
pub mod train;
pub mod wfdb;

pub use error::{Error, Result};
