pub mod augment;
pub mod autodiff;
pub mod bio;
pub mod config;
pub mod corpus;
pub mod crf;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod grid;
pub mod model;
pub mod run;
pub mod train;

pub use error::{Error, Result};
