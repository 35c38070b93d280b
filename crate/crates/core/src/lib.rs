pub mod cli;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod model;
pub mod posterior;
pub mod quadrature;
pub mod simulate;
pub mod vb;

pub use error::{Error, Result};
