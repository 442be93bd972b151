pub mod error;
pub mod explore;
pub mod interp;
pub mod model;
pub mod persist;
pub mod taskgen;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
