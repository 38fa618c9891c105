pub mod dataset;
pub mod diagnostics;
pub mod model;
pub mod sim;
pub mod error;
pub mod estimands;
pub mod stats;
pub mod softbart;
pub mod trees;
pub mod tsbart;

pub use error::{Error, Result};
