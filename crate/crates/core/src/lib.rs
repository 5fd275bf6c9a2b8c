pub mod config;
pub mod error;
pub mod geometry;
pub mod kbr;
pub mod metrics;
pub mod patch;
pub mod recon;
pub mod sim;
pub mod tensor;
pub mod volume_io;

pub use error::{NlctfError, Result};
