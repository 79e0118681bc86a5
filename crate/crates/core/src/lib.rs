pub mod autodiff;
pub mod cli;
pub mod conform;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod pgm;
pub mod ph;
pub mod tensor;
pub mod tpg;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Tool name and version embedded in every output artifact.
pub const VERSION: &str = concat!("topoconv ", env!("CARGO_PKG_VERSION"));
