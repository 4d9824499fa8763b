pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod filter_design;
pub mod loss_metrics;
pub mod network;
pub mod resampler;
pub mod sfi_layers;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
