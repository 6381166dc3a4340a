pub mod dataset;
pub mod dempc;
pub mod error;
pub mod harness;
pub mod koopman;
pub mod lifting;
pub mod mlp_baseline;
pub mod neuralnet;
pub mod numkit;
pub mod plant;
pub mod training;

pub use error::{Error, Result};
