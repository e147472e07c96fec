//! Task-oriented mixture-of-experts error correction at desk scale.

pub mod corpus;
pub mod error;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{NekoError, Result};
